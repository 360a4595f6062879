//! 16-bit binary PGM output for inspecting depth maps.

use std::io::Write;

use virtview::geometry::DepthImage;

/// Depth in whole millimeters, big-endian as the format requires. Invalid
/// pixels are 0 and depths beyond the 16-bit range saturate.
pub fn encode(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.values.len() * 2);
    for &d in &depth.values {
        let v = if d.is_finite() && d > 0.0 { d.round().min(65535.0) as u16 } else { 0 };
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write(path: &std::path::Path, depth: &DepthImage) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode(depth))?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use virtview::geometry::{FrameId, Intrinsics};

    #[test]
    fn header_and_samples() {
        let intr = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 3,
            height: 1,
        };
        let d = DepthImage {
            width: 3,
            height: 1,
            values: vec![0.0, 300.4, 70000.0],
            intrinsics: intr,
            frame_id: FrameId::Original,
        };
        let b = encode(&d);
        let header = b"P5\n3 1\n65535\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 0, 1, 44, 255, 255]);
    }
}
