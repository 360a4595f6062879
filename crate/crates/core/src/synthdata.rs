//! Synthetic articulated hand built from capsules, rendered to depth with
//! exact joint labels, plus augmentation and a portable dataset file.
//!
//! # Joints
//!
//! | id | joint | parent |
//! |----|-------|--------|
//! | 0 | palm | - |
//! | 1, 2 | wrist radial, ulnar | 0 |
//! | 3, 4, 5 | thumb root, mid, tip | 0, 3, 4 |
//! | 6, 7 | index mid, tip | 0, 6 |
//! | 8, 9 | middle mid, tip | 0, 8 |
//! | 10, 11 | ring mid, tip | 0, 10 |
//! | 12, 13 | pinky mid, tip | 0, 12 |
//!
//! # Dataset file
//!
//! ```text
//! "VVDS"                      4 bytes magic
//! header_len                  u32 LE
//! header                      header_len bytes of JSON (DatasetHeader)
//! per frame, frame_count times:
//!   depth                     width*height u16 LE, row-major, millimeters, 0 = hole
//!   joints                    K*3 f32 LE, millimeters, original camera frame
//!   centroid                  3 f32 LE
//!   seed                      u64 LE
//!   pose angles               pose_dof f64 LE
//!   translation               3 f64 LE
//!   view jitter               3 f64 LE, axis-angle radians
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{centroid, DEFAULT_MAX_RANGE_MM, unproject, DepthImage, FrameId, HandPose, Intrinsics, PointCloud, RigidTransform, Vec3, VirtualView};
use crate::parallel::ordered_map;
use crate::renderer::{render_depth, RenderConfig};
use crate::seed::mix_seed;

pub const DATASET_MAGIC: &[u8; 4] = b"VVDS";
pub const DATASET_VERSION: u32 = 1;
pub const NUM_JOINTS: usize = 14;
/// Global yaw, pitch, roll followed by abduction, proximal and distal
/// flexion for each of the five fingers.
pub const POSE_DOF: usize = 3 + 5 * 3;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "palm",
    "wrist_radial",
    "wrist_ulnar",
    "thumb_root",
    "thumb_mid",
    "thumb_tip",
    "index_mid",
    "index_tip",
    "middle_mid",
    "middle_tip",
    "ring_mid",
    "ring_tip",
    "pinky_mid",
    "pinky_tip",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerSpec {
    pub name: String,
    /// Pivot in the hand frame. For the thumb this is the thumb root joint.
    pub knuckle_mm: [f64; 3],
    /// In-plane rest direction, radians from the hand's `-y` axis toward `+x`.
    pub rest_angle: f64,
    pub lengths_mm: [f64; 2],
    pub radius_mm: f64,
    pub abduction_limit: (f64, f64),
    pub flex_limits: [(f64, f64); 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthHandSpec {
    /// Thumb first, then index, middle, ring, pinky.
    pub fingers: Vec<FingerSpec>,
    pub wrist_mm: [[f64; 3]; 2],
    pub palm_radius_mm: f64,
    /// Yaw, pitch, roll limits of the whole hand.
    pub global_limits: [(f64, f64); 3],
    /// Hand-frame origin in the camera frame before jitter.
    pub origin_mm: [f64; 3],
    pub translation_jitter_mm: [f64; 3],
    /// Surface samples per square millimeter.
    pub density_per_mm2: f64,
    pub splat_radius: u32,
}

fn finger(name: &str, knuckle: [f64; 3], rest: f64, lengths: [f64; 2], radius: f64, abd: (f64, f64), flex: [(f64, f64); 2]) -> FingerSpec {
    FingerSpec {
        name: name.into(),
        knuckle_mm: knuckle,
        rest_angle: rest,
        lengths_mm: lengths,
        radius_mm: radius,
        abduction_limit: abd,
        flex_limits: flex,
    }
}

impl Default for SynthHandSpec {
    fn default() -> Self {
        let f = [(0.0, 1.4), (0.0, 1.6)];
        Self {
            fingers: vec![
                finger("thumb", [34.0, 12.0, -4.0], 0.9, [36.0, 30.0], 10.0, (-0.4, 0.4), [(-0.2, 0.9), (0.0, 1.0)]),
                finger("index", [24.0, -40.0, 0.0], 0.08, [45.0, 40.0], 9.0, (-0.25, 0.25), f),
                finger("middle", [8.0, -43.0, 0.0], 0.0, [50.0, 44.0], 9.0, (-0.25, 0.25), f),
                finger("ring", [-8.0, -41.0, 0.0], -0.06, [46.0, 40.0], 8.5, (-0.25, 0.25), f),
                finger("pinky", [-23.0, -36.0, 0.0], -0.15, [36.0, 32.0], 7.5, (-0.25, 0.25), f),
            ],
            wrist_mm: [[22.0, 42.0, 0.0], [-22.0, 42.0, 0.0]],
            palm_radius_mm: 11.0,
            global_limits: [(-0.5, 0.5), (-0.5, 0.5), (-0.6, 0.6)],
            origin_mm: [0.0, 30.0, 450.0],
            translation_jitter_mm: [20.0, 15.0, 40.0],
            density_per_mm2: 0.6,
            splat_radius: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl SynthHandSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fingers.len() != 5 {
            return Err(Error::Invalid(format!("hand needs 5 fingers, got {}", self.fingers.len())));
        }
        let positive = self.fingers.iter().all(|f| f.radius_mm > 0.0 && f.lengths_mm.iter().all(|&l| l > 0.0));
        if !positive || self.palm_radius_mm <= 0.0 || self.density_per_mm2 <= 0.0 {
            return Err(Error::Invalid("bone lengths, radii and density must be positive".into()));
        }
        if self.angle_limits().iter().any(|(lo, hi)| lo > hi) {
            return Err(Error::Invalid("angle limit with lo > hi".into()));
        }
        let parents = self.parents();
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return Err(Error::Invalid("bone graph is not a tree in topological order".into()));
                }
            }
        }
        Ok(())
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        vec![
            None,
            Some(0),
            Some(0),
            Some(0),
            Some(3),
            Some(4),
            Some(0),
            Some(6),
            Some(0),
            Some(8),
            Some(0),
            Some(10),
            Some(0),
            Some(12),
        ]
    }

    /// `(lo, hi)` per pose angle, in pose-vector order.
    pub fn angle_limits(&self) -> Vec<(f64, f64)> {
        let mut out = self.global_limits.to_vec();
        for f in &self.fingers {
            out.push(f.abduction_limit);
            out.extend_from_slice(&f.flex_limits);
        }
        out
    }

    /// Stable digest of the spec, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn rx(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vec3::x_axis(), a).matrix()
}

fn ry(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vec3::y_axis(), a).matrix()
}

fn rz(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vec3::z_axis(), a).matrix()
}

pub fn check_angles(spec: &SynthHandSpec, angles: &[f64]) -> Result<()> {
    let limits = spec.angle_limits();
    if angles.len() != limits.len() {
        return Err(Error::LengthMismatch {
            expected: limits.len(),
            got: angles.len(),
        });
    }
    for (index, (&value, &(lo, hi))) in angles.iter().zip(&limits).enumerate() {
        if !(value >= lo && value <= hi) {
            return Err(Error::AnglesOutOfRange { index, value, lo, hi });
        }
    }
    Ok(())
}

/// Hand-frame to camera-frame transform for a pose.
pub fn hand_to_camera(angles: &[f64], translation: &Vec3) -> RigidTransform {
    RigidTransform {
        rotation: ry(angles[0]) * rx(angles[1]) * rz(angles[2]),
        translation: *translation,
    }
}

/// Joints and capsules in the camera frame.
pub fn forward_kinematics(spec: &SynthHandSpec, angles: &[f64], translation: &Vec3) -> Result<(Vec<Vec3>, Vec<Capsule>)> {
    check_angles(spec, angles)?;
    let g = hand_to_camera(angles, translation);
    let mut joints = vec![Vec3::zeros(); NUM_JOINTS];
    let mut caps = Vec::new();
    let wrist = [Vec3::from(spec.wrist_mm[0]), Vec3::from(spec.wrist_mm[1])];
    joints[1] = wrist[0];
    joints[2] = wrist[1];
    let down = Vec3::new(0.0, -1.0, 0.0);
    let mut knuckles = Vec::new();
    for (fi, f) in spec.fingers.iter().enumerate() {
        let a = &angles[3 + 3 * fi..6 + 3 * fi];
        let base = Vec3::from(f.knuckle_mm);
        let r1 = rz(f.rest_angle + a[0]) * rx(a[1]);
        let mid = base + r1 * down * f.lengths_mm[0];
        let r2 = r1 * rx(a[2]);
        let tip = mid + r2 * down * f.lengths_mm[1];
        caps.push(Capsule {
            a: base,
            b: mid,
            radius: f.radius_mm,
        });
        caps.push(Capsule {
            a: mid,
            b: tip,
            radius: 0.9 * f.radius_mm,
        });
        if fi == 0 {
            joints[3] = base;
            joints[4] = mid;
            joints[5] = tip;
        } else {
            joints[4 + 2 * fi] = mid;
            joints[5 + 2 * fi] = tip;
        }
        knuckles.push(base);
    }
    let pr = spec.palm_radius_mm;
    let wmid = (wrist[0] + wrist[1]) / 2.0;
    let palm_caps = [
        (wrist[0], wrist[1]),
        (wrist[0], knuckles[1]),
        (wrist[1], knuckles[4]),
        (wmid, knuckles[2]),
        (wmid, knuckles[3]),
        (knuckles[1], knuckles[4]),
        (wrist[0], knuckles[0]),
        (knuckles[0], knuckles[1]),
    ];
    for (a, b) in palm_caps {
        caps.push(Capsule { a, b, radius: pr });
    }
    // palm center: mean of the wrist midpoint and the knuckle row
    joints[0] = (wmid + (knuckles[1] + knuckles[2] + knuckles[3] + knuckles[4]) / 4.0) / 2.0;
    let joints = joints.iter().map(|j| g.apply(j)).collect();
    let caps = caps
        .iter()
        .map(|c| Capsule {
            a: g.apply(&c.a),
            b: g.apply(&c.b),
            radius: c.radius,
        })
        .collect();
    Ok((joints, caps))
}

fn orthonormal_pair(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = d.cross(&helper).normalize();
    (e1, d.cross(&e1))
}

/// Uniformly scattered surface points of a capsule.
pub fn sample_capsule<R: Rng>(c: &Capsule, density: f64, rng: &mut R, out: &mut Vec<Vec3>) {
    let axis = c.b - c.a;
    let len = axis.norm();
    let d = if len > 0.0 { axis / len } else { Vec3::z() };
    let (e1, e2) = orthonormal_pair(&d);
    let side = 2.0 * std::f64::consts::PI * c.radius * len;
    let caps = 4.0 * std::f64::consts::PI * c.radius * c.radius;
    let n = ((side + caps) * density).round() as usize;
    for _ in 0..n {
        if rng.random::<f64>() * (side + caps) < side {
            let t = rng.random::<f64>() * len;
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            out.push(c.a + d * t + (e1 * phi.cos() + e2 * phi.sin()) * c.radius);
        } else {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let s = (1.0 - z * z).sqrt();
            let dir = d * z + (e1 * phi.cos() + e2 * phi.sin()) * s;
            let end = if z < 0.0 { c.a } else { c.b };
            out.push(end + dir * c.radius);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub seed: u64,
    pub pose: Vec<f64>,
    pub translation_mm: [f64; 3],
    /// Axis-angle perturbation applied to every virtual camera about the
    /// hand center; zero unless augmented.
    pub view_jitter: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub depth: DepthImage,
    pub gt: HandPose,
    pub centroid_mm: Vec3,
    pub meta: FrameMeta,
}

pub fn default_camera() -> Intrinsics {
    Intrinsics {
        fx: 288.0,
        fy: 288.0,
        cx: 159.5,
        cy: 119.5,
        width: 320,
        height: 240,
    }
}

fn f32_round(v: &Vec3) -> Vec3 {
    v.map(|x| x as f32 as f64)
}

fn identity_view() -> VirtualView {
    VirtualView {
        id: 0,
        zenith: 0.0,
        azimuth: 0.0,
        to_original: RigidTransform::identity(),
        from_original: RigidTransform::identity(),
    }
}

/// Renders an original-frame cloud from the original camera, quantized to
/// whole millimeters.
fn render_original(cloud: &PointCloud, camera: &Intrinsics, splat_radius: u32) -> Result<DepthImage> {
    let cfg = RenderConfig {
        splat_radius,
        ..RenderConfig::for_intrinsics(camera)
    };
    let mut img = render_depth(cloud, &identity_view(), camera, &cfg)?;
    img.frame_id = FrameId::Original;
    for v in &mut img.values {
        *v = v.round();
    }
    Ok(img)
}

/// Centroid of the depth's point cloud at storage precision.
fn depth_centroid(depth: &DepthImage) -> Result<Vec3> {
    Ok(f32_round(&centroid(&unproject(depth)?)?))
}

pub fn generate_frame(spec: &SynthHandSpec, angles: &[f64], camera: &Intrinsics, seed: u64) -> Result<Frame> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = spec.translation_jitter_mm;
    let t = Vec3::new(
        spec.origin_mm[0] + rng.random_range(-1.0..=1.0) * j[0],
        spec.origin_mm[1] + rng.random_range(-1.0..=1.0) * j[1],
        spec.origin_mm[2] + rng.random_range(-1.0..=1.0) * j[2],
    );
    frame_at(spec, angles, &t, camera, seed, &mut rng)
}

fn frame_at(spec: &SynthHandSpec, angles: &[f64], t: &Vec3, camera: &Intrinsics, seed: u64, rng: &mut ChaCha8Rng) -> Result<Frame> {
    let (joints, caps) = forward_kinematics(spec, angles, t)?;
    let mut points = Vec::new();
    for c in &caps {
        sample_capsule(c, spec.density_per_mm2, rng, &mut points);
    }
    let cloud = PointCloud {
        points,
        frame_id: FrameId::Original,
    };
    let depth = render_original(&cloud, camera, spec.splat_radius)?;
    let centroid_mm = depth_centroid(&depth)?;
    Ok(Frame {
        depth,
        gt: HandPose {
            joints: joints.iter().map(f32_round).collect(),
            frame_id: FrameId::Original,
        },
        centroid_mm,
        meta: FrameMeta {
            seed,
            pose: angles.to_vec(),
            translation_mm: [t.x, t.y, t.z],
            view_jitter: [0.0; 3],
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PoseSampler {
    /// Every angle independently uniform over its limits.
    Uniform,
    /// The same angles for every frame.
    Fixed(Vec<f64>),
}

impl PoseSampler {
    pub fn sample<R: Rng>(&self, spec: &SynthHandSpec, rng: &mut R) -> Vec<f64> {
        match self {
            PoseSampler::Uniform => spec
                .angle_limits()
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect(),
            PoseSampler::Fixed(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub joints: usize,
    pub intrinsics: Intrinsics,
    pub frame_count: usize,
    pub spec_hash: String,
    pub pose_dof: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub frames: Vec<Frame>,
}

/// Seed of frame `index` in a dataset generated from `seed`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

pub fn generate_dataset(
    spec: &SynthHandSpec,
    n_frames: usize,
    sampler: &PoseSampler,
    camera: &Intrinsics,
    seed: u64,
    threads: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if n_frames == 0 {
        return Err(Error::Invalid("dataset needs at least one frame".into()));
    }
    let frames = ordered_map(n_frames, threads, |i| {
        let fs = frame_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(fs, 0x5eed));
        let angles = sampler.sample(spec, &mut rng);
        generate_frame(spec, &angles, camera, fs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format: "virtview-dataset".into(),
            version: DATASET_VERSION,
            joints: NUM_JOINTS,
            intrinsics: *camera,
            frame_count: n_frames,
            spec_hash: spec.hash(),
            pose_dof: spec.angle_limits().len(),
        },
        frames,
    })
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let intr = &self.header.intrinsics;
        for f in &self.frames {
            if f.depth.width != intr.width || f.depth.height != intr.height || f.gt.len() != self.header.joints {
                return Err(Error::Format("frame does not match the dataset header".into()));
            }
            if f.meta.pose.len() != self.header.pose_dof {
                return Err(Error::Format("pose length does not match the dataset header".into()));
            }
            for &d in &f.depth.values {
                if d.fract() != 0.0 || !(0.0..=u16::MAX as f32).contains(&d) {
                    return Err(Error::Format(format!("depth {d} is not a whole u16 millimeter value")));
                }
                out.extend_from_slice(&(d as u16).to_le_bytes());
            }
            for j in &f.gt.joints {
                for c in j.iter() {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
            for c in f.centroid_mm.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
            out.extend_from_slice(&f.meta.seed.to_le_bytes());
            for v in f.meta.pose.iter().chain(&f.meta.translation_mm).chain(&f.meta.view_jitter) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        if r.len() < len {
            return Err(Error::Format("truncated header".into()));
        }
        let header: DatasetHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if header.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
        }
        header.intrinsics.validate()?;
        let (w, h) = (header.intrinsics.width, header.intrinsics.height);
        let mut frames = Vec::with_capacity(header.frame_count);
        for _ in 0..header.frame_count {
            let mut values = Vec::with_capacity(w * h);
            for _ in 0..w * h {
                values.push(u16::from_le_bytes(take(&mut r)?) as f32);
            }
            let vec3 = |r: &mut &[u8]| -> Result<Vec3> {
                Ok(Vec3::new(
                    f32::from_le_bytes(take(r)?) as f64,
                    f32::from_le_bytes(take(r)?) as f64,
                    f32::from_le_bytes(take(r)?) as f64,
                ))
            };
            let joints = (0..header.joints).map(|_| vec3(&mut r)).collect::<Result<Vec<_>>>()?;
            let centroid_mm = vec3(&mut r)?;
            let seed = u64::from_le_bytes(take(&mut r)?);
            let mut f64s = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| Ok(f64::from_le_bytes(take(&mut r)?))).collect() };
            let pose = f64s(header.pose_dof)?;
            let t = f64s(3)?;
            let jit = f64s(3)?;
            frames.push(Frame {
                depth: DepthImage::new(values, header.intrinsics, FrameId::Original, DEFAULT_MAX_RANGE_MM)
                    .map_err(|e| Error::Format(e.to_string()))?,
                gt: HandPose {
                    joints,
                    frame_id: FrameId::Original,
                },
                centroid_mm,
                meta: FrameMeta {
                    seed,
                    pose,
                    translation_mm: [t[0], t[1], t[2]],
                    view_jitter: [jit[0], jit[1], jit[2]],
                },
            });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, frames })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format("unexpected end of dataset file".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub centroid_jitter_mm: f64,
    pub camera_rotation_jitter_rad: f64,
    pub seed: u64,
    pub splat_radius: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            centroid_jitter_mm: 10.0,
            camera_rotation_jitter_rad: 0.1,
            seed: 0,
            splat_radius: 1,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves frames untouched.
    pub fn none() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            centroid_jitter_mm: 0.0,
            camera_rotation_jitter_rad: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) || self.centroid_jitter_mm < 0.0 || self.camera_rotation_jitter_rad < 0.0 {
            return Err(Error::Invalid("augmentation ranges must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Scales the hand about its centroid and re-renders, jitters the crop
/// center, and draws a virtual-camera rotation jitter. Labels follow every
/// geometric change exactly.
pub fn augment(frame: &Frame, cfg: &AugmentConfig) -> Result<Frame> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, frame.meta.seed));
    let mut out = frame.clone();
    let (lo, hi) = cfg.scale_range;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if s != 1.0 {
        let c = frame.centroid_mm;
        let cloud = unproject(&frame.depth)?;
        let scaled = PointCloud {
            points: cloud.points.iter().map(|p| c + (p - c) * s).collect(),
            frame_id: FrameId::Original,
        };
        out.depth = render_original(&scaled, &frame.depth.intrinsics, cfg.splat_radius)?;
        out.gt.joints = frame.gt.joints.iter().map(|j| f32_round(&(c + (j - c) * s))).collect();
        out.centroid_mm = depth_centroid(&out.depth)?;
    }
    if cfg.centroid_jitter_mm > 0.0 {
        let j = cfg.centroid_jitter_mm;
        let shift = Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j));
        out.centroid_mm = f32_round(&(out.centroid_mm + shift));
    }
    if cfg.camera_rotation_jitter_rad > 0.0 {
        let r = cfg.camera_rotation_jitter_rad;
        out.meta.view_jitter = [rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r)];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn zero_pose(spec: &SynthHandSpec) -> Vec<f64> {
        spec.angle_limits().iter().map(|&(lo, hi)| 0.0f64.clamp(lo, hi)).collect()
    }

    #[test]
    fn zero_pose_matches_closed_form() {
        let spec = SynthHandSpec::default();
        let t = Vec3::new(5.0, -3.0, 400.0);
        let (joints, _) = forward_kinematics(&spec, &zero_pose(&spec), &t).unwrap();
        for (fi, f) in spec.fingers.iter().enumerate() {
            let (s, c) = f.rest_angle.sin_cos();
            let dir = Vec3::new(s, -c, 0.0);
            let k = Vec3::from(f.knuckle_mm) + t;
            let mid = k + dir * f.lengths_mm[0];
            let tip = mid + dir * f.lengths_mm[1];
            let (mi, ti) = if fi == 0 { (4, 5) } else { (4 + 2 * fi, 5 + 2 * fi) };
            assert!((joints[mi] - mid).amax() < 1e-9, "{}", f.name);
            assert!((joints[ti] - tip).amax() < 1e-9, "{}", f.name);
        }
        assert!((joints[3] - (Vec3::from(spec.fingers[0].knuckle_mm) + t)).amax() < 1e-12);
        assert!((joints[1] - (Vec3::from(spec.wrist_mm[0]) + t)).amax() < 1e-12);
    }

    #[test]
    fn flexion_curls_toward_camera() {
        let spec = SynthHandSpec::default();
        let mut a = zero_pose(&spec);
        a[3 + 3 + 1] = 1.0; // index proximal flexion
        let t = Vec3::new(0.0, 0.0, 400.0);
        let (j, _) = forward_kinematics(&spec, &a, &t).unwrap();
        let f = &spec.fingers[1];
        let knuckle_z = 400.0 + f.knuckle_mm[2];
        assert!((j[6].z - (knuckle_z - f.lengths_mm[0] * 1.0f64.sin())).abs() < 1e-9);
    }

    #[test]
    fn angles_out_of_range_are_rejected() {
        let spec = SynthHandSpec::default();
        let mut a = zero_pose(&spec);
        a[5] = 3.0;
        match generate_frame(&spec, &a, &default_camera(), 1) {
            Err(Error::AnglesOutOfRange { index: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frames_are_deterministic_and_valid() {
        let spec = SynthHandSpec::default();
        let cam = default_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..6 {
            let a = PoseSampler::Uniform.sample(&spec, &mut rng);
            let f = generate_frame(&spec, &a, &cam, seed).unwrap();
            assert_eq!(f, generate_frame(&spec, &a, &cam, seed).unwrap());
            assert!(f.depth.valid_count() >= 500, "{}", f.depth.valid_count());
            let c = centroid(&unproject(&f.depth).unwrap()).unwrap();
            assert!((c - f.centroid_mm).amax() < 1e-3);
            let cloud = PointCloud {
                points: f.gt.joints.clone(),
                frame_id: FrameId::Original,
            };
            for (k, (u, v, z)) in project(&cloud, &cam).unwrap().into_iter().enumerate() {
                assert!(u >= 0.0 && v >= 0.0 && u <= 319.0 && v <= 239.0);
                let d = f.depth.get(u.round() as usize, v.round() as usize) as f64;
                // joints sit inside the surface: visible skin is never more than a radius behind
                let radius = 11.0;
                if d > 0.0 {
                    assert!(z >= d - radius - 1.0, "joint {k}: z {z} surface {d}");
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let spec = SynthHandSpec::default();
        let cam = default_camera();
        let a = generate_dataset(&spec, 5, &PoseSampler::Uniform, &cam, 11, 2).unwrap();
        let b = generate_dataset(&spec, 5, &PoseSampler::Uniform, &cam, 11, 1).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap());
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
        assert_eq!(a.header.spec_hash.len(), 64);
    }

    #[test]
    fn uniform_sampler_covers_limits() {
        let spec = SynthHandSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let limits = spec.angle_limits();
        let bins = 20;
        let mut hist = vec![vec![0usize; bins]; limits.len()];
        for _ in 0..10_000 {
            let a = PoseSampler::Uniform.sample(&spec, &mut rng);
            check_angles(&spec, &a).unwrap();
            for (i, (&v, &(lo, hi))) in a.iter().zip(&limits).enumerate() {
                let b = (((v - lo) / (hi - lo)) * bins as f64).min(bins as f64 - 1.0) as usize;
                hist[i][b] += 1;
            }
        }
        for h in hist {
            let covered = h.iter().filter(|&&c| c > 0).count();
            assert!(covered * 10 >= bins * 9);
        }
    }

    #[test]
    fn augmentation() {
        let spec = SynthHandSpec::default();
        let f = generate_frame(&spec, &zero_pose(&spec), &default_camera(), 3).unwrap();
        assert_eq!(augment(&f, &AugmentConfig::none()).unwrap(), f);
        let cfg = AugmentConfig {
            seed: 8,
            ..AugmentConfig::default()
        };
        let a = augment(&f, &cfg).unwrap();
        assert_eq!(a, augment(&f, &cfg).unwrap());
        let scaled = augment(
            &f,
            &AugmentConfig {
                scale_range: (1.08, 1.08),
                ..AugmentConfig::none()
            },
        )
        .unwrap();
        let c = f.centroid_mm;
        for (j0, j1) in f.gt.joints.iter().zip(&scaled.gt.joints) {
            // labels are stored at f32 precision
            assert!(((j1.z - c.z) - 1.08 * (j0.z - c.z)).abs() < 1e-4);
        }
        assert!(scaled.depth.valid_count() > f.depth.valid_count());
        assert!(a.meta.view_jitter.iter().all(|v| v.abs() <= 0.1));
        assert!((a.centroid_mm - f.centroid_mm).amax() <= 10.0 + 15.0);
    }
}
