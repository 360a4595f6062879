//! Z-buffer point splatting into virtual views, and metric hand crops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    check_frame, DepthImage, FrameId, Intrinsics, PointCloud, Vec3, VirtualView, VirtualViewSet,
    DEFAULT_MAX_RANGE_MM,
};
use crate::parallel::ordered_map;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub out_width: usize,
    pub out_height: usize,
    /// Chebyshev radius of the square splat, in pixels.
    pub splat_radius: u32,
    pub max_range_mm: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            out_width: 320,
            out_height: 240,
            splat_radius: 1,
            max_range_mm: DEFAULT_MAX_RANGE_MM,
        }
    }
}

impl RenderConfig {
    pub fn for_intrinsics(intr: &Intrinsics) -> Self {
        Self {
            out_width: intr.width,
            out_height: intr.height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_width == 0 || self.out_height == 0 {
            return Err(Error::Invalid("render output dimensions must be positive".into()));
        }
        if self.splat_radius > 3 {
            return Err(Error::Invalid(format!("splat radius {} exceeds 3", self.splat_radius)));
        }
        if !(self.max_range_mm > 0.0) {
            return Err(Error::Invalid("max range must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub crop_size: usize,
    /// Half-extent of the metric crop cube.
    pub cube_mm: f64,
    pub normalize: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            crop_size: 176,
            cube_mm: 150.0,
            normalize: true,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !(self.cube_mm > 0.0) {
            return Err(Error::Invalid("crop size and cube must be positive".into()));
        }
        Ok(())
    }
}

/// Square hand crop. `depth.intrinsics` is the pinhole model of the crop
/// itself, so crop pixels unproject directly into the source camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandCrop {
    pub depth: DepthImage,
    pub center_mm: Vec3,
    pub cube_mm: f64,
    pub normalized: bool,
}

impl HandCrop {
    /// Metric depth for a normalized value.
    pub fn denormalize(&self, value: f64) -> f64 {
        self.center_mm.z + self.cube_mm * value
    }
}

/// Renders `cloud` (original frame) at `view`. Holes are left at zero.
pub fn render_depth(
    cloud: &PointCloud,
    view: &VirtualView,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<DepthImage> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    check_frame(FrameId::Original, cloud.frame_id)?;
    cfg.validate()?;
    if intr.width != cfg.out_width || intr.height != cfg.out_height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", cfg.out_width, cfg.out_height),
            got: format!("{}x{}", intr.width, intr.height),
        });
    }
    let (w, h) = (cfg.out_width as i64, cfg.out_height as i64);
    let r = cfg.splat_radius as i64;
    let max_z = cfg.max_range_mm as f64;
    let mut zbuf = vec![f32::INFINITY; cfg.out_width * cfg.out_height];
    let rot = view.from_original.rotation;
    let trans = view.from_original.translation;
    for p in &cloud.points {
        let q = rot * p + trans;
        if !(q.z > 0.0 && q.z < max_z) {
            continue;
        }
        let (u, v) = intr.project_point(&q);
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (iu, iv) = (u.round(), v.round());
        if iu < (-r) as f64 || iv < (-r) as f64 || iu > (w - 1 + r) as f64 || iv > (h - 1 + r) as f64 {
            continue;
        }
        let (iu, iv) = (iu as i64, iv as i64);
        let z = q.z as f32;
        for y in (iv - r).max(0)..=(iv + r).min(h - 1) {
            let row = (y * w) as usize;
            for x in (iu - r).max(0)..=(iu + r).min(w - 1) {
                let cell = &mut zbuf[row + x as usize];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
    for d in &mut zbuf {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    Ok(DepthImage {
        width: cfg.out_width,
        height: cfg.out_height,
        values: zbuf,
        intrinsics: *intr,
        frame_id: view.frame_id(),
    })
}

/// Renders every view of `views`, ordered by view id. Output is identical
/// for any thread count.
pub fn render_all(
    cloud: &PointCloud,
    views: &VirtualViewSet,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    threads: usize,
) -> Result<Vec<DepthImage>> {
    if threads == 0 {
        return Err(Error::Invalid("thread count must be at least 1".into()));
    }
    ordered_map(views.len(), threads, |i| render_depth(cloud, &views.views[i], intr, cfg))
        .into_iter()
        .collect()
}

/// Crops the metric cube of half-extent `cube_mm` around `center_mm` and
/// resamples it to `crop_size²` by nearest neighbor.
pub fn crop_hand(depth: &DepthImage, center_mm: &Vec3, cfg: &CropConfig) -> Result<HandCrop> {
    if !(center_mm.z > 0.0) {
        return Err(Error::CenterBehindCamera(center_mm.z));
    }
    cfg.validate()?;
    let intr = &depth.intrinsics;
    let s = cfg.crop_size;
    let (uc, vc) = intr.project_point(center_mm);
    // crop pixels per source pixel along each axis
    let scale_u = s as f64 * center_mm.z / (2.0 * cfg.cube_mm * intr.fx);
    let scale_v = s as f64 * center_mm.z / (2.0 * cfg.cube_mm * intr.fy);
    let mid = (s as f64 - 1.0) / 2.0;
    let crop_intr = Intrinsics {
        fx: intr.fx * scale_u,
        fy: intr.fy * scale_v,
        cx: (intr.cx - uc) * scale_u + mid,
        cy: (intr.cy - vc) * scale_v + mid,
        width: s,
        height: s,
    };
    let (zc, cube) = (center_mm.z, cfg.cube_mm);
    let mut values = Vec::with_capacity(s * s);
    for i in 0..s {
        let sv = (vc + (i as f64 - mid) / scale_v).round();
        for j in 0..s {
            let su = (uc + (j as f64 - mid) / scale_u).round();
            let d = if su >= 0.0 && sv >= 0.0 && (su as usize) < depth.width && (sv as usize) < depth.height {
                depth.get(su as usize, sv as usize)
            } else {
                0.0
            };
            let out = if !cfg.normalize {
                d
            } else if d > 0.0 {
                ((d as f64 - zc) / cube).clamp(-1.0, 1.0) as f32
            } else {
                1.0
            };
            values.push(out);
        }
    }
    Ok(HandCrop {
        depth: DepthImage {
            width: s,
            height: s,
            values,
            intrinsics: crop_intr,
            frame_id: depth.frame_id,
        },
        center_mm: *center_mm,
        cube_mm: cfg.cube_mm,
        normalized: cfg.normalize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_view, sample_virtual_views, unproject, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_3;

    fn intr() -> Intrinsics {
        Intrinsics::new(200.0, 200.0, 80.0, 60.0, 160, 120).unwrap()
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

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud {
            points,
            frame_id: FrameId::Original,
        }
    }

    fn cfg(r: u32) -> RenderConfig {
        RenderConfig {
            splat_radius: r,
            ..RenderConfig::for_intrinsics(&intr())
        }
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0), rng.random_range(300.0..500.0)))
                .collect(),
        )
    }

    #[test]
    fn single_splat_on_axis() {
        let img = render_depth(&cloud(vec![Vec3::new(0.0, 0.0, 400.0)]), &identity_view(), &intr(), &cfg(0)).unwrap();
        assert_eq!(img.valid_count(), 1);
        assert_eq!(img.get(80, 60), 400.0);
    }

    #[test]
    fn splat_radius_covers_square() {
        let img = render_depth(&cloud(vec![Vec3::new(0.0, 0.0, 400.0)]), &identity_view(), &intr(), &cfg(2)).unwrap();
        assert_eq!(img.valid_count(), 25);
    }

    #[test]
    fn nearest_depth_wins() {
        let pts = vec![Vec3::new(0.0, 0.0, 500.0), Vec3::new(0.0, 0.0, 300.0)];
        let img = render_depth(&cloud(pts.clone()), &identity_view(), &intr(), &cfg(0)).unwrap();
        assert_eq!(img.get(80, 60), 300.0);
        let rev: Vec<_> = pts.into_iter().rev().collect();
        let img2 = render_depth(&cloud(rev), &identity_view(), &intr(), &cfg(0)).unwrap();
        assert_eq!(img, img2);
    }

    #[test]
    fn behind_and_outside_are_skipped() {
        let pts = vec![Vec3::new(0.0, 0.0, -400.0), Vec3::new(5000.0, 0.0, 400.0), Vec3::new(0.0, 0.0, 2500.0)];
        let img = render_depth(&cloud(pts), &identity_view(), &intr(), &cfg(1)).unwrap();
        assert_eq!(img.valid_count(), 0);
        assert!(matches!(
            render_depth(&cloud(vec![]), &identity_view(), &intr(), &cfg(1)),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn identity_view_round_trip() {
        let i = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f32> = (0..i.width * i.height)
            .map(|_| if rng.random_bool(0.6) { rng.random_range(300.0f32..600.0).round() } else { 0.0 })
            .collect();
        let d = DepthImage::new(values, i, FrameId::Original, DEFAULT_MAX_RANGE_MM).unwrap();
        let c = unproject(&d).unwrap();
        let center = crate::geometry::centroid(&c).unwrap();
        let set = sample_virtual_views(center, center.norm(), 5, 5, (-FRAC_PI_3, FRAC_PI_3), (-FRAC_PI_3, FRAC_PI_3)).unwrap();
        let view = &set.views[set.center_id().unwrap()];
        let r = render_depth(&c, view, &i, &cfg(0)).unwrap();
        for (a, b) in d.values.iter().zip(&r.values) {
            if *a > 0.0 {
                assert!((a - b).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn render_all_thread_invariance() {
        let c = random_cloud(9, 3000);
        let set = sample_virtual_views(Vec3::new(0.0, 0.0, 400.0), 400.0, 5, 5, (-FRAC_PI_3, FRAC_PI_3), (-FRAC_PI_3, FRAC_PI_3)).unwrap();
        let one = render_all(&c, &set, &intr(), &cfg(1), 1).unwrap();
        let eight = render_all(&c, &set, &intr(), &cfg(1), 8).unwrap();
        assert_eq!(one.len(), 25);
        assert_eq!(one, eight);
        for (i, img) in one.iter().enumerate() {
            assert_eq!(img.frame_id, FrameId::View(i));
        }
        assert!(render_all(&c, &set, &intr(), &cfg(1), 0).is_err());
    }

    #[test]
    fn crop_midpoint_and_containment() {
        let i = intr();
        let center = Vec3::new(0.0, 0.0, 400.0);
        // fronto-parallel slab at the center depth plus a ramp inside the cube
        let mut values = vec![0.0f32; i.width * i.height];
        for v in 40..80 {
            for u in 60..100 {
                values[v * i.width + u] = 400.0 + (u as f32 - 80.0);
            }
        }
        let d = DepthImage::new(values, i, FrameId::Original, DEFAULT_MAX_RANGE_MM).unwrap();
        let crop = crop_hand(&d, &center, &CropConfig { crop_size: 64, cube_mm: 150.0, normalize: true }).unwrap();
        assert_eq!(crop.depth.values.len(), 64 * 64);
        let mid = 32 * 64 + 32;
        assert!(crop.depth.values[mid].abs() < 20.0 / 150.0);
        // no valid pixel hits the clamp
        assert!(crop.depth.values.iter().all(|&x| x == 1.0 || x.abs() < 1.0));
        // holes map to +1
        assert_eq!(crop.depth.values[0], 1.0);

        let mut values = vec![0.0f32; i.width * i.height];
        values[60 * i.width + 80] = 400.0;
        let d = DepthImage::new(values, i, FrameId::Original, DEFAULT_MAX_RANGE_MM).unwrap();
        let crop = crop_hand(&d, &center, &CropConfig { crop_size: 176, cube_mm: 150.0, normalize: true }).unwrap();
        let (cu, cv) = crop.depth.intrinsics.project_point(&center);
        let px = crop.depth.values[cv.round() as usize * 176 + cu.round() as usize];
        assert_eq!(px, 0.0);
    }

    #[test]
    fn crop_clamps_far_values_and_keeps_mm_when_raw() {
        let i = intr();
        let d = DepthImage::new(vec![900.0; i.width * i.height], i, FrameId::Original, DEFAULT_MAX_RANGE_MM).unwrap();
        let c = Vec3::new(0.0, 0.0, 400.0);
        let crop = crop_hand(&d, &c, &CropConfig::default()).unwrap();
        assert!(crop.depth.values.iter().all(|&x| x == 1.0));
        let raw = crop_hand(&d, &c, &CropConfig { normalize: false, ..CropConfig::default() }).unwrap();
        assert!(raw.depth.values.iter().all(|&x| x == 900.0 || x == 0.0));
        assert!(matches!(crop_hand(&d, &Vec3::new(0.0, 0.0, -1.0), &CropConfig::default()), Err(Error::CenterBehindCamera(_))));
    }

    #[test]
    fn crop_intrinsics_map_source_points() {
        let i = intr();
        let d = DepthImage::zeros(i, FrameId::Original);
        let c = Vec3::new(15.0, -10.0, 420.0);
        let crop = crop_hand(&d, &c, &CropConfig::default()).unwrap();
        let ci = crop.depth.intrinsics;
        let (u, v) = ci.project_point(&c);
        assert!((u - 87.5).abs() < 1e-9 && (v - 87.5).abs() < 1e-9);
        // a point on the cube's edge at the center depth lands on the crop border
        let edge = c + Vec3::new(150.0, 0.0, 0.0);
        let (ue, _) = ci.project_point(&edge);
        assert!((ue - 175.5).abs() < 1e-9);
    }

    #[test]
    fn rotated_view_renders_inside_bounds() {
        let c = random_cloud(1, 2000);
        let v = make_view(3, 1.2, -1.4, &Vec3::new(0.0, 0.0, 400.0), 400.0);
        let img = render_depth(&c, &v, &intr(), &cfg(3)).unwrap();
        assert_eq!(img.values.len(), 160 * 120);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn permutation_invariance(seed in 0u64..1000, zen in -1.0f64..1.0, azi in -1.0f64..1.0) {
                let c = random_cloud(seed, 400);
                let v = make_view(0, zen, azi, &Vec3::new(0.0, 0.0, 400.0), 400.0);
                let a = render_depth(&c, &v, &intr(), &cfg(1)).unwrap();
                let mut pts = c.points.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                for i in (1..pts.len()).rev() {
                    pts.swap(i, rng.random_range(0..=i));
                }
                let b = render_depth(&cloud(pts), &v, &intr(), &cfg(1)).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn fuzz_never_out_of_bounds(
                pts in proptest::collection::vec((-1e5f64..1e5, -1e5f64..1e5, -1e4f64..1e4), 1..200),
                r in 0u32..=3,
            ) {
                let c = cloud(pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect());
                let img = render_depth(&c, &identity_view(), &intr(), &cfg(r)).unwrap();
                prop_assert_eq!(img.values.len(), 160 * 120);
                prop_assert!(img.values.iter().all(|&d| d == 0.0 || (d > 0.0 && d < 2000.0)));
            }

            #[test]
            fn holes_stay_zero(seed in 0u64..1000) {
                let c = random_cloud(seed, 50);
                let img = render_depth(&c, &identity_view(), &intr(), &cfg(0)).unwrap();
                let touched: std::collections::HashSet<usize> = c.points.iter().filter_map(|p| {
                    let (u, v) = intr().project_point(p);
                    let (u, v) = (u.round(), v.round());
                    (u >= 0.0 && v >= 0.0 && u < 160.0 && v < 120.0).then(|| v as usize * 160 + u as usize)
                }).collect();
                for (i, &d) in img.values.iter().enumerate() {
                    if !touched.contains(&i) {
                        prop_assert_eq!(d, 0.0);
                    }
                }
            }
        }
    }
}
