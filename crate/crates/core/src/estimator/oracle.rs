//! Ground-truth perturbation estimator for controlled experiments.
//!
//! Each joint is moved into the view frame and receives isotropic Gaussian
//! noise whose standard deviation grows with how hidden the joint is in the
//! rendered view: `sigma = base + gain * occ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EstimatorOutput, ViewEstimator, ViewInput};
use crate::error::{Error, Result};
use crate::geometry::{transform_pose, DepthImage, HandPose, Vec3, VirtualView};
use crate::nn::FeatureMap;
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoiseModel {
    pub base_sigma_mm: f64,
    pub occlusion_gain_mm: f64,
    pub rng_seed: u64,
}

impl Default for OracleNoiseModel {
    fn default() -> Self {
        Self {
            base_sigma_mm: 2.0,
            occlusion_gain_mm: 8.0,
            rng_seed: 0,
        }
    }
}

impl OracleNoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_sigma_mm >= 0.0 && self.occlusion_gain_mm >= 0.0) {
            return Err(Error::Invalid(format!(
                "oracle sigmas must be non-negative, got base {} gain {}",
                self.base_sigma_mm, self.occlusion_gain_mm
            )));
        }
        Ok(())
    }
}

pub const ORACLE_FEATURE_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleEstimator {
    pub noise: OracleNoiseModel,
    /// Surface this far in front of a joint still counts as its own skin.
    pub margin_mm: f64,
    /// Half-size of the pixel window probed around each joint.
    pub window: usize,
    /// Side of the summary feature grid.
    pub grid: usize,
}

impl Default for OracleEstimator {
    fn default() -> Self {
        Self {
            noise: OracleNoiseModel::default(),
            margin_mm: 15.0,
            window: 2,
            grid: 8,
        }
    }
}

/// Fraction of the window around `joint` (view frame) where the rendered
/// surface hides it. Holes and off-image pixels give no evidence of the joint
/// and count as hiding it.
pub fn joint_occlusion(joint: &Vec3, rendered: &DepthImage, window: usize, margin_mm: f64) -> f64 {
    if joint.z <= 0.0 {
        return 1.0;
    }
    let (u, v) = rendered.intrinsics.project_point(joint);
    let (u, v) = (u.round() as i64, v.round() as i64);
    let r = window as i64;
    let mut visible = 0usize;
    for y in v - r..=v + r {
        for x in u - r..=u + r {
            if x < 0 || y < 0 || x >= rendered.width as i64 || y >= rendered.height as i64 {
                continue;
            }
            let d = rendered.get(x as usize, y as usize) as f64;
            if d > 0.0 && d >= joint.z - margin_mm {
                visible += 1;
            }
        }
    }
    let total = (2 * window + 1) * (2 * window + 1);
    1.0 - visible as f64 / total as f64
}

impl OracleEstimator {
    pub fn new(noise: OracleNoiseModel) -> Self {
        Self {
            noise,
            ..Self::default()
        }
    }

    /// Per-joint occlusion of `gt_view` in `rendered`.
    pub fn occlusions(&self, gt_view: &HandPose, rendered: &DepthImage) -> Vec<f64> {
        gt_view
            .joints
            .iter()
            .map(|j| joint_occlusion(j, rendered, self.window, self.margin_mm))
            .collect()
    }

    /// Noisy pose in the view frame and its per-joint occlusion.
    pub fn sample(&self, gt_original: &HandPose, view: &VirtualView, rendered: &DepthImage, sample_seed: u64) -> (HandPose, Vec<f64>) {
        let mut pose = transform_pose(gt_original, &view.from_original, view.frame_id());
        let occ = self.occlusions(&pose, rendered);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.noise.rng_seed, sample_seed), view.id as u64));
        for (j, o) in pose.joints.iter_mut().zip(&occ) {
            let sigma = self.noise.base_sigma_mm + self.noise.occlusion_gain_mm * o;
            let n: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            *j += Vec3::new(n[0], n[1], n[2]) * sigma;
        }
        (pose, occ)
    }

    /// Summary map: view angles, joint occlusion painted at joint cells,
    /// surface coverage per cell and mean occlusion.
    pub fn feature(&self, view: &VirtualView, rendered: &DepthImage, center_view: &Vec3, cube_mm: f64, gt_view: &HandPose, occ: &[f64]) -> FeatureMap {
        let g = self.grid;
        let mut f = FeatureMap::zeros(ORACLE_FEATURE_CHANNELS, g, g);
        let mean_occ = occ.iter().sum::<f64>() / occ.len().max(1) as f64;
        for y in 0..g {
            for x in 0..g {
                *f.at_mut(0, y, x) = view.zenith;
                *f.at_mut(1, y, x) = view.azimuth;
                *f.at_mut(4, y, x) = mean_occ;
            }
        }
        let intr = &rendered.intrinsics;
        let (uc, vc) = intr.project_point(center_view);
        let half_px = cube_mm * intr.fx / center_view.z.max(1e-6);
        let cell_of = |u: f64, v: f64| -> Option<(usize, usize)> {
            let cx = ((u - uc + half_px) / (2.0 * half_px) * g as f64).floor();
            let cy = ((v - vc + half_px) / (2.0 * half_px) * g as f64).floor();
            (cx >= 0.0 && cy >= 0.0 && cx < g as f64 && cy < g as f64).then_some((cy as usize, cx as usize))
        };
        for (j, &o) in gt_view.joints.iter().zip(occ) {
            let (u, v) = intr.project_point(j);
            if let Some((cy, cx)) = cell_of(u, v) {
                let cell = f.at_mut(2, cy, cx);
                *cell = cell.max(o);
            }
        }
        // coverage: share of valid pixels among those sampled in each cell
        let mut hits = vec![0usize; g * g];
        let mut seen = vec![0usize; g * g];
        let lo_u = (uc - half_px).floor().max(0.0) as usize;
        let hi_u = ((uc + half_px).ceil().max(0.0) as usize).min(rendered.width);
        let lo_v = (vc - half_px).floor().max(0.0) as usize;
        let hi_v = ((vc + half_px).ceil().max(0.0) as usize).min(rendered.height);
        for py in lo_v..hi_v {
            for px in lo_u..hi_u {
                if let Some((cy, cx)) = cell_of(px as f64, py as f64) {
                    seen[cy * g + cx] += 1;
                    if rendered.get(px, py) > 0.0 {
                        hits[cy * g + cx] += 1;
                    }
                }
            }
        }
        for c in 0..g * g {
            if seen[c] > 0 {
                f.data[3 * g * g + c] = hits[c] as f64 / seen[c] as f64;
            }
        }
        f
    }
}

/// Oracle estimate for one rendered view.
pub fn oracle_estimate(
    oracle: &OracleEstimator,
    gt_original: &HandPose,
    view: &VirtualView,
    rendered: &DepthImage,
    center_view: &Vec3,
    cube_mm: f64,
    sample_seed: u64,
) -> EstimatorOutput {
    let (pose, occ) = oracle.sample(gt_original, view, rendered, sample_seed);
    let gt_view = transform_pose(gt_original, &view.from_original, view.frame_id());
    let feature = oracle.feature(view, rendered, center_view, cube_mm, &gt_view, &occ);
    EstimatorOutput {
        pose,
        feature,
        per_anchor: None,
    }
}

impl ViewEstimator for OracleEstimator {
    fn feature_shape(&self) -> [usize; 3] {
        [ORACLE_FEATURE_CHANNELS, self.grid, self.grid]
    }

    fn estimate_view(&self, input: &ViewInput<'_>) -> Result<EstimatorOutput> {
        let gt = input
            .gt_original
            .ok_or_else(|| Error::Invalid("oracle estimator needs ground truth".into()))?;
        Ok(oracle_estimate(
            self,
            gt,
            input.view,
            input.rendered,
            &input.crop.center_mm,
            input.crop.cube_mm,
            input.sample_seed,
        ))
    }
}
