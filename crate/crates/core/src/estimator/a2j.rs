//! Desk-scale anchor-to-joint regressor.
//!
//! A stack of stride-2 3x3 convolutions reduces the crop to one cell per
//! anchor. A 1x1 head emits, per anchor and joint, a voting logit, an
//! in-plane offset and a depth offset. Each joint is the softmax-weighted
//! vote of all anchors:
//!
//! ```text
//! p_ak = softmax_a(w_ak)
//! (u, v)_k = Σ_a p_ak (anchor_a + offset_ak)
//! z_k      = center_z + cube * Σ_a p_ak depth_ak
//! ```
//!
//! and is lifted to millimeters through the crop's pinhole model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnchorResponses, EstimatorOutput, ViewEstimator, ViewInput};
use crate::error::{check_finite, Error, Result};
use crate::geometry::{check_frame, HandPose, Vec3};
use crate::nn::{
    decayed_lr, relu_backward, relu_inplace, smooth_l1, smooth_l1_grad, softmax, softmax_backward,
    Adam, Conv2d, FeatureMap, Params, Tensor,
};
use crate::renderer::HandCrop;

/// Weight of the objective term against the anchor-surrounding term.
pub const DEFAULT_A2J_LAMBDA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub crop_size: usize,
    /// Output channels of each stride-2 backbone layer.
    pub channels: Vec<usize>,
    pub joints: usize,
    /// 1-based backbone layer whose activation is exported as the feature map.
    pub feature_tap: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            crop_size: 176,
            channels: vec![8, 16, 32, 32],
            joints: 14,
            feature_tap: 2,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.channels.is_empty() || self.joints == 0 {
            return Err(Error::Invalid("estimator config has an empty dimension".into()));
        }
        if self.feature_tap == 0 || self.feature_tap > self.channels.len() {
            return Err(Error::Invalid(format!(
                "feature tap {} outside 1..={}",
                self.feature_tap,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Anchor stride in crop pixels.
    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    fn spatial_after(&self, layers: usize) -> usize {
        (0..layers).fold(self.crop_size, |n, _| n.div_ceil(2))
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let n = self.spatial_after(self.feature_tap);
        [self.channels[self.feature_tap - 1], n, n]
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        AnchorGrid::new(self.crop_size, self.stride())
    }
}

/// Anchors on a uniform lattice, one per stride cell, at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub stride: usize,
    pub side: usize,
    pub anchors: Vec<[f64; 2]>,
}

impl AnchorGrid {
    pub fn new(crop_size: usize, stride: usize) -> Self {
        let side = crop_size.div_ceil(stride);
        let half = (stride as f64 - 1.0) / 2.0;
        let mut anchors = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                anchors.push([(j * stride) as f64 + half, (i * stride) as f64 + half]);
            }
        }
        Self {
            stride,
            side,
            anchors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub config: EstimatorConfig,
    pub seed: u64,
    pub backbone: Vec<Conv2d>,
    /// 1x1 convolution to `4K` channels: logits, du, dv, depth.
    pub head: Conv2d,
}

impl Params for EstimatorParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &c.weight));
            out.push((format!("backbone.{i}.bias"), &c.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.backbone {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Activations retained by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EstimatorCache {
    /// Input to each backbone layer, then the final activation.
    acts: Vec<FeatureMap>,
    head_out: FeatureMap,
    probs: Vec<Vec<f64>>,
    votes: Vec<[f64; 3]>,
    cube: f64,
}

/// Upstream gradients with respect to estimator outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    /// d/d pose, millimeters in the view frame.
    pub pose: Vec<Vec3>,
    /// d/d anchor barycenter (crop pixels).
    pub barycenter: Vec<[f64; 2]>,
    pub feature: Option<FeatureMap>,
}

impl OutputGrads {
    pub fn zeros(joints: usize) -> Self {
        Self {
            pose: vec![Vec3::zeros(); joints],
            barycenter: vec![[0.0; 2]; joints],
            feature: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A2jLoss {
    pub obj: f64,
    pub info: f64,
    pub total: f64,
}

impl A2jLoss {
    pub fn combine(obj: f64, info: f64, lambda: f64) -> Self {
        Self {
            obj,
            info,
            total: lambda * obj + info,
        }
    }
}

impl EstimatorParams {
    pub fn new(config: EstimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(config.channels.len());
        let mut in_c = 1;
        for &c in &config.channels {
            backbone.push(Conv2d::new(in_c, c, 3, 2, 1, &mut rng));
            in_c = c;
        }
        let mut head = Conv2d::new(in_c, 4 * config.joints, 1, 1, 0, &mut rng);
        for w in &mut head.weight.data {
            *w *= 0.1;
        }
        Ok(Self {
            config,
            seed,
            backbone,
            head,
        })
    }

    fn input_map(&self, crop: &HandCrop) -> Result<FeatureMap> {
        let s = self.config.crop_size;
        if crop.depth.width != s || crop.depth.height != s || !crop.normalized {
            return Err(Error::ShapeMismatch {
                expected: format!("normalized {s}x{s} crop"),
                got: format!(
                    "{}{}x{}",
                    if crop.normalized { "normalized " } else { "raw " },
                    crop.depth.width,
                    crop.depth.height
                ),
            });
        }
        Ok(FeatureMap {
            c: 1,
            h: s,
            w: s,
            data: crop.depth.values.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn forward(&self, crop: &HandCrop) -> Result<(EstimatorOutput, EstimatorCache)> {
        let mut x = self.input_map(crop)?;
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        for conv in &self.backbone {
            let mut y = conv.forward(&x);
            relu_inplace(&mut y.data);
            acts.push(std::mem::replace(&mut x, y));
        }
        let head_out = self.head.forward(&x);
        acts.push(x);
        let feature = acts[self.config.feature_tap].clone();

        let k_n = self.config.joints;
        let grid = self.config.anchor_grid();
        let a_n = grid.anchors.len();
        if head_out.h * head_out.w != a_n {
            return Err(Error::ShapeMismatch {
                expected: format!("{a_n} anchor cells"),
                got: format!("{}", head_out.h * head_out.w),
            });
        }
        let stride = grid.stride as f64;
        let plane = |c: usize| &head_out.data[c * a_n..(c + 1) * a_n];
        let mut logits = Vec::with_capacity(k_n * a_n);
        let mut offsets = Vec::with_capacity(k_n * a_n);
        let mut depth = Vec::with_capacity(k_n * a_n);
        let mut probs = Vec::with_capacity(k_n);
        let mut votes = Vec::with_capacity(k_n);
        let ci = crop.depth.intrinsics;
        let (cz, cube) = (crop.center_mm.z, crop.cube_mm);
        let mut joints = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let (w, du, dv, dz) = (plane(k), plane(k_n + k), plane(2 * k_n + k), plane(3 * k_n + k));
            let p = softmax(w);
            let (mut u, mut v, mut dn) = (0.0, 0.0, 0.0);
            for a in 0..a_n {
                let off = [stride * du[a], stride * dv[a]];
                u += p[a] * (grid.anchors[a][0] + off[0]);
                v += p[a] * (grid.anchors[a][1] + off[1]);
                dn += p[a] * dz[a];
                offsets.push(off);
            }
            logits.extend_from_slice(w);
            depth.extend_from_slice(dz);
            let z = cz + cube * dn;
            joints.push(ci.unproject_pixel(u, v, z));
            votes.push([u, v, z]);
            probs.push(p);
        }
        let out = EstimatorOutput {
            pose: HandPose {
                joints,
                frame_id: crop.depth.frame_id,
            },
            feature,
            per_anchor: Some(AnchorResponses {
                anchors: grid.anchors,
                logits,
                offsets,
                depth,
                crop_intrinsics: ci,
            }),
        };
        let cache = EstimatorCache {
            acts,
            head_out,
            probs,
            votes,
            cube,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grads`.
    pub fn backward(&self, out: &EstimatorOutput, cache: &EstimatorCache, g: &OutputGrads, grads: &mut EstimatorParams) {
        let resp = out.per_anchor.as_ref().expect("learned estimator output");
        let ci = resp.crop_intrinsics;
        let k_n = self.config.joints;
        let a_n = resp.anchors.len();
        let stride = self.config.stride() as f64;
        let mut ghead = FeatureMap::zeros(cache.head_out.c, cache.head_out.h, cache.head_out.w);
        for k in 0..k_n {
            let [u, v, z] = cache.votes[k];
            let gp = g.pose[k];
            let gu = gp.x * z / ci.fx;
            let gv = gp.y * z / ci.fy;
            let gz = gp.z + gp.x * (u - ci.cx) / ci.fx + gp.y * (v - ci.cy) / ci.fy;
            let gdn = gz * cache.cube;
            let [gbu, gbv] = g.barycenter[k];
            let p = &cache.probs[k];
            let mut gprob = vec![0.0; a_n];
            for a in 0..a_n {
                let idx = k * a_n + a;
                let anchor = resp.anchors[a];
                let off = resp.offsets[idx];
                gprob[a] = gu * (anchor[0] + off[0])
                    + gv * (anchor[1] + off[1])
                    + gdn * resp.depth[idx]
                    + gbu * anchor[0]
                    + gbv * anchor[1];
                ghead.data[(k_n + k) * a_n + a] = gu * p[a] * stride;
                ghead.data[(2 * k_n + k) * a_n + a] = gv * p[a] * stride;
                ghead.data[(3 * k_n + k) * a_n + a] = gdn * p[a];
            }
            let glogit = softmax_backward(p, &gprob);
            ghead.data[k * a_n..(k + 1) * a_n].copy_from_slice(&glogit);
        }
        let n_layers = self.backbone.len();
        let mut gact = self
            .head
            .backward(&cache.acts[n_layers], &ghead, &mut grads.head, true)
            .expect("input grad requested");
        for l in (0..n_layers).rev() {
            // acts[l + 1] is the post-ReLU output of layer l
            if l + 1 == self.config.feature_tap {
                if let Some(gf) = &g.feature {
                    for (a, b) in gact.data.iter_mut().zip(&gf.data) {
                        *a += b;
                    }
                }
            }
            relu_backward(&cache.acts[l + 1].data, &mut gact.data);
            let want = l > 0;
            match self.backbone[l].backward(&cache.acts[l], &gact, &mut grads.backbone[l], want) {
                Some(gi) => gact = gi,
                None => break,
            }
        }
    }
}

/// Anchor-weight barycenter of joint `k`, in crop pixels.
pub fn anchor_barycenter(resp: &AnchorResponses, k: usize) -> [f64; 2] {
    let a_n = resp.anchors.len();
    let p = softmax(&resp.logits[k * a_n..(k + 1) * a_n]);
    let mut b = [0.0; 2];
    for (pa, anchor) in p.iter().zip(&resp.anchors) {
        b[0] += pa * anchor[0];
        b[1] += pa * anchor[1];
    }
    b
}

/// Runs the learned estimator on a normalized crop.
pub fn estimate(crop: &HandCrop, params: &EstimatorParams) -> Result<EstimatorOutput> {
    params.forward(crop).map(|(out, _)| out)
}

fn norm_grad(e: &Vec3, n: f64) -> Vec3 {
    if n > 0.0 {
        e * (smooth_l1_grad(n) / n)
    } else {
        Vec3::zeros()
    }
}

/// `λ·L_obj + L_info`, with smooth-L1 on per-joint error norms. `L_obj` is
/// measured in millimeters, `L_info` in crop pixels between the anchor
/// barycenter and the projected ground-truth joint.
pub fn a2j_loss(out: &EstimatorOutput, gt: &HandPose, lambda: f64) -> Result<A2jLoss> {
    a2j_loss_with_grads(out, gt, lambda).map(|(l, _)| l)
}

pub fn a2j_loss_with_grads(out: &EstimatorOutput, gt: &HandPose, lambda: f64) -> Result<(A2jLoss, OutputGrads)> {
    check_frame(out.pose.frame_id, gt.frame_id)?;
    if out.pose.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: out.pose.len(),
            got: gt.len(),
        });
    }
    let k_n = gt.len();
    let mut grads = OutputGrads::zeros(k_n);
    let mut obj = 0.0;
    for k in 0..k_n {
        let e = out.pose.joints[k] - gt.joints[k];
        let n = e.norm();
        obj += smooth_l1(n);
        grads.pose[k] = norm_grad(&e, n) * lambda;
    }
    let mut info = 0.0;
    if let Some(resp) = &out.per_anchor {
        for k in 0..k_n {
            let b = anchor_barycenter(resp, k);
            let (gu, gv) = resp.crop_intrinsics.project_point(&gt.joints[k]);
            let e = Vec3::new(b[0] - gu, b[1] - gv, 0.0);
            let n = e.norm();
            info += smooth_l1(n);
            let g = norm_grad(&e, n);
            grads.barycenter[k] = [g.x, g.y];
        }
    }
    Ok((A2jLoss::combine(obj, info, lambda), grads))
}

impl ViewEstimator for EstimatorParams {
    fn feature_shape(&self) -> [usize; 3] {
        self.config.feature_shape()
    }

    fn estimate_view(&self, input: &ViewInput<'_>) -> Result<EstimatorOutput> {
        estimate(input.crop, self)
    }
}

/// One supervised crop: ground truth in the crop's camera frame.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub crop: HandCrop,
    pub gt: HandPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            decay: 0.9,
            lambda: DEFAULT_A2J_LAMBDA,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<(String, f64)>,
}

pub(crate) fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx
}

/// Mean A2J loss over a set of crops.
pub fn mean_a2j_loss(samples: &[CropSample], params: &EstimatorParams, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += a2j_loss(&estimate(&s.crop, params)?, &s.gt, lambda)?.total;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Adam training of the estimator alone on supervised crops.
pub fn train_estimator(
    samples: &[CropSample],
    params: &EstimatorParams,
    schedule: &TrainSchedule,
) -> Result<(EstimatorParams, Vec<EpochLog>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = params.clone();
    let mut opt = Adam::new(params.num_params());
    let mut logs = Vec::with_capacity(schedule.epochs);
    let bs = schedule.batch_size.max(1);
    for epoch in 0..schedule.epochs {
        let lr = decayed_lr(schedule.lr, schedule.decay, epoch);
        let order = shuffled(samples.len(), schedule.seed, epoch);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(bs).enumerate() {
            let mut grads = params.zeros_like();
            for &i in batch {
                let s = &samples[i];
                let (out, cache) = params.forward(&s.crop)?;
                let (loss, mut g) = a2j_loss_with_grads(&out, &s.gt, schedule.lambda)?;
                check_finite(loss.total, epoch, step, "a2j loss")?;
                epoch_loss += loss.total;
                let scale = 1.0 / batch.len() as f64;
                g.pose.iter_mut().for_each(|p| *p *= scale);
                g.barycenter.iter_mut().for_each(|b| {
                    b[0] *= scale;
                    b[1] *= scale;
                });
                params.backward(&out, &cache, &g, &mut grads);
            }
            opt.step_params(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: "estimator parameters diverged".into(),
                });
            }
        }
        logs.push(EpochLog {
            stage: "estimator".into(),
            epoch,
            lr,
            loss: epoch_loss / samples.len() as f64,
            terms: Vec::new(),
        });
    }
    Ok((params, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DepthImage, FrameId, Intrinsics};
    use rand::Rng;

    fn tiny_config() -> EstimatorConfig {
        EstimatorConfig {
            crop_size: 32,
            channels: vec![3, 4, 4, 5],
            joints: 3,
            feature_tap: 2,
        }
    }

    fn random_crop(seed: u64, size: usize) -> HandCrop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = Intrinsics::new(size as f64 * 1.3, size as f64 * 1.3, (size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0, size, size).unwrap();
        HandCrop {
            depth: DepthImage {
                width: size,
                height: size,
                values: (0..size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                intrinsics: intr,
                frame_id: FrameId::View(4),
            },
            center_mm: Vec3::new(3.0, -2.0, 420.0),
            cube_mm: 150.0,
            normalized: true,
        }
    }

    fn random_gt(seed: u64, k: usize) -> HandPose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HandPose {
            joints: (0..k)
                .map(|_| Vec3::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(380.0..460.0)))
                .collect(),
            frame_id: FrameId::View(4),
        }
    }

    fn randomize(p: &mut EstimatorParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            for v in &mut t.data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn default_grid_has_121_anchors() {
        let cfg = EstimatorConfig::default();
        assert_eq!(cfg.stride(), 16);
        let g = cfg.anchor_grid();
        assert_eq!(g.anchors.len(), 121);
        assert_eq!(g.anchors[0], [7.5, 7.5]);
        assert_eq!(g.anchors[120], [167.5, 167.5]);
        assert_eq!(cfg.feature_shape(), [16, 44, 44]);
    }

    #[test]
    fn uniform_vote_hits_anchor_centroid() {
        let mut p = EstimatorParams::new(tiny_config(), 1).unwrap();
        p.head.weight.data.fill(0.0);
        p.head.bias.data.fill(0.0);
        let crop = random_crop(2, 32);
        let out = estimate(&crop, &p).unwrap();
        let grid = p.config.anchor_grid();
        let mean = grid.anchors.iter().fold([0.0, 0.0], |acc, a| [acc[0] + a[0], acc[1] + a[1]]);
        let mean = [mean[0] / grid.anchors.len() as f64, mean[1] / grid.anchors.len() as f64];
        let ci = crop.depth.intrinsics;
        for j in &out.pose.joints {
            let (u, v) = ci.project_point(j);
            assert!((u - mean[0]).abs() < 1e-9 && (v - mean[1]).abs() < 1e-9);
            assert!((j.z - crop.center_mm.z).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_anchor_wins() {
        let mut p = EstimatorParams::new(tiny_config(), 1).unwrap();
        let k_n = 3;
        p.head.weight.data.fill(0.0);
        p.head.bias.data.fill(0.0);
        // constant offsets for every anchor; anchor dominance via a huge logit on joint 0
        p.head.bias.data[k_n] = 0.25; // du of joint 0
        let crop = random_crop(3, 32);
        let x_backbone = {
            let (_, cache) = p.forward(&crop).unwrap();
            cache.head_out
        };
        assert_eq!(x_backbone.h * x_backbone.w, 4);
        // bias cannot single out an anchor, so emulate the limit by editing the outputs directly
        let (mut out, _) = p.forward(&crop).unwrap();
        let resp = out.per_anchor.as_mut().unwrap();
        resp.logits[2] = 1e6;
        let b = anchor_barycenter(resp, 0);
        assert_eq!(b, resp.anchors[2]);
        let probs = softmax(&resp.logits[0..4]);
        let u: f64 = (0..4).map(|a| probs[a] * (resp.anchors[a][0] + resp.offsets[a][0])).sum();
        assert!((u - (resp.anchors[2][0] + 0.25 * 16.0)).abs() < 1e-9);
    }

    #[test]
    fn vote_matches_brute_force_loop() {
        let mut p = EstimatorParams::new(tiny_config(), 7).unwrap();
        randomize(&mut p, 8);
        let crop = random_crop(9, 32);
        let out = estimate(&crop, &p).unwrap();
        // independent reference: recompute the head directly from the backbone output
        let mut x = FeatureMap {
            c: 1,
            h: 32,
            w: 32,
            data: crop.depth.values.iter().map(|&v| v as f64).collect(),
        };
        for conv in &p.backbone {
            x = conv.forward(&x);
            x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let grid = p.config.anchor_grid();
        let ci = crop.depth.intrinsics;
        for k in 0..3 {
            let (mut num_u, mut num_v, mut num_z, mut den) = (0.0, 0.0, 0.0, 0.0);
            for a in 0..grid.anchors.len() {
                let (y, xx) = (a / grid.side, a % grid.side);
                let ch = |c: usize| {
                    let mut acc = p.head.bias.data[c];
                    for i in 0..x.c {
                        acc += p.head.weight.data[c * x.c + i] * x.at(i, y, xx);
                    }
                    acc
                };
                let e = ch(k).exp();
                den += e;
                num_u += e * (grid.anchors[a][0] + 16.0 * ch(3 + k));
                num_v += e * (grid.anchors[a][1] + 16.0 * ch(6 + k));
                num_z += e * ch(9 + k);
            }
            let z = crop.center_mm.z + 150.0 * num_z / den;
            let expected = ci.unproject_pixel(num_u / den, num_v / den, z);
            assert!((out.pose.joints[k] - expected).amax() < 1e-9);
        }
    }

    #[test]
    fn estimate_is_deterministic_and_checks_shape() {
        let p = EstimatorParams::new(tiny_config(), 3).unwrap();
        let crop = random_crop(4, 32);
        assert_eq!(estimate(&crop, &p).unwrap(), estimate(&crop, &p).unwrap());
        let wrong = random_crop(4, 40);
        assert!(matches!(estimate(&wrong, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn loss_unit_values() {
        let l = A2jLoss::combine(1.0, 0.5, 3.0);
        assert_eq!(l.total, 3.5);
        // single joint, error norm 0.5, no anchor term
        let out = EstimatorOutput {
            pose: HandPose {
                joints: vec![Vec3::new(0.3, 0.4, 100.0)],
                frame_id: FrameId::Original,
            },
            feature: FeatureMap::zeros(1, 1, 1),
            per_anchor: None,
        };
        let gt = HandPose {
            joints: vec![Vec3::new(0.0, 0.0, 100.0)],
            frame_id: FrameId::Original,
        };
        let l = a2j_loss(&out, &gt, 3.0).unwrap();
        assert!((l.total - 0.375).abs() < 1e-12);
        assert_eq!(a2j_loss(&out, &out.pose, 3.0).unwrap().total, 0.0);
        let other = HandPose {
            frame_id: FrameId::View(1),
            ..gt
        };
        assert!(matches!(a2j_loss(&out, &other, 3.0), Err(Error::FrameMismatch { .. })));
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let mut p = EstimatorParams::new(tiny_config(), 5).unwrap();
        p.head.weight.data.fill(0.0);
        p.head.bias.data.fill(0.0);
        let crop = random_crop(6, 32);
        let out = estimate(&crop, &p).unwrap();
        // ground truth placed exactly at the prediction, whose barycenter equals the vote
        let l = a2j_loss(&out, &out.pose.clone(), 3.0).unwrap();
        assert!(l.total.abs() < 1e-9, "{l:?}");
    }

    fn loss_at(p: &EstimatorParams, crop: &HandCrop, gt: &HandPose, tap_proj: &FeatureMap) -> f64 {
        let out = estimate(crop, p).unwrap();
        let feat: f64 = out.feature.data.iter().zip(&tap_proj.data).map(|(a, b)| a * b).sum();
        a2j_loss(&out, gt, 3.0).unwrap().total + feat
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut worst: f64 = 0.0;
        for point in 0..3u64 {
            let mut p = EstimatorParams::new(cfg.clone(), point).unwrap();
            randomize(&mut p, 100 + point);
            let crop = random_crop(200 + point, 32);
            let gt = random_gt(300 + point, 3);
            let shape = cfg.feature_shape();
            let mut rng = ChaCha8Rng::seed_from_u64(400 + point);
            let proj = FeatureMap {
                c: shape[0],
                h: shape[1],
                w: shape[2],
                data: (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let (out, cache) = p.forward(&crop).unwrap();
            let (_, mut g) = a2j_loss_with_grads(&out, &gt, 3.0).unwrap();
            g.feature = Some(proj.clone());
            let mut grads = p.zeros_like();
            p.backward(&out, &cache, &g, &mut grads);
            let analytic = grads.to_flat();
            let flat = p.to_flat();
            for _ in 0..25 {
                let i = rng.random_range(0..flat.len());
                let h = 1e-5;
                let mut a = p.clone();
                let mut fa = flat.clone();
                fa[i] += h;
                a.set_flat(&fa);
                let mut b = p.clone();
                let mut fb = flat.clone();
                fb[i] -= h;
                b.set_flat(&fb);
                let numeric = (loss_at(&a, &crop, &gt, &proj) - loss_at(&b, &crop, &gt, &proj)) / (2.0 * h);
                let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn overfits_one_sample() {
        let cfg = tiny_config();
        let p = EstimatorParams::new(cfg, 11).unwrap();
        let crop = random_crop(12, 32);
        let sample = CropSample {
            crop,
            gt: random_gt(13, 3),
        };
        let samples = vec![sample];
        let before = mean_a2j_loss(&samples, &p, 3.0).unwrap();
        let sched = TrainSchedule {
            epochs: 200,
            lr: 1e-3,
            decay: 1.0,
            batch_size: 1,
            ..TrainSchedule::default()
        };
        let (trained, logs) = train_estimator(&samples, &p, &sched).unwrap();
        let after = mean_a2j_loss(&samples, &trained, 3.0).unwrap();
        assert_eq!(logs.len(), 200);
        assert!(after < before, "{after} !< {before}");
        assert!(matches!(train_estimator(&[], &p, &sched), Err(Error::EmptyDataset)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn vote_stays_in_convex_hull(seed in 0u64..10_000) {
                let mut p = EstimatorParams::new(tiny_config(), seed).unwrap();
                randomize(&mut p, seed + 1);
                let crop = random_crop(seed + 2, 32);
                let out = estimate(&crop, &p).unwrap();
                let resp = out.per_anchor.as_ref().unwrap();
                let a_n = resp.anchors.len();
                for k in 0..3 {
                    let (u, v) = resp.crop_intrinsics.project_point(&out.pose.joints[k]);
                    let cands: Vec<[f64; 2]> = (0..a_n).map(|a| {
                        let o = resp.offsets[k * a_n + a];
                        [resp.anchors[a][0] + o[0], resp.anchors[a][1] + o[1]]
                    }).collect();
                    let (lo_u, hi_u) = cands.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(c[0]), h.max(c[0])));
                    let (lo_v, hi_v) = cands.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(c[1]), h.max(c[1])));
                    prop_assert!(u >= lo_u - 1e-6 && u <= hi_u + 1e-6);
                    prop_assert!(v >= lo_v - 1e-6 && v <= hi_v + 1e-6);
                }
                let gt = random_gt(seed + 3, 3);
                prop_assert!(a2j_loss(&out, &gt, 3.0).unwrap().total >= 0.0);
            }
        }
    }
}
