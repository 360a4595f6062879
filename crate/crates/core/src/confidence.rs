//! View confidence: a teacher that scores all candidate views from their
//! estimator features with single-head self-attention, a student that
//! predicts the same scores from the original crop alone, top-N selection and
//! the training losses tying them together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::estimator::{
    a2j_loss_with_grads, shuffled, EpochLog, EstimatorCache, EstimatorOutput, EstimatorParams, OutputGrads,
    ViewEstimator, ViewInput, DEFAULT_A2J_LAMBDA,
};
use crate::geometry::{check_frame, transform_pose, DepthImage, FrameId, HandPose, Vec3, VirtualViewSet};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, decayed_lr, global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, smooth_l1, smooth_l1_grad,
    softmax, softmax_backward, Adam, Conv2d, FeatureMap, Linear, Params, Tensor,
};
use crate::renderer::HandCrop;
use crate::seed::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    pub raw: Vec<f64>,
    pub selected_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Keeps the `n` highest raw scores (ties to the smaller id) and softmaxes
/// over them. Ids come out in descending score order.
pub fn softmax_select(raw: &[f64], n: usize) -> Result<ConfidenceVector> {
    let m = raw.len();
    if n == 0 || n > m {
        return Err(Error::BadN { n, m });
    }
    let mut ids: Vec<usize> = (0..m).collect();
    ids.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    ids.truncate(n);
    let weights = softmax(&ids.iter().map(|&i| raw[i]).collect::<Vec<_>>());
    Ok(ConfidenceVector {
        raw: raw.to_vec(),
        selected_ids: ids,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the fused-pose term in the joint objective.
    pub gamma: f64,
    pub lambda: f64,
    /// Scale of confidence differences in the distillation loss.
    pub beta: f64,
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: DEFAULT_A2J_LAMBDA,
            beta: 100.0,
            lr: 1e-3,
            decay: 0.9,
            epochs: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.lambda > 0.0 && self.beta > 0.0) {
            return Err(Error::Invalid("gamma, lambda and beta must be positive".into()));
        }
        if !(self.lr > 0.0 && self.decay > 0.0) || self.batch_size == 0 {
            return Err(Error::Invalid("learning rate, decay and batch size must be positive".into()));
        }
        Ok(())
    }
}

fn check_poses(a: &HandPose, b: &HandPose) -> Result<()> {
    check_frame(a.frame_id, b.frame_id)?;
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// `Σ_k smooth_l1(|fused_k - gt_k|)`.
pub fn fusion_loss(fused: &HandPose, gt: &HandPose) -> Result<f64> {
    check_poses(fused, gt)?;
    Ok(fused
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(a, b)| smooth_l1((a - b).norm()))
        .sum())
}

/// Gradient of [`fusion_loss`] with respect to each fused joint.
pub fn fusion_loss_grad(fused: &HandPose, gt: &HandPose) -> Result<Vec<Vec3>> {
    check_poses(fused, gt)?;
    Ok(fused
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(a, b)| {
            let e = a - b;
            let n = e.norm();
            if n > 0.0 {
                e * (smooth_l1_grad(n) / n)
            } else {
                Vec3::zeros()
            }
        })
        .collect())
}

/// Mean per-view estimator loss plus `gamma` times the fused-pose loss.
pub fn joint_loss(a2j_terms: &[f64], fused_loss: f64, cfg: &TrainConfig) -> f64 {
    let mean = if a2j_terms.is_empty() {
        0.0
    } else {
        a2j_terms.iter().sum::<f64>() / a2j_terms.len() as f64
    };
    mean + cfg.gamma * fused_loss
}

/// `Σ_i smooth_l1(beta * (student_i - teacher_i))`.
pub fn distill_loss(student_raw: &[f64], teacher: &[f64], beta: f64) -> Result<f64> {
    if student_raw.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            expected: teacher.len(),
            got: student_raw.len(),
        });
    }
    Ok(student_raw
        .iter()
        .zip(teacher)
        .map(|(s, t)| smooth_l1(beta * (s - t)))
        .sum())
}

pub fn distill_loss_grad(student_raw: &[f64], teacher: &[f64], beta: f64) -> Vec<f64> {
    student_raw
        .iter()
        .zip(teacher)
        .map(|(s, t)| beta * smooth_l1_grad(beta * (s - t)))
        .collect()
}

// ---------------------------------------------------------------- teacher

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Shape `[C, H, W]` of the per-view estimator feature.
    pub in_shape: [usize; 3],
    /// Output channels of the three stride-2 convolutions; the last is the
    /// per-view descriptor size.
    pub channels: Vec<usize>,
    pub attn_dim: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            in_shape: [16, 44, 44],
            channels: vec![16, 32, 256],
            attn_dim: 64,
        }
    }
}

impl TeacherConfig {
    pub fn for_features(in_shape: [usize; 3]) -> Self {
        Self {
            in_shape,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.attn_dim == 0 || self.in_shape.contains(&0) {
            return Err(Error::Invalid("teacher config has an empty dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub config: TeacherConfig,
    pub seed: u64,
    pub convs: Vec<Conv2d>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub fc: Linear,
}

macro_rules! linear_tensors {
    ($out:ident, $self:ident, $($name:ident),*) => {
        $(
            $out.push((concat!(stringify!($name), ".weight").to_string(), &$self.$name.weight));
            $out.push((concat!(stringify!($name), ".bias").to_string(), &$self.$name.bias));
        )*
    };
}

macro_rules! linear_tensors_mut {
    ($out:ident, $self:ident, $($name:ident),*) => {
        $(
            $out.push(&mut $self.$name.weight);
            $out.push(&mut $self.$name.bias);
        )*
    };
}

fn conv_tensors<'a>(prefix: &str, convs: &'a [Conv2d], out: &mut Vec<(String, &'a Tensor)>) {
    for (i, c) in convs.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), &c.weight));
        out.push((format!("{prefix}.{i}.bias"), &c.bias));
    }
}

impl Params for TeacherParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        conv_tensors("conv", &self.convs, &mut out);
        linear_tensors!(out, self, wq, wk, wv, wo, fc);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        linear_tensors_mut!(out, self, wq, wk, wv, wo, fc);
        out
    }
}

/// Scaled dot-product attention over row vectors. Returns the outputs and
/// the row-stochastic attention matrix.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q.first().map_or(1, |r| r.len()) as f64;
    let scale = 1.0 / d.sqrt();
    let attn: Vec<Vec<f64>> = q
        .iter()
        .map(|qi| softmax(&k.iter().map(|kj| scale * dot(qi, kj)).collect::<Vec<_>>()))
        .collect();
    let dv = v.first().map_or(0, |r| r.len());
    let out = attn
        .iter()
        .map(|row| {
            let mut o = vec![0.0; dv];
            for (a, vj) in row.iter().zip(v) {
                for (oi, x) in o.iter_mut().zip(vj) {
                    *oi += a * x;
                }
            }
            o
        })
        .collect();
    (out, attn)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct TeacherCache {
    acts: Vec<Vec<FeatureMap>>,
    h: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

impl TeacherParams {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut in_c = config.in_shape[0];
        for &c in &config.channels {
            convs.push(Conv2d::new(in_c, c, 3, 2, 1, &mut rng));
            in_c = c;
        }
        let f = config.feature_dim();
        let d = config.attn_dim;
        let wq = Linear::new(f, d, &mut rng);
        let wk = Linear::new(f, d, &mut rng);
        let wv = Linear::new(f, d, &mut rng);
        let mut wo = Linear::new(d, f, &mut rng);
        wo.weight.data.iter_mut().for_each(|w| *w *= 0.1);
        let mut fc = Linear::new(f, 1, &mut rng);
        fc.weight.data.iter_mut().for_each(|w| *w *= 0.1);
        Ok(Self {
            config,
            seed,
            convs,
            wq,
            wk,
            wv,
            wo,
            fc,
        })
    }

    fn descriptor(&self, x: &FeatureMap) -> (Vec<FeatureMap>, Vec<f64>) {
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        let mut cur = x.clone();
        for conv in &self.convs {
            let mut y = conv.forward(&cur);
            relu_inplace(&mut y.data);
            acts.push(std::mem::replace(&mut cur, y));
        }
        let h = global_avg_pool(&cur);
        acts.push(cur);
        (acts, h)
    }

    pub fn forward(&self, features: &[&FeatureMap]) -> Result<(Vec<f64>, TeacherCache)> {
        if features.is_empty() {
            return Err(Error::Invalid("teacher needs at least one view".into()));
        }
        for f in features {
            f.check_shape(self.config.in_shape)?;
        }
        let (acts, h): (Vec<_>, Vec<_>) = features.iter().map(|f| self.descriptor(f)).unzip();
        let q: Vec<_> = h.iter().map(|x| self.wq.forward(x)).collect();
        let k: Vec<_> = h.iter().map(|x| self.wk.forward(x)).collect();
        let v: Vec<_> = h.iter().map(|x| self.wv.forward(x)).collect();
        let (o, attn) = attention(&q, &k, &v);
        let z: Vec<Vec<f64>> = h
            .iter()
            .zip(&o)
            .map(|(hi, oi)| hi.iter().zip(self.wo.forward(oi)).map(|(a, b)| a + b).collect())
            .collect();
        let scores = z.iter().map(|zi| self.fc.forward(zi)[0]).collect();
        Ok((
            scores,
            TeacherCache {
                acts,
                h,
                q,
                k,
                v,
                attn,
                o,
                z,
            },
        ))
    }

    /// Raw per-view scores.
    pub fn scores(&self, features: &[&FeatureMap]) -> Result<Vec<f64>> {
        self.forward(features).map(|(s, _)| s)
    }

    /// Accumulates parameter gradients and returns per-view feature gradients
    /// when `want_input` is set.
    pub fn backward(&self, cache: &TeacherCache, dscores: &[f64], grads: &mut TeacherParams, want_input: bool) -> Vec<Option<FeatureMap>> {
        let m = dscores.len();
        let f = self.config.feature_dim();
        let d = self.config.attn_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dh = vec![vec![0.0; f]; m];
        let mut dobj = vec![vec![0.0; d]; m];
        for i in 0..m {
            let dz = self.fc.backward(&cache.z[i], &[dscores[i]], &mut grads.fc);
            for (a, b) in dh[i].iter_mut().zip(&dz) {
                *a += b;
            }
            dobj[i] = self.wo.backward(&cache.o[i], &dz, &mut grads.wo);
        }
        let mut dq = vec![vec![0.0; d]; m];
        let mut dk = vec![vec![0.0; d]; m];
        let mut dv = vec![vec![0.0; d]; m];
        for i in 0..m {
            let da: Vec<f64> = (0..m).map(|j| dot(&dobj[i], &cache.v[j])).collect();
            for j in 0..m {
                for (x, y) in dv[j].iter_mut().zip(&dobj[i]) {
                    *x += cache.attn[i][j] * y;
                }
            }
            let ds = softmax_backward(&cache.attn[i], &da);
            for j in 0..m {
                let g = ds[j] * scale;
                for t in 0..d {
                    dq[i][t] += g * cache.k[j][t];
                    dk[j][t] += g * cache.q[i][t];
                }
            }
        }
        for i in 0..m {
            for (lin, g, grad) in [
                (&self.wq, &dq[i], &mut grads.wq),
                (&self.wk, &dk[i], &mut grads.wk),
                (&self.wv, &dv[i], &mut grads.wv),
            ] {
                let gi = lin.backward(&cache.h[i], g, grad);
                for (a, b) in dh[i].iter_mut().zip(&gi) {
                    *a += b;
                }
            }
        }
        let n = self.convs.len();
        (0..m)
            .map(|i| {
                let last = &cache.acts[i][n];
                let mut g = global_avg_pool_backward(&dh[i], last.h, last.w);
                for l in (0..n).rev() {
                    relu_backward(&cache.acts[i][l + 1].data, &mut g.data);
                    let want = l > 0 || want_input;
                    match self.convs[l].backward(&cache.acts[i][l], &g, &mut grads.convs[l], want) {
                        Some(gi) => g = gi,
                        None => return None,
                    }
                }
                Some(g)
            })
            .collect()
    }
}

// ---------------------------------------------------------------- student

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub crop_size: usize,
    pub channels: Vec<usize>,
    pub views: usize,
    /// Side of the average-pooling grid before the head; 0 flattens the
    /// whole last feature map.
    pub pool: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            crop_size: 176,
            channels: vec![8, 16, 32, 32],
            views: 25,
            pool: 3,
        }
    }
}

impl StudentConfig {
    fn last_side(&self) -> usize {
        (0..self.channels.len()).fold(self.crop_size, |n, _| n.div_ceil(2))
    }

    fn flat_dim(&self) -> usize {
        let side = if self.pool > 0 { self.pool } else { self.last_side() };
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.channels.is_empty() || self.views == 0 {
            return Err(Error::Invalid("student config has an empty dimension".into()));
        }
        if self.pool > self.last_side() {
            return Err(Error::Invalid(format!(
                "student pool grid {} exceeds the {}-pixel feature map",
                self.pool,
                self.last_side()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    pub config: StudentConfig,
    pub seed: u64,
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
}

impl Params for StudentParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        conv_tensors("conv", &self.convs, &mut out);
        linear_tensors!(out, self, fc);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        linear_tensors_mut!(out, self, fc);
        out
    }
}

#[derive(Debug, Clone)]
pub struct StudentCache {
    acts: Vec<FeatureMap>,
}

impl StudentParams {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_c = 1;
        for &c in &config.channels {
            convs.push(Conv2d::new(in_c, c, 3, 2, 1, &mut rng));
            in_c = c;
        }
        let mut fc = Linear::new(config.flat_dim(), config.views, &mut rng);
        fc.weight.data.iter_mut().for_each(|w| *w *= 0.01);
        fc.bias.data.fill(1.0 / config.views as f64);
        Ok(Self { config, seed, convs, fc })
    }

    pub fn forward(&self, crop: &HandCrop) -> Result<(Vec<f64>, StudentCache)> {
        let s = self.config.crop_size;
        if crop.depth.width != s || crop.depth.height != s || !crop.normalized {
            return Err(Error::ShapeMismatch {
                expected: format!("normalized {s}x{s} crop"),
                got: format!("{}x{}", crop.depth.width, crop.depth.height),
            });
        }
        let mut x = FeatureMap {
            c: 1,
            h: s,
            w: s,
            data: crop.depth.values.iter().map(|&v| v as f64).collect(),
        };
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            let mut y = conv.forward(&x);
            relu_inplace(&mut y.data);
            acts.push(std::mem::replace(&mut x, y));
        }
        let out = if self.config.pool > 0 {
            self.fc.forward(&adaptive_avg_pool(&x, self.config.pool).data)
        } else {
            self.fc.forward(&x.data)
        };
        acts.push(x);
        Ok((out, StudentCache { acts }))
    }

    pub fn backward(&self, cache: &StudentCache, dout: &[f64], grads: &mut StudentParams) {
        let n = self.convs.len();
        let last = &cache.acts[n];
        let pool = self.config.pool;
        let mut g = if pool > 0 {
            let pooled = adaptive_avg_pool(last, pool);
            let gp = self.fc.backward(&pooled.data, dout, &mut grads.fc);
            adaptive_avg_pool_backward(
                &FeatureMap {
                    c: last.c,
                    h: pool,
                    w: pool,
                    data: gp,
                },
                last.h,
                last.w,
            )
        } else {
            FeatureMap {
                c: last.c,
                h: last.h,
                w: last.w,
                data: self.fc.backward(&last.data, dout, &mut grads.fc),
            }
        };
        for l in (0..n).rev() {
            relu_backward(&cache.acts[l + 1].data, &mut g.data);
            match self.convs[l].backward(&cache.acts[l], &g, &mut grads.convs[l], l > 0) {
                Some(gi) => g = gi,
                None => break,
            }
        }
    }
}

/// Student scores from the original-view crop; no rendering needed.
pub fn student_confidence(crop: &HandCrop, params: &StudentParams) -> Result<Vec<f64>> {
    params.forward(crop).map(|(s, _)| s)
}

pub fn teacher_confidence(features: &[&FeatureMap], params: &TeacherParams) -> Result<Vec<f64>> {
    params.scores(features)
}

/// Maps student outputs, which regress post-softmax confidences, to
/// log-space scores so that softmax over a selected subset reproduces the
/// renormalized confidences.
pub fn student_scores_to_logits(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|c| c.max(1e-6).ln()).collect()
}

// ---------------------------------------------------------------- training data

/// One frame seen through every candidate view.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub views: VirtualViewSet,
    pub rendered: Vec<DepthImage>,
    pub crops: Vec<HandCrop>,
    /// Crop of the input depth around the hand center.
    pub original_crop: HandCrop,
    pub gt_original: HandPose,
    pub seed: u64,
}

impl ViewBundle {
    pub fn input(&self, i: usize, sample_seed: u64) -> ViewInput<'_> {
        ViewInput {
            view: &self.views.views[i],
            rendered: &self.rendered[i],
            crop: &self.crops[i],
            gt_original: Some(&self.gt_original),
            sample_seed,
        }
    }

    pub fn gt_in_view(&self, i: usize) -> HandPose {
        let v = &self.views.views[i];
        transform_pose(&self.gt_original, &v.from_original, v.frame_id())
    }
}

/// Lazily produces training bundles so that only one frame's renders are
/// held at a time.
pub trait BundleSource: Sync {
    fn len(&self) -> usize;
    fn bundle(&self, index: usize) -> Result<ViewBundle>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Confidence-weighted fusion of view-frame poses into the original frame.
fn fuse_weighted(poses: &[HandPose], views: &VirtualViewSet, weights: &[f64]) -> HandPose {
    let k = poses[0].len();
    let mut joints = vec![Vec3::zeros(); k];
    for (p, w) in poses.iter().zip(weights) {
        let t = &views.views[frame_view(p.frame_id)].to_original;
        for (acc, j) in joints.iter_mut().zip(&p.joints) {
            *acc += t.apply(j) * *w;
        }
    }
    HandPose {
        joints,
        frame_id: FrameId::Original,
    }
}

fn frame_view(f: FrameId) -> usize {
    match f {
        FrameId::View(i) => i,
        FrameId::Original => 0,
    }
}

/// Estimator taking part in joint training.
pub enum JointEstimator<'a> {
    /// Used as is; its parameters are never touched.
    Frozen(&'a dyn ViewEstimator),
    Trainable(EstimatorParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossTerms {
    pub a2j_mean: f64,
    pub fused: f64,
    pub total: f64,
}

/// Joint objective on one bundle with all views fused under a softmax over
/// every teacher score. Accumulates gradients when grad buffers are given.
pub fn joint_objective(
    bundle: &ViewBundle,
    estimator: &JointEstimator<'_>,
    teacher: &TeacherParams,
    cfg: &TrainConfig,
    sample_seed: u64,
    teacher_grads: Option<&mut TeacherParams>,
    estimator_grads: Option<&mut EstimatorParams>,
) -> Result<JointLossTerms> {
    let m = bundle.views.len();
    let mut outs: Vec<EstimatorOutput> = Vec::with_capacity(m);
    let mut caches: Vec<EstimatorCache> = Vec::new();
    let mut a2j = Vec::with_capacity(m);
    let mut pose_grads: Vec<OutputGrads> = Vec::with_capacity(m);
    for i in 0..m {
        let out = match estimator {
            JointEstimator::Frozen(e) => e.estimate_view(&bundle.input(i, sample_seed))?,
            JointEstimator::Trainable(p) => {
                let (out, cache) = p.forward(&bundle.crops[i])?;
                caches.push(cache);
                out
            }
        };
        let (loss, mut g) = a2j_loss_with_grads(&out, &bundle.gt_in_view(i), cfg.lambda)?;
        let scale = 1.0 / m as f64;
        g.pose.iter_mut().for_each(|p| *p *= scale);
        g.barycenter.iter_mut().for_each(|b| {
            b[0] *= scale;
            b[1] *= scale;
        });
        a2j.push(loss.total);
        pose_grads.push(g);
        outs.push(out);
    }
    let feats: Vec<&FeatureMap> = outs.iter().map(|o| &o.feature).collect();
    let (scores, tcache) = teacher.forward(&feats)?;
    let c = softmax(&scores);
    let poses: Vec<HandPose> = outs.iter().map(|o| o.pose.clone()).collect();
    let fused = fuse_weighted(&poses, &bundle.views, &c);
    let fl = fusion_loss(&fused, &bundle.gt_original)?;
    let terms = JointLossTerms {
        a2j_mean: a2j.iter().sum::<f64>() / m as f64,
        fused: fl,
        total: joint_loss(&a2j, fl, cfg),
    };
    let Some(tg) = teacher_grads else {
        return Ok(terms);
    };
    let gf = fusion_loss_grad(&fused, &bundle.gt_original)?;
    let mut dc = vec![0.0; m];
    for i in 0..m {
        let t = &bundle.views.views[i].to_original;
        for (k, j) in poses[i].joints.iter().enumerate() {
            let jo = t.apply(j);
            dc[i] += cfg.gamma * gf[k].dot(&jo);
            pose_grads[i].pose[k] += t.rotation.transpose() * gf[k] * (cfg.gamma * c[i]);
        }
    }
    let ds = softmax_backward(&c, &dc);
    let want_feat = matches!(estimator, JointEstimator::Trainable(_)) && estimator_grads.is_some();
    let dfeat = teacher.backward(&tcache, &ds, tg, want_feat);
    if let (JointEstimator::Trainable(p), Some(eg)) = (estimator, estimator_grads) {
        for i in 0..m {
            pose_grads[i].feature = dfeat[i].clone();
            p.backward(&outs[i], &caches[i], &pose_grads[i], eg);
        }
    }
    Ok(terms)
}

#[derive(Debug, Clone)]
pub struct JointTrainResult {
    /// Updated estimator, absent when it was frozen.
    pub estimator: Option<EstimatorParams>,
    pub teacher: TeacherParams,
    pub logs: Vec<EpochLog>,
}

fn epoch_seed(bundle_seed: u64, train_seed: u64, epoch: usize) -> u64 {
    mix_seed(mix_seed(bundle_seed, train_seed), epoch as u64 + 1)
}

/// Trains the teacher, and the estimator when trainable, on the joint
/// objective with every candidate view in the softmax.
pub fn train_teacher_joint(
    source: &dyn BundleSource,
    estimator: JointEstimator<'_>,
    teacher: &TeacherParams,
    cfg: &TrainConfig,
) -> Result<JointTrainResult> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut estimator = estimator;
    let mut teacher = teacher.clone();
    let mut t_opt = Adam::new(teacher.num_params());
    let mut e_opt = match &estimator {
        JointEstimator::Trainable(p) => Some(Adam::new(p.num_params())),
        JointEstimator::Frozen(_) => None,
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.decay, epoch);
        let order = shuffled(source.len(), cfg.seed, epoch);
        let (mut sum, mut sum_a2j, mut sum_fused) = (0.0, 0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tg = teacher.zeros_like();
            let mut eg = match &estimator {
                JointEstimator::Trainable(p) => Some(p.zeros_like()),
                JointEstimator::Frozen(_) => None,
            };
            for &i in batch {
                let bundle = source.bundle(i)?;
                let seed = epoch_seed(bundle.seed, cfg.seed, epoch);
                let terms = joint_objective(&bundle, &estimator, &teacher, cfg, seed, Some(&mut tg), eg.as_mut())?;
                check_finite(terms.total, epoch, step, "joint loss")?;
                sum += terms.total;
                sum_a2j += terms.a2j_mean;
                sum_fused += terms.fused;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut tflat = tg.to_flat();
            tflat.iter_mut().for_each(|g| *g *= scale);
            tg.set_flat(&tflat);
            t_opt.step_params(&mut teacher, &tg, lr);
            if let (JointEstimator::Trainable(p), Some(mut g), Some(opt)) = (&mut estimator, eg, e_opt.as_mut()) {
                let mut flat = g.to_flat();
                flat.iter_mut().for_each(|x| *x *= scale);
                g.set_flat(&flat);
                opt.step_params(p, &g, lr);
                if !p.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: "estimator parameters diverged".into(),
                    });
                }
            }
            if !teacher.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: "teacher parameters diverged".into(),
                });
            }
        }
        let n = source.len() as f64;
        logs.push(EpochLog {
            stage: "teacher_joint".into(),
            epoch,
            lr,
            loss: sum / n,
            terms: vec![("a2j".into(), sum_a2j / n), ("fused".into(), sum_fused / n)],
        });
    }
    Ok(JointTrainResult {
        estimator: match estimator {
            JointEstimator::Trainable(p) => Some(p),
            JointEstimator::Frozen(_) => None,
        },
        teacher,
        logs,
    })
}

/// Teacher confidences after a softmax over all views, used as distillation
/// targets.
pub fn teacher_targets(bundle: &ViewBundle, estimator: &dyn ViewEstimator, teacher: &TeacherParams) -> Result<Vec<f64>> {
    let outs = (0..bundle.views.len())
        .map(|i| estimator.estimate_view(&bundle.input(i, bundle.seed)))
        .collect::<Result<Vec<_>>>()?;
    let feats: Vec<&FeatureMap> = outs.iter().map(|o| &o.feature).collect();
    Ok(softmax(&teacher.scores(&feats)?))
}

#[derive(Debug, Clone)]
pub struct DistillSample {
    pub crop: HandCrop,
    pub target: Vec<f64>,
}

/// Builds distillation samples with a frozen teacher and estimator.
pub fn distill_samples(source: &dyn BundleSource, estimator: &dyn ViewEstimator, teacher: &TeacherParams) -> Result<Vec<DistillSample>> {
    (0..source.len())
        .map(|i| {
            let b = source.bundle(i)?;
            let target = teacher_targets(&b, estimator, teacher)?;
            Ok(DistillSample {
                crop: b.original_crop,
                target,
            })
        })
        .collect()
}

pub fn mean_distill_loss(samples: &[DistillSample], student: &StudentParams, beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += distill_loss(&student_confidence(&s.crop, student)?, &s.target, beta)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Fits the student to fixed teacher targets.
pub fn train_student_on(samples: &[DistillSample], student: &StudentParams, cfg: &TrainConfig) -> Result<(StudentParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut student = student.clone();
    let mut opt = Adam::new(student.num_params());
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.decay, epoch);
        let order = shuffled(samples.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = student.zeros_like();
            for &i in batch {
                let (out, cache) = student.forward(&samples[i].crop)?;
                let loss = distill_loss(&out, &samples[i].target, cfg.beta)?;
                check_finite(loss, epoch, step, "distillation loss")?;
                sum += loss;
                let mut d = distill_loss_grad(&out, &samples[i].target, cfg.beta);
                d.iter_mut().for_each(|x| *x /= batch.len() as f64);
                student.backward(&cache, &d, &mut g);
            }
            opt.step_params(&mut student, &g, lr);
            if !student.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: "student parameters diverged".into(),
                });
            }
        }
        logs.push(EpochLog {
            stage: "student".into(),
            epoch,
            lr,
            loss: sum / samples.len() as f64,
            terms: Vec::new(),
        });
    }
    Ok((student, logs))
}

/// Distills a frozen teacher (over a frozen estimator) into the student.
pub fn train_student(
    source: &dyn BundleSource,
    teacher: &TeacherParams,
    estimator: &dyn ViewEstimator,
    student: &StudentParams,
    cfg: &TrainConfig,
) -> Result<(StudentParams, Vec<EpochLog>)> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples = distill_samples(source, estimator, teacher)?;
    train_student_on(&samples, student, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorConfig;
    use crate::geometry::{sample_virtual_views, Intrinsics};
    use rand::Rng;
    use std::f64::consts::{E, FRAC_PI_3};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    fn tiny_teacher(seed: u64) -> TeacherParams {
        TeacherParams::new(
            TeacherConfig {
                in_shape: [2, 6, 6],
                channels: vec![3, 4, 8],
                attn_dim: 4,
            },
            seed,
        )
        .unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> FeatureMap {
        FeatureMap {
            c: shape[0],
            h: shape[1],
            w: shape[2],
            data: (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn select_examples() {
        let c = softmax_select(&[0.3; 4], 4).unwrap();
        assert!(c.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        let c = softmax_select(&[0.1, 0.9, 0.9, 0.2], 2).unwrap();
        assert_eq!(c.selected_ids, vec![1, 2]);
        assert_eq!(c.weights, vec![0.5, 0.5]);
        let c = softmax_select(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(c.selected_ids, vec![2, 1]);
        assert!((c.weights[0] - E / (E + 1.0)).abs() < 1e-12);
        assert!((c.weights[1] - 1.0 / (E + 1.0)).abs() < 1e-12);
        assert!(matches!(softmax_select(&[1.0], 2), Err(Error::BadN { n: 2, m: 1 })));
        assert!(matches!(softmax_select(&[1.0], 0), Err(Error::BadN { .. })));
    }

    #[test]
    fn loss_unit_values() {
        let pose = |v: Vec<Vec3>| HandPose {
            joints: v,
            frame_id: FrameId::Original,
        };
        let gt = pose(vec![Vec3::zeros(), Vec3::zeros()]);
        assert_eq!(fusion_loss(&gt, &gt).unwrap(), 0.0);
        let p = pose(vec![Vec3::new(0.3, 0.4, 0.0), Vec3::new(0.0, 2.0, 0.0)]);
        assert!((fusion_loss(&p, &gt).unwrap() - 1.625).abs() < 1e-12);
        let one = pose(vec![Vec3::new(0.5, 0.0, 0.0)]);
        assert!((fusion_loss(&one, &pose(vec![Vec3::zeros()])).unwrap() - 0.125).abs() < 1e-12);
        let cfg = TrainConfig::default();
        assert_eq!(joint_loss(&[0.0], 0.0, &cfg), 0.0);
        assert!((joint_loss(&[1.0, 3.0], 1.0, &cfg) - 2.1).abs() < 1e-12);
        let t = vec![0.04; 25];
        let s: Vec<f64> = t.iter().map(|x| x + 0.005).collect();
        assert!((distill_loss(&s, &t, 100.0).unwrap() - 3.125).abs() < 1e-12);
        assert!((distill_loss(&[0.52], &[0.5], 100.0).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(distill_loss(&t, &t, 100.0).unwrap(), 0.0);
        assert!(matches!(distill_loss(&t, &t[..3], 100.0), Err(Error::LengthMismatch { .. })));
        let other = HandPose {
            frame_id: FrameId::View(2),
            ..gt.clone()
        };
        assert!(matches!(fusion_loss(&gt, &other), Err(Error::FrameMismatch { .. })));
    }

    #[test]
    fn attention_matches_matrix_reference() {
        use nalgebra::DMatrix;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, d) = (6, 64);
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (q, k, v) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
        let (out, _) = attention(&q, &k, &v);
        let mat = |r: &Vec<Vec<f64>>| DMatrix::from_fn(m, d, |i, j| r[i][j]);
        let s = mat(&q) * mat(&k).transpose() / 8.0;
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            let mx = s.row(i).max();
            let e: Vec<f64> = (0..m).map(|j| (s[(i, j)] - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                a[(i, j)] = e[j] / z;
            }
        }
        let reference = a * mat(&v);
        for i in 0..m {
            for j in 0..d {
                assert!((out[i][j] - reference[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_symmetry_and_equivariance() {
        let t = tiny_teacher(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_map(&mut rng, [2, 6, 6]);
        let same = t.scores(&[&f, &f, &f, &f]).unwrap();
        assert!(same.iter().all(|s| (s - same[0]).abs() < 1e-12));
        let maps: Vec<FeatureMap> = (0..5).map(|_| random_map(&mut rng, [2, 6, 6])).collect();
        let base = t.scores(&maps.iter().collect::<Vec<_>>()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = t.scores(&perm.iter().map(|&i| &maps[i]).collect::<Vec<_>>()).unwrap();
        for (pos, &i) in perm.iter().enumerate() {
            assert!((permuted[pos] - base[i]).abs() < 1e-12);
        }
        let wrong = random_map(&mut rng, [3, 6, 6]);
        assert!(matches!(t.scores(&[&wrong]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn teacher_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = tiny_teacher(3);
        let maps: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, [2, 6, 6])).collect();
        let proj: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |t: &TeacherParams, maps: &[FeatureMap]| -> f64 {
            let s = t.scores(&maps.iter().collect::<Vec<_>>()).unwrap();
            softmax(&s).iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let (s, cache) = t.forward(&maps.iter().collect::<Vec<_>>()).unwrap();
        let ds = softmax_backward(&softmax(&s), &proj);
        let mut g = t.zeros_like();
        let dmaps = t.backward(&cache, &ds, &mut g, true);
        let flat = t.to_flat();
        let analytic = g.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut a = t.clone();
            let mut b = t.clone();
            let (mut fa, mut fb) = (flat.clone(), flat.clone());
            fa[i] += h;
            fb[i] -= h;
            a.set_flat(&fa);
            b.set_flat(&fb);
            let num = (loss(&a, &maps) - loss(&b, &maps)) / (2.0 * h);
            assert!(rel(num, analytic[i]) < 1e-4 || (num - analytic[i]).abs() < 1e-9, "param {i}: {num} vs {}", analytic[i]);
        }
        for v in 0..4 {
            for idx in [0, 17, 40, 71] {
                let mut a = maps.clone();
                let mut b = maps.clone();
                a[v].data[idx] += h;
                b[v].data[idx] -= h;
                let num = (loss(&t, &a) - loss(&t, &b)) / (2.0 * h);
                let an = dmaps[v].as_ref().unwrap().data[idx];
                assert!(rel(num, an) < 1e-4 || (num - an).abs() < 1e-9);
            }
        }
    }

    fn tiny_crop(rng: &mut ChaCha8Rng, size: usize, frame: FrameId) -> HandCrop {
        let intr = Intrinsics::new(40.0, 40.0, (size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0, size, size).unwrap();
        HandCrop {
            depth: DepthImage {
                width: size,
                height: size,
                values: (0..size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                intrinsics: intr,
                frame_id: frame,
            },
            center_mm: Vec3::new(0.0, 0.0, 400.0),
            cube_mm: 150.0,
            normalized: true,
        }
    }

    fn tiny_student(seed: u64) -> StudentParams {
        StudentParams::new(
            StudentConfig {
                crop_size: 48,
                channels: vec![2, 3, 3, 3],
                views: 5,
                // 3x3 map into overlapping 2x2 bins
                pool: 2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn student_gradients_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = tiny_student(4);
        for t in s.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let crop = tiny_crop(&mut rng, 48, FrameId::Original);
        let target: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..0.4)).collect();
        let a = student_confidence(&crop, &s).unwrap();
        assert_eq!(a, student_confidence(&crop, &s).unwrap());
        assert_eq!(a.len(), 5);
        let (out, cache) = s.forward(&crop).unwrap();
        let mut g = s.zeros_like();
        s.backward(&cache, &distill_loss_grad(&out, &target, 100.0), &mut g);
        let flat = s.to_flat();
        let analytic = g.to_flat();
        let loss = |p: &StudentParams| distill_loss(&student_confidence(&crop, p).unwrap(), &target, 100.0).unwrap();
        for i in (0..flat.len()).step_by(3) {
            let mut pa = s.clone();
            let mut pb = s.clone();
            let (mut fa, mut fb) = (flat.clone(), flat.clone());
            fa[i] += 1e-5;
            fb[i] -= 1e-5;
            pa.set_flat(&fa);
            pb.set_flat(&fb);
            let num = (loss(&pa) - loss(&pb)) / 2e-5;
            assert!(rel(num, analytic[i]) < 1e-4 || (num - analytic[i]).abs() < 1e-8, "{i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn zero_head_student_selects_lowest_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = StudentParams::new(StudentConfig::default(), 2).unwrap();
        s.fc.weight.data.fill(0.0);
        s.fc.bias.data.fill(0.0);
        let crop = tiny_crop(&mut rng, 176, FrameId::Original);
        let raw = student_confidence(&crop, &s).unwrap();
        assert_eq!(raw.len(), 25);
        assert_eq!(softmax_select(&raw, 3).unwrap().selected_ids, vec![0, 1, 2]);
    }

    /// Estimator that is exact on one marked view per frame and noisy elsewhere.
    struct MarkedEstimator;

    impl ViewEstimator for MarkedEstimator {
        fn feature_shape(&self) -> [usize; 3] {
            [2, 4, 4]
        }

        fn estimate_view(&self, input: &ViewInput<'_>) -> Result<EstimatorOutput> {
            let v = input.view;
            let marked = is_marked(input);
            let mut pose = transform_pose(input.gt_original.unwrap(), &v.from_original, v.frame_id());
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(input.sample_seed, v.id as u64));
            let mut f = FeatureMap::zeros(2, 4, 4);
            for x in &mut f.data[16..] {
                *x = rng.random_range(-1.0..1.0);
            }
            if marked {
                f.data[..16].fill(1.0);
            } else {
                for j in &mut pose.joints {
                    *j += Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
                }
            }
            Ok(EstimatorOutput {
                pose,
                feature: f,
                per_anchor: None,
            })
        }
    }

    fn marker(input: &ViewInput<'_>) -> usize {
        // the marked view id is stored in the crop's center x coordinate
        input.crop.center_mm.x as usize
    }

    fn is_marked(input: &ViewInput<'_>) -> bool {
        marker(input) == input.view.id
    }

    struct MarkedSource {
        n: usize,
        offset: u64,
    }

    impl BundleSource for MarkedSource {
        fn len(&self) -> usize {
            self.n
        }

        fn bundle(&self, index: usize) -> Result<ViewBundle> {
            let seed = self.offset + index as u64;
            let marked = (mix_seed(seed, 11) % 9) as usize;
            let views = sample_virtual_views(Vec3::new(0.0, 0.0, 400.0), 400.0, 3, 3, (-FRAC_PI_3, FRAC_PI_3), (-FRAC_PI_3, FRAC_PI_3))?;
            let intr = Intrinsics::new(10.0, 10.0, 0.0, 0.0, 1, 1)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crop = |frame| HandCrop {
                depth: DepthImage::zeros(intr, frame),
                center_mm: Vec3::new(marked as f64, 0.0, 400.0),
                cube_mm: 150.0,
                normalized: true,
            };
            let gt = HandPose {
                joints: (0..3)
                    .map(|_| Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(350.0..450.0)))
                    .collect(),
                frame_id: FrameId::Original,
            };
            Ok(ViewBundle {
                rendered: views.views.iter().map(|v| DepthImage::zeros(intr, v.frame_id())).collect(),
                crops: views.views.iter().map(|v| crop(v.frame_id())).collect(),
                original_crop: crop(FrameId::Original),
                views,
                gt_original: gt,
                seed,
            })
        }
    }

    #[test]
    fn teacher_learns_to_rank_the_exact_view_first() {
        let teacher = TeacherParams::new(
            TeacherConfig {
                in_shape: [2, 4, 4],
                channels: vec![4, 8, 16],
                attn_dim: 8,
            },
            5,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            lr: 1e-2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let train = MarkedSource { n: 48, offset: 0 };
        let est = MarkedEstimator;
        let before = joint_objective(&train.bundle(0).unwrap(), &JointEstimator::Frozen(&est), &teacher, &cfg, 1, None, None).unwrap();
        let res = train_teacher_joint(&train, JointEstimator::Frozen(&est), &teacher, &cfg).unwrap();
        assert!(res.estimator.is_none());
        assert!(res.logs[1].loss < res.logs[0].loss || res.logs.last().unwrap().loss < res.logs[0].loss);
        let after = joint_objective(&train.bundle(0).unwrap(), &JointEstimator::Frozen(&est), &res.teacher, &cfg, 1, None, None).unwrap();
        assert!(after.total < before.total);
        let held = MarkedSource { n: 40, offset: 10_000 };
        let mut hits = 0;
        for i in 0..held.len() {
            let b = held.bundle(i).unwrap();
            let outs: Vec<_> = (0..9).map(|v| est.estimate_view(&b.input(v, 3)).unwrap()).collect();
            let s = res.teacher.scores(&outs.iter().map(|o| &o.feature).collect::<Vec<_>>()).unwrap();
            let top = softmax_select(&s, 1).unwrap().selected_ids[0];
            if top == b.crops[0].center_mm.x as usize {
                hits += 1;
            }
        }
        assert!(hits * 10 >= held.len() * 8, "{hits}/{}", held.len());
    }

    #[test]
    fn joint_gradients_with_trainable_estimator() {
        let ecfg = EstimatorConfig {
            crop_size: 16,
            channels: vec![2, 2, 3, 3],
            joints: 3,
            feature_tap: 2,
        };
        let mut est = EstimatorParams::new(ecfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in est.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let teacher = TeacherParams::new(
            TeacherConfig {
                in_shape: ecfg.feature_shape(),
                channels: vec![2, 3, 4],
                attn_dim: 3,
            },
            3,
        )
        .unwrap();
        let mut bundle = MarkedSource { n: 1, offset: 5 }.bundle(0).unwrap();
        bundle.crops = bundle.views.views.iter().map(|v| tiny_crop(&mut rng, 16, v.frame_id())).collect();
        let cfg = TrainConfig::default();
        let eval = |e: &EstimatorParams, t: &TeacherParams| {
            joint_objective(&bundle, &JointEstimator::Trainable(e.clone()), t, &cfg, 0, None, None).unwrap().total
        };
        let mut tg = teacher.zeros_like();
        let mut eg = est.zeros_like();
        joint_objective(&bundle, &JointEstimator::Trainable(est.clone()), &teacher, &cfg, 0, Some(&mut tg), Some(&mut eg)).unwrap();
        let h = 1e-5;
        let tflat = teacher.to_flat();
        let ta = tg.to_flat();
        for i in (0..tflat.len()).step_by(7) {
            let (mut a, mut b) = (teacher.clone(), teacher.clone());
            let (mut fa, mut fb) = (tflat.clone(), tflat.clone());
            fa[i] += h;
            fb[i] -= h;
            a.set_flat(&fa);
            b.set_flat(&fb);
            let num = (eval(&est, &a) - eval(&est, &b)) / (2.0 * h);
            assert!(rel(num, ta[i]) < 1e-4 || (num - ta[i]).abs() < 1e-8, "teacher {i}: {num} vs {}", ta[i]);
        }
        let eflat = est.to_flat();
        let ea = eg.to_flat();
        for i in (0..eflat.len()).step_by(5) {
            let (mut a, mut b) = (est.clone(), est.clone());
            let (mut fa, mut fb) = (eflat.clone(), eflat.clone());
            fa[i] += h;
            fb[i] -= h;
            a.set_flat(&fa);
            b.set_flat(&fb);
            let num = (eval(&a, &teacher) - eval(&b, &teacher)) / (2.0 * h);
            assert!(rel(num, ea[i]) < 1e-4 || (num - ea[i]).abs() < 1e-8, "estimator {i}: {num} vs {}", ea[i]);
        }
    }

    #[test]
    fn frozen_estimator_is_untouched_and_student_overfits() {
        let ecfg = EstimatorConfig {
            crop_size: 16,
            channels: vec![2, 2, 3, 3],
            joints: 3,
            feature_tap: 2,
        };
        let est = EstimatorParams::new(ecfg.clone(), 1).unwrap();
        let snapshot = est.clone();
        let teacher = TeacherParams::new(
            TeacherConfig {
                in_shape: ecfg.feature_shape(),
                channels: vec![2, 3, 4],
                attn_dim: 3,
            },
            3,
        )
        .unwrap();
        struct Src {
            crop: usize,
        }
        impl BundleSource for Src {
            fn len(&self) -> usize {
                16
            }
            fn bundle(&self, i: usize) -> Result<ViewBundle> {
                let mut b = MarkedSource { n: 16, offset: 0 }.bundle(i)?;
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                b.crops = b.views.views.iter().map(|v| tiny_crop(&mut rng, self.crop, v.frame_id())).collect();
                b.original_crop = tiny_crop(&mut rng, 2 * self.crop, FrameId::Original);
                Ok(b)
            }
        }
        let src = Src { crop: 16 };
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let res = train_teacher_joint(&src, JointEstimator::Frozen(&est), &teacher, &cfg).unwrap();
        assert_eq!(est, snapshot);
        let teacher_snapshot = res.teacher.clone();
        let student = StudentParams::new(
            StudentConfig {
                crop_size: 32,
                channels: vec![4, 8, 8, 16],
                views: 9,
                pool: 0,
            },
            4,
        )
        .unwrap();
        let scfg = TrainConfig {
            epochs: 800,
            lr: 3e-3,
            decay: 0.993,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let samples = distill_samples(&src, &est, &res.teacher).unwrap();
        let (trained, _) = train_student_on(&samples, &student, &scfg).unwrap();
        let final_loss = mean_distill_loss(&samples, &trained, 100.0).unwrap();
        assert!(final_loss < 0.01, "{final_loss}");
        assert_eq!(res.teacher, teacher_snapshot);
        assert_eq!(est, snapshot);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selection_weights_are_a_distribution(raw in prop::collection::vec(-20.0f64..20.0, 1..30), n_frac in 0.0f64..1.0, shift in -50.0f64..50.0) {
                let n = 1 + ((raw.len() - 1) as f64 * n_frac) as usize;
                let c = softmax_select(&raw, n).unwrap();
                prop_assert_eq!(c.selected_ids.len(), n);
                prop_assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(c.weights.iter().all(|&w| w > 0.0));
                for w in c.weights.windows(2) {
                    prop_assert!(w[0] >= w[1]);
                }
                let shifted: Vec<f64> = raw.iter().map(|r| r + shift).collect();
                let d = softmax_select(&shifted, n).unwrap();
                prop_assert_eq!(&d.selected_ids, &c.selected_ids);
                for (a, b) in c.weights.iter().zip(&d.weights) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }

            #[test]
            fn distill_loss_nonnegative(s in prop::collection::vec(0.0f64..1.0, 1..30), noise in -0.1f64..0.1) {
                prop_assert_eq!(distill_loss(&s, &s, 100.0).unwrap(), 0.0);
                let t: Vec<f64> = s.iter().map(|x| x + noise).collect();
                prop_assert!(distill_loss(&s, &t, 100.0).unwrap() >= 0.0);
            }
        }
    }
}
