//! Rigid fusion of per-view poses and the end-to-end inference pipeline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{
    softmax_select, student_confidence, student_scores_to_logits, BundleSource, ConfidenceVector, StudentParams,
    TeacherParams, ViewBundle,
};
use crate::error::{Error, Result};
use crate::estimator::{CropSample, EstimatorOutput, ViewEstimator, ViewInput};
use crate::geometry::{
    centroid, check_frame, make_view, sample_virtual_views, transform_pose, uniform_subset, unproject, DepthImage, FrameId, HandPose,
    Intrinsics, PointCloud, RigidTransform, Vec3, VirtualView, VirtualViewSet,
};
use crate::nn::FeatureMap;
use crate::parallel::ordered_map;
use crate::renderer::{crop_hand, render_depth, CropConfig, HandCrop, RenderConfig};
use crate::synthdata::Frame;

/// `Σ_i w_i (R_i P_i + t_i)` over the selected views, in the original frame.
pub fn fuse_poses(poses: &[HandPose], conf: &ConfidenceVector, views: &VirtualViewSet) -> Result<HandPose> {
    let n = conf.selected_ids.len();
    if poses.len() != n || conf.weights.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: poses.len(),
        });
    }
    if n == 0 {
        return Err(Error::Invalid("nothing to fuse".into()));
    }
    let k = poses[0].len();
    let mut joints = vec![Vec3::zeros(); k];
    for ((pose, &id), &w) in poses.iter().zip(&conf.selected_ids).zip(&conf.weights) {
        let view = views
            .views
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("view id {id} outside 0..{}", views.len())))?;
        check_frame(view.frame_id(), pose.frame_id)?;
        if pose.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                got: pose.len(),
            });
        }
        for (acc, j) in joints.iter_mut().zip(&pose.joints) {
            *acc += view.to_original.apply(j) * w;
        }
    }
    Ok(HandPose {
        joints,
        frame_id: FrameId::Original,
    })
}

/// Uniform weights over the given view ids.
pub fn uniform_confidence(ids: &[usize], m: usize) -> ConfidenceVector {
    ConfidenceVector {
        raw: vec![0.0; m],
        selected_ids: ids.to_vec(),
        weights: vec![1.0 / ids.len().max(1) as f64; ids.len()],
    }
}

/// Plain mean of the poses after moving them to the original frame.
pub fn average_fuse(poses: &[HandPose], views: &VirtualViewSet) -> Result<HandPose> {
    let ids = poses
        .iter()
        .map(|p| match p.frame_id {
            FrameId::View(id) => Ok(id),
            FrameId::Original => Err(Error::FrameMismatch {
                expected: "view/*".into(),
                got: "original".into(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_poses(poses, &uniform_confidence(&ids, views.len()), views)
}

/// `n` views with zenith and azimuth drawn independently and uniformly from
/// the ranges.
pub fn random_views(
    center_mm: Vec3,
    radius_mm: f64,
    n: usize,
    zenith_range: (f64, f64),
    azimuth_range: (f64, f64),
    seed: u64,
) -> Result<VirtualViewSet> {
    if n == 0 {
        return Err(Error::Invalid("random view count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = (0..n)
        .map(|id| {
            let z = rng.random_range(zenith_range.0..=zenith_range.1);
            let a = rng.random_range(azimuth_range.0..=azimuth_range.1);
            make_view(id, z, a, &center_mm, radius_mm)
        })
        .collect();
    Ok(VirtualViewSet {
        views,
        center_mm,
        radius_mm,
        grid: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Uniform,
    SelectTeacher,
    SelectLight,
    Random,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Mode::Uniform),
            "select_teacher" => Ok(Mode::SelectTeacher),
            "select_light" => Ok(Mode::SelectLight),
            "random" => Ok(Mode::Random),
            _ => Err(Error::Invalid(format!("unknown mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Uniform => "uniform",
            Mode::SelectTeacher => "select_teacher",
            Mode::SelectLight => "select_light",
            Mode::Random => "random",
        };
        f.write_str(s)
    }
}

/// Candidate-view lattice and rendering settings shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub zenith_range: (f64, f64),
    pub azimuth_range: (f64, f64),
    pub render: RenderConfig,
    pub crop: CropConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        let r = std::f64::consts::FRAC_PI_3;
        Self {
            grid_rows: 5,
            grid_cols: 5,
            zenith_range: (-r, r),
            azimuth_range: (-r, r),
            render: RenderConfig::default(),
            crop: CropConfig::default(),
        }
    }
}

impl ViewConfig {
    pub fn m(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.crop.validate()
    }

    pub fn lattice(&self, center: Vec3, radius: f64) -> Result<VirtualViewSet> {
        sample_virtual_views(center, radius, self.grid_rows, self.grid_cols, self.zenith_range, self.azimuth_range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub views: ViewConfig,
    pub n: usize,
    pub mode: Mode,
    /// Confidence-weighted fusion; plain averaging when false.
    pub weighted: bool,
    /// Custom uniform-subset mask of view ids.
    pub mask: Option<Vec<usize>>,
    pub threads: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            views: ViewConfig::default(),
            n: 3,
            mode: Mode::Uniform,
            weighted: false,
            mask: None,
            threads: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        let m = self.views.m();
        if self.n == 0 || (self.mode != Mode::Random && self.n > m) {
            return Err(Error::BadN { n: self.n, m });
        }
        if self.threads == 0 {
            return Err(Error::Invalid("thread count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Networks available to the pipeline.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub estimator: &'a dyn ViewEstimator,
    pub teacher: Option<&'a TeacherParams>,
    pub student: Option<&'a StudentParams>,
}

/// One input frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub depth: &'a DepthImage,
    /// Ground truth for oracle estimators; ignored otherwise.
    pub gt: Option<&'a HandPose>,
    pub seed: u64,
}

impl<'a> From<&'a Frame> for FrameInput<'a> {
    fn from(f: &'a Frame) -> Self {
        Self {
            depth: &f.depth,
            gt: Some(&f.gt),
            seed: f.meta.seed,
        }
    }
}

/// Wall time per stage in seconds, and work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub lift_s: f64,
    pub render_s: f64,
    pub estimate_s: f64,
    pub confidence_s: f64,
    pub fuse_s: f64,
    pub total_s: f64,
    pub render_calls: usize,
    pub estimate_calls: usize,
}

impl Timing {
    pub fn add(&mut self, o: &Timing) {
        self.lift_s += o.lift_s;
        self.render_s += o.render_s;
        self.estimate_s += o.estimate_s;
        self.confidence_s += o.confidence_s;
        self.fuse_s += o.fuse_s;
        self.total_s += o.total_s;
        self.render_calls += o.render_calls;
        self.estimate_calls += o.estimate_calls;
    }

    pub fn fps(&self, frames: usize) -> f64 {
        frames as f64 / self.total_s.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub pose: HandPose,
    pub confidence: ConfidenceVector,
    pub views: VirtualViewSet,
    pub timing: Timing,
}

#[allow(clippy::too_many_arguments)]
fn render_and_crop(
    cloud: &PointCloud,
    intr: &Intrinsics,
    views: &VirtualViewSet,
    ids: &[usize],
    center: &Vec3,
    cfg: &ViewConfig,
    threads: usize,
    calls: &AtomicUsize,
) -> Result<Vec<(DepthImage, HandCrop)>> {
    let mut render = cfg.render;
    render.out_width = intr.width;
    render.out_height = intr.height;
    ordered_map(ids.len(), threads, |i| {
        let view = &views.views[ids[i]];
        calls.fetch_add(1, Ordering::Relaxed);
        let img = render_depth(cloud, view, intr, &render)?;
        let c = view.from_original.apply(center);
        let crop = crop_hand(&img, &c, &cfg.crop)?;
        Ok((img, crop))
    })
    .into_iter()
    .collect()
}

/// Runs the full pipeline on one depth frame.
pub fn infer(input: FrameInput<'_>, cfg: &PipelineConfig, models: Models<'_>) -> Result<Inference> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timing = Timing::default();
    let cloud = unproject(input.depth)?;
    let center = centroid(&cloud)?;
    let radius = center.norm();
    let vcfg = &cfg.views;
    let intr = &input.depth.intrinsics;
    let views = match cfg.mode {
        Mode::Random => random_views(center, radius, cfg.n, vcfg.zenith_range, vcfg.azimuth_range, crate::seed::mix_seed(cfg.seed, input.seed))?,
        _ => vcfg.lattice(center, radius)?,
    };
    let m = views.len();
    timing.lift_s = start.elapsed().as_secs_f64();

    let mut light: Option<ConfidenceVector> = None;
    let ids: Vec<usize> = match cfg.mode {
        Mode::Uniform => uniform_subset(&views, cfg.n, cfg.mask.as_deref())?,
        Mode::SelectTeacher => (0..m).collect(),
        Mode::Random => (0..m).collect(),
        Mode::SelectLight => {
            let student = models
                .student
                .ok_or_else(|| Error::Invalid("select_light needs a student network".into()))?;
            let t = Instant::now();
            let crop = crop_hand(input.depth, &center, &vcfg.crop)?;
            let raw = student_confidence(&crop, student)?;
            if raw.len() != m {
                return Err(Error::LengthMismatch { expected: m, got: raw.len() });
            }
            let mut conf = softmax_select(&student_scores_to_logits(&raw), cfg.n)?;
            conf.raw = raw;
            timing.confidence_s += t.elapsed().as_secs_f64();
            let ids = conf.selected_ids.clone();
            light = Some(conf);
            ids
        }
    };

    let t = Instant::now();
    let render_calls = AtomicUsize::new(0);
    let rendered = render_and_crop(&cloud, intr, &views, &ids, &center, vcfg, cfg.threads, &render_calls)?;
    timing.render_s = t.elapsed().as_secs_f64();
    timing.render_calls = render_calls.load(Ordering::Relaxed);

    let t = Instant::now();
    let outs: Vec<EstimatorOutput> = ordered_map(ids.len(), cfg.threads, |i| {
        let (img, crop) = &rendered[i];
        models.estimator.estimate_view(&ViewInput {
            view: &views.views[ids[i]],
            rendered: img,
            crop,
            gt_original: input.gt,
            sample_seed: input.seed,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    timing.estimate_s = t.elapsed().as_secs_f64();
    timing.estimate_calls = outs.len();

    let t = Instant::now();
    let teacher_scores = |feats: Vec<&FeatureMap>| -> Result<Vec<f64>> {
        let teacher = models
            .teacher
            .ok_or_else(|| Error::Invalid(format!("mode {} needs a teacher network", cfg.mode)))?;
        teacher.scores(&feats)
    };
    let conf = match cfg.mode {
        Mode::SelectLight => {
            let mut c = light.expect("set above");
            if !cfg.weighted {
                c.weights = vec![1.0 / c.weights.len() as f64; c.weights.len()];
            }
            c
        }
        Mode::SelectTeacher => {
            let raw = teacher_scores(outs.iter().map(|o| &o.feature).collect())?;
            let mut c = softmax_select(&raw, cfg.n)?;
            if !cfg.weighted {
                c.weights = vec![1.0 / cfg.n as f64; cfg.n];
            }
            c
        }
        Mode::Uniform | Mode::Random => {
            if cfg.weighted {
                let local = teacher_scores(outs.iter().map(|o| &o.feature).collect())?;
                let sel = softmax_select(&local, ids.len())?;
                let mut raw = vec![0.0; m];
                for (&i, s) in ids.iter().zip(&local) {
                    raw[i] = *s;
                }
                ConfidenceVector {
                    raw,
                    selected_ids: sel.selected_ids.iter().map(|&j| ids[j]).collect(),
                    weights: sel.weights,
                }
            } else {
                uniform_confidence(&ids, m)
            }
        }
    };
    timing.confidence_s += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let poses: Vec<HandPose> = conf
        .selected_ids
        .iter()
        .map(|id| {
            let pos = ids.iter().position(|x| x == id).expect("selected views were estimated");
            outs[pos].pose.clone()
        })
        .collect();
    let pose = fuse_poses(&poses, &conf, &views)?;
    timing.fuse_s = t.elapsed().as_secs_f64();
    timing.total_s = start.elapsed().as_secs_f64();
    Ok(Inference {
        pose,
        confidence: conf,
        views,
        timing,
    })
}

/// Runs [`infer`] over a set of frames.
pub fn infer_all(frames: &[Frame], cfg: &PipelineConfig, models: Models<'_>) -> Result<(Vec<Inference>, Timing)> {
    let mut total = Timing::default();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let r = infer(f.into(), cfg, models)?;
        total.add(&r.timing);
        out.push(r);
    }
    Ok((out, total))
}

/// Rotation of every virtual camera about `center` by an axis-angle jitter.
pub fn jitter_views(views: &mut VirtualViewSet, jitter: [f64; 3]) {
    let axis = Vec3::from(jitter);
    let angle = axis.norm();
    if angle == 0.0 {
        return;
    }
    let r = RigidTransform::from_axis_angle(&(axis / angle), angle);
    let c = views.center_mm;
    let about_center = RigidTransform {
        rotation: r.rotation,
        translation: c - r.rotation * c,
    };
    for v in &mut views.views {
        let to = about_center.compose(&v.to_original);
        *v = VirtualView {
            to_original: to,
            from_original: to.inverse(),
            ..v.clone()
        };
    }
}

/// Renders every candidate view of a frame for training.
pub fn prepare_bundle(frame: &Frame, cfg: &ViewConfig, threads: usize) -> Result<ViewBundle> {
    let center = frame.centroid_mm;
    let mut views = cfg.lattice(center, center.norm())?;
    jitter_views(&mut views, frame.meta.view_jitter);
    let cloud = unproject(&frame.depth)?;
    let ids: Vec<usize> = (0..views.len()).collect();
    let calls = AtomicUsize::new(0);
    let (rendered, crops) = render_and_crop(&cloud, &frame.depth.intrinsics, &views, &ids, &center, cfg, threads, &calls)?
        .into_iter()
        .unzip();
    Ok(ViewBundle {
        original_crop: crop_hand(&frame.depth, &center, &cfg.crop)?,
        views,
        rendered,
        crops,
        gt_original: frame.gt.clone(),
        seed: frame.meta.seed,
    })
}

/// Supervised estimator crops of a frame seen through the lattice views `ids`.
pub fn view_crop_samples(frame: &Frame, cfg: &ViewConfig, ids: &[usize], threads: usize) -> Result<Vec<CropSample>> {
    let center = frame.centroid_mm;
    let mut views = cfg.lattice(center, center.norm())?;
    jitter_views(&mut views, frame.meta.view_jitter);
    if let Some(&bad) = ids.iter().find(|&&i| i >= views.len()) {
        return Err(Error::Invalid(format!("view id {bad} outside 0..{}", views.len())));
    }
    let cloud = unproject(&frame.depth)?;
    let calls = AtomicUsize::new(0);
    let out = render_and_crop(&cloud, &frame.depth.intrinsics, &views, ids, &center, cfg, threads, &calls)?;
    Ok(out
        .into_iter()
        .zip(ids)
        .map(|((_, crop), &i)| {
            let v = &views.views[i];
            CropSample {
                crop,
                gt: transform_pose(&frame.gt, &v.from_original, v.frame_id()),
            }
        })
        .collect())
}

/// Training bundles rendered on demand from frames.
pub struct FrameBundles<'a> {
    pub frames: &'a [Frame],
    pub views: ViewConfig,
    pub threads: usize,
}

impl BundleSource for FrameBundles<'_> {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn bundle(&self, index: usize) -> Result<ViewBundle> {
        prepare_bundle(&self.frames[index], &self.views, self.threads)
    }
}
