//! Pose-error metrics and the throughput benchmark.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{infer, FrameInput, Models, PipelineConfig, Timing};
use crate::geometry::{check_frame, HandPose};
use crate::synthdata::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_joint_error_mm: f64,
    pub per_joint_error_mm: Vec<f64>,
    /// `(threshold_mm, fraction of frames whose worst joint is within it)`.
    pub success_curve: Vec<(f64, f64)>,
    pub n_frames: usize,
}

/// Default success thresholds, 0 to 80 mm in 1 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(f64::from).collect()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn success_csv(&self) -> String {
        let mut s = String::from("threshold_mm,fraction\n");
        for (t, f) in &self.success_curve {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

/// Per-frame, per-joint Euclidean distances.
pub fn joint_errors(preds: &[HandPose], gts: &[HandPose]) -> Result<Vec<Vec<f64>>> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            check_frame(g.frame_id, p.frame_id)?;
            if p.len() != g.len() {
                return Err(Error::LengthMismatch {
                    expected: g.len(),
                    got: p.len(),
                });
            }
            Ok(p.joints.iter().zip(&g.joints).map(|(a, b)| (a - b).norm()).collect())
        })
        .collect()
}

pub fn mean_joint_error_with(preds: &[HandPose], gts: &[HandPose], thresholds: &[f64]) -> Result<EvalReport> {
    let errs = joint_errors(preds, gts)?;
    let n = errs.len();
    if n == 0 {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    let k = errs[0].len();
    if errs.iter().any(|e| e.len() != k) {
        return Err(Error::Invalid("joint count differs between frames".into()));
    }
    let mut per_joint = vec![0.0; k];
    for e in &errs {
        for (acc, v) in per_joint.iter_mut().zip(e) {
            *acc += v;
        }
    }
    per_joint.iter_mut().for_each(|v| *v /= n as f64);
    let mean = per_joint.iter().sum::<f64>() / k.max(1) as f64;
    let worst: Vec<f64> = errs.iter().map(|e| e.iter().cloned().fold(0.0, f64::max)).collect();
    let success_curve = thresholds
        .iter()
        .map(|&t| (t, worst.iter().filter(|&&w| w <= t).count() as f64 / n as f64))
        .collect();
    Ok(EvalReport {
        mean_joint_error_mm: mean,
        per_joint_error_mm: per_joint,
        success_curve,
        n_frames: n,
    })
}

pub fn mean_joint_error(preds: &[HandPose], gts: &[HandPose]) -> Result<EvalReport> {
    mean_joint_error_with(preds, gts, &default_thresholds())
}

/// Runs the pipeline over frames and scores it against their labels.
pub fn evaluate(frames: &[Frame], cfg: &PipelineConfig, models: Models<'_>) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(frames.len());
    for f in frames {
        preds.push(infer(f.into(), cfg, models)?.pose);
    }
    let gts: Vec<HandPose> = frames.iter().map(|f| f.gt.clone()).collect();
    mean_joint_error(&preds, &gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    /// Median seconds per frame for each stage.
    pub lift_s: f64,
    pub render_s: f64,
    pub estimate_s: f64,
    pub confidence_s: f64,
    pub fuse_s: f64,
    pub total_s: f64,
    pub frames_per_second: f64,
    pub repetitions: usize,
    pub n_frames: usize,
    pub thread_count: usize,
    pub render_calls_per_frame: f64,
    pub estimate_calls_per_frame: f64,
    pub config_hash: String,
}

/// SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repetitions` passes over the frames after one untimed warm-up pass.
pub fn bench_fps(cfg: &PipelineConfig, models: Models<'_>, frames: &[Frame], repetitions: usize) -> Result<FpsReport> {
    if repetitions < 3 {
        return Err(Error::Invalid(format!("repetitions must be at least 3, got {repetitions}")));
    }
    if frames.is_empty() {
        return Err(Error::Invalid("no frames to benchmark".into()));
    }
    cfg.validate()?;
    let pass = || -> Result<Timing> {
        let mut t = Timing::default();
        for f in frames {
            t.add(&infer(FrameInput::from(f), cfg, models)?.timing);
        }
        Ok(t)
    };
    pass()?;
    let runs = (0..repetitions).map(|_| pass()).collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let med = |f: fn(&Timing) -> f64| median(runs.iter().map(|t| f(t) / n).collect());
    let total_s = med(|t| t.total_s);
    Ok(FpsReport {
        lift_s: med(|t| t.lift_s),
        render_s: med(|t| t.render_s),
        estimate_s: med(|t| t.estimate_s),
        confidence_s: med(|t| t.confidence_s),
        fuse_s: med(|t| t.fuse_s),
        total_s,
        frames_per_second: 1.0 / total_s.max(f64::MIN_POSITIVE),
        repetitions,
        n_frames: frames.len(),
        thread_count: cfg.threads,
        render_calls_per_frame: runs[0].render_calls as f64 / n,
        estimate_calls_per_frame: runs[0].estimate_calls as f64 / n,
        config_hash: config_hash(cfg)?,
    })
}
