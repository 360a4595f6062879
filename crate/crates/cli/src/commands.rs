use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use virtview::checkpoint::Checkpointable;
use virtview::confidence::{
    distill_samples, train_student_on, train_teacher_joint, JointEstimator, StudentParams, TeacherParams,
};
use virtview::estimator::{train_estimator, EpochLog, EstimatorParams, TrainSchedule, ViewEstimator};
use virtview::fusion::{infer, jitter_views, view_crop_samples, FrameBundles, FrameInput, Models};
use virtview::geometry::{unproject, HandPose, Intrinsics, RigidTransform, Vec3};
use virtview::metrics::{bench_fps, config_hash, mean_joint_error_with, EvalReport, FpsReport};
use virtview::renderer::render_all;
use virtview::seed::mix_seed;
use virtview::synthdata::{augment, generate_dataset, Dataset, Frame};

use crate::config::{needs, EstimatorKind, GridPoint, RunConfig, Stage};
use crate::failure::{io_err, Failure};
use crate::pgm;

pub const ESTIMATOR_FILE: &str = "estimator.json";
pub const TEACHER_FILE: &str = "teacher.json";
pub const STUDENT_FILE: &str = "student.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

// sub-seeds derived from the run seed
const SEED_ESTIMATOR: u64 = 1;
const SEED_TEACHER: u64 = 2;
const SEED_STUDENT: u64 = 3;
const SEED_DISTILL_DATA: u64 = 4;
const SEED_VIEW_PICK: u64 = 5;

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn dataset_path(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let p = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| Failure::Config("no dataset path given (--dataset or paths.dataset)".into()))?;
    require_file(&p, "dataset")?;
    Ok(p)
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

/// Hash of everything that affects results; paths and thread count are left out.
fn result_hash(cfg: &RunConfig) -> Result<String, Failure> {
    let mut c = cfg.clone();
    c.paths = Default::default();
    c.threads = None;
    Ok(config_hash(&c)?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let s = &cfg.synth;
    let ds = generate_dataset(&s.hand, s.frames, &s.sampler, &s.camera, cfg.seed, cfg.thread_count())?;
    create_parent(out)?;
    ds.save(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    println!(
        "wrote {} frames ({}x{}, {} joints) to {}",
        ds.frames.len(),
        ds.header.intrinsics.width,
        ds.header.intrinsics.height,
        ds.header.joints,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ViewRecord {
    id: usize,
    zenith: f64,
    azimuth: f64,
    to_original: RigidTransform,
    file: Option<String>,
}

#[derive(Serialize)]
struct RenderRecord {
    frame: usize,
    seed: u64,
    center_mm: Vec3,
    radius_mm: f64,
    grid: Option<(usize, usize)>,
    intrinsics: Intrinsics,
    original: Option<String>,
    gt_original: HandPose,
    views: Vec<ViewRecord>,
}

pub fn render(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let path = dataset_path(cfg)?;
    let ds = load_dataset(&path)?;
    if let Some(&bad) = cfg.render.frames.iter().find(|&&i| i >= ds.frames.len()) {
        return Err(Failure::Config(format!("frame {bad} outside dataset of {} frames", ds.frames.len())));
    }
    let vcfg = &cfg.pipeline.views;
    for &idx in &cfg.render.frames {
        let frame = &ds.frames[idx];
        let dir = out.join(format!("frame_{idx:05}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let center = frame.centroid_mm;
        let mut views = vcfg.lattice(center, center.norm())?;
        jitter_views(&mut views, frame.meta.view_jitter);
        let intr = frame.depth.intrinsics;
        let mut rcfg = vcfg.render;
        rcfg.out_width = intr.width;
        rcfg.out_height = intr.height;
        let images = render_all(&unproject(&frame.depth)?, &views, &intr, &rcfg, cfg.thread_count())?;
        let pgm_name = |name: String| cfg.render.pgm.then_some(name);
        let original = pgm_name("original.pgm".into());
        if let Some(f) = &original {
            let p = dir.join(f);
            pgm::write(&p, &frame.depth).map_err(io_err(&p))?;
        }
        let mut records = Vec::with_capacity(views.len());
        for (v, img) in views.views.iter().zip(&images) {
            let file = pgm_name(format!("view_{:02}.pgm", v.id));
            if let Some(f) = &file {
                let p = dir.join(f);
                pgm::write(&p, img).map_err(io_err(&p))?;
            }
            records.push(ViewRecord {
                id: v.id,
                zenith: v.zenith,
                azimuth: v.azimuth,
                to_original: v.to_original,
                file,
            });
        }
        write_json(
            &dir.join("views.json"),
            &RenderRecord {
                frame: idx,
                seed: frame.meta.seed,
                center_mm: center,
                radius_mm: views.radius_mm,
                grid: views.grid,
                intrinsics: intr,
                original,
                gt_original: frame.gt.clone(),
                views: records,
            },
        )?;
        let valid: usize = images.iter().map(|d| d.values.iter().filter(|&&z| z > 0.0).count()).sum();
        println!(
            "frame {idx}: {} views, {:.0} valid pixels per view, written to {}",
            images.len(),
            valid as f64 / images.len() as f64,
            dir.display()
        );
    }
    Ok(())
}

struct TrainLog {
    file: fs::File,
    path: PathBuf,
}

impl TrainLog {
    fn create(path: PathBuf) -> Result<Self, Failure> {
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        Ok(Self { file, path })
    }

    fn record(&mut self, logs: &[EpochLog]) -> Result<(), Failure> {
        for l in logs {
            let line = serde_json::to_string(l).map_err(|e| Failure::Data(e.to_string()))?;
            writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
            let terms: String = l.terms.iter().map(|(k, v)| format!(" {k} {v:.4}")).collect();
            println!("{} epoch {:>3}  lr {:.2e}  loss {:.4}{terms}", l.stage, l.epoch, l.lr, l.loss);
        }
        Ok(())
    }
}

fn reseeded(seed: u64, c: &virtview::confidence::TrainConfig) -> virtview::confidence::TrainConfig {
    virtview::confidence::TrainConfig {
        seed: mix_seed(seed, c.seed),
        ..*c
    }
}

fn load_ckpt<T: Checkpointable>(path: &Path) -> Result<T, Failure> {
    T::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn save_ckpt<T: Checkpointable>(net: &T, path: &Path) -> Result<(), Failure> {
    net.save(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    println!("saved {}", path.display());
    Ok(())
}

/// Lattice views used to supervise frame `i`: `k` ids spread evenly from a
/// seeded start.
fn pick_views(seed: u64, i: usize, k: usize, m: usize) -> Vec<usize> {
    let start = (mix_seed(mix_seed(seed, SEED_VIEW_PICK), i as u64) % m as u64) as usize;
    (0..k).map(|j| (start + j * m / k) % m).collect()
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let path = dataset_path(cfg)?;
    let stages = &cfg.train.stages;
    let has = |s: Stage| stages.contains(&s);
    let learned = cfg.estimator.kind == EstimatorKind::Learned;
    let est_path = out.join(ESTIMATOR_FILE);
    let teacher_path = out.join(TEACHER_FILE);
    if learned && !has(Stage::Estimator) && (has(Stage::Teacher) || has(Stage::Student)) {
        require_file(&est_path, "estimator checkpoint")?;
    }
    if has(Stage::Student) && !has(Stage::Teacher) {
        require_file(&teacher_path, "teacher checkpoint")?;
    }
    let mut ds = load_dataset(&path)?;
    if let Some(a) = &cfg.train.augment {
        ds.frames = ds.frames.iter().map(|f| augment(f, a)).collect::<virtview::Result<Vec<Frame>>>()?;
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(io_err(&cfg_path))?;
    let mut log = TrainLog::create(out.join(TRAIN_LOG_FILE))?;
    let threads = cfg.thread_count();
    let vcfg = &cfg.pipeline.views;
    let frames = &ds.frames;

    let mut estimator: Option<EstimatorParams> = None;
    if learned {
        if has(Stage::Estimator) {
            let m = vcfg.m();
            let mut samples = Vec::new();
            for (i, f) in frames.iter().enumerate() {
                let ids = pick_views(cfg.seed, i, cfg.train.views_per_frame, m);
                samples.extend(view_crop_samples(f, vcfg, &ids, threads)?);
            }
            let init = EstimatorParams::new(cfg.estimator.learned.clone(), mix_seed(cfg.seed, SEED_ESTIMATOR))?;
            let schedule = TrainSchedule {
                seed: mix_seed(cfg.seed, cfg.train.estimator.seed),
                ..cfg.train.estimator
            };
            let (params, logs) = train_estimator(&samples, &init, &schedule)?;
            log.record(&logs)?;
            save_ckpt(&params, &est_path)?;
            estimator = Some(params);
        } else if has(Stage::Teacher) || has(Stage::Student) {
            estimator = Some(load_ckpt(&est_path)?);
        }
    } else if has(Stage::Estimator) {
        println!("estimator stage skipped: the oracle estimator has no parameters");
    }

    let source = FrameBundles {
        frames,
        views: vcfg.clone(),
        threads,
    };
    let mut teacher: Option<TeacherParams> = None;
    if has(Stage::Teacher) {
        let init = TeacherParams::new(cfg.teacher_config(), mix_seed(cfg.seed, SEED_TEACHER))?;
        let joint_est = match &estimator {
            Some(p) => JointEstimator::Trainable(p.clone()),
            None => JointEstimator::Frozen(&cfg.estimator.oracle),
        };
        let res = train_teacher_joint(&source, joint_est, &init, &reseeded(cfg.seed, &cfg.train.teacher))?;
        log.record(&res.logs)?;
        save_ckpt(&res.teacher, &teacher_path)?;
        if let Some(p) = res.estimator {
            save_ckpt(&p, &est_path)?;
            estimator = Some(p);
        }
        teacher = Some(res.teacher);
    }

    if has(Stage::Student) {
        let teacher = match teacher {
            Some(t) => t,
            None => load_ckpt(&teacher_path)?,
        };
        let est: &dyn ViewEstimator = match &estimator {
            Some(p) => p,
            None => &cfg.estimator.oracle,
        };
        let mut samples = distill_samples(&source, est, &teacher)?;
        if cfg.train.distill_extra_frames > 0 {
            let s = &cfg.synth;
            let extra = generate_dataset(
                &s.hand,
                cfg.train.distill_extra_frames,
                &s.sampler,
                &ds.header.intrinsics,
                mix_seed(cfg.seed, SEED_DISTILL_DATA),
                threads,
            )?;
            let extra_src = FrameBundles {
                frames: &extra.frames,
                views: vcfg.clone(),
                threads,
            };
            samples.extend(distill_samples(&extra_src, est, &teacher)?);
        }
        let init = StudentParams::new(cfg.student.clone(), mix_seed(cfg.seed, SEED_STUDENT))?;
        let (student, logs) = train_student_on(&samples, &init, &reseeded(cfg.seed, &cfg.train.student))?;
        log.record(&logs)?;
        save_ckpt(&student, &out.join(STUDENT_FILE))?;
    }
    Ok(())
}

/// Networks loaded for a grid of pipeline runs.
struct Loaded {
    estimator: Option<EstimatorParams>,
    teacher: Option<TeacherParams>,
    student: Option<StudentParams>,
}

impl Loaded {
    fn load(cfg: &RunConfig, grid: &[GridPoint]) -> Result<Self, Failure> {
        let (need_t, need_s) = grid
            .iter()
            .map(needs)
            .fold((false, false), |a, b| (a.0 || b.0, a.1 || b.1));
        let learned = cfg.estimator.kind == EstimatorKind::Learned;
        let dir = if learned || need_t || need_s {
            Some(cfg.paths.checkpoints.clone().ok_or_else(|| {
                Failure::Config("no checkpoint directory given (--checkpoints or paths.checkpoints)".into())
            })?)
        } else {
            None
        };
        let file = |name: &str, wanted: bool| -> Result<Option<PathBuf>, Failure> {
            match (&dir, wanted) {
                (Some(d), true) => {
                    let p = d.join(name);
                    require_file(&p, "checkpoint")?;
                    Ok(Some(p))
                }
                _ => Ok(None),
            }
        };
        let (ep, tp, sp) = (file(ESTIMATOR_FILE, learned)?, file(TEACHER_FILE, need_t)?, file(STUDENT_FILE, need_s)?);
        let out = Self {
            estimator: ep.map(|p| load_ckpt(&p)).transpose()?,
            teacher: tp.map(|p| load_ckpt(&p)).transpose()?,
            student: sp.map(|p| load_ckpt(&p)).transpose()?,
        };
        let shape = match &out.estimator {
            Some(e) => e.feature_shape(),
            None => cfg.estimator.oracle.feature_shape(),
        };
        if let Some(t) = &out.teacher {
            if t.config.in_shape != shape {
                return Err(Failure::Config(format!(
                    "teacher checkpoint expects features {:?}, estimator produces {shape:?}",
                    t.config.in_shape
                )));
            }
        }
        if let Some(s) = &out.student {
            let v = &cfg.pipeline.views;
            if s.config.views != v.m() || s.config.crop_size != v.crop.crop_size {
                return Err(Failure::Config(format!(
                    "student checkpoint scores {} views of {} px crops, pipeline has {} views of {} px",
                    s.config.views,
                    s.config.crop_size,
                    v.m(),
                    v.crop.crop_size
                )));
            }
        }
        Ok(out)
    }

    fn models<'a>(&'a self, cfg: &'a RunConfig) -> Models<'a> {
        Models {
            estimator: match &self.estimator {
                Some(p) => p,
                None => &cfg.estimator.oracle,
            },
            teacher: self.teacher.as_ref(),
            student: self.student.as_ref(),
        }
    }
}

fn limited(frames: Vec<Frame>, max: Option<usize>) -> Vec<Frame> {
    match max {
        Some(k) => frames.into_iter().take(k).collect(),
        None => frames,
    }
}

#[derive(Serialize)]
struct GridResult<T> {
    mode: String,
    n: usize,
    weighted: bool,
    report: T,
}

#[derive(Serialize)]
struct GridReport<T> {
    config_hash: String,
    estimator: EstimatorKind,
    n_frames: usize,
    runs: Vec<GridResult<T>>,
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let path = dataset_path(cfg)?;
    let nets = Loaded::load(cfg, &cfg.eval.grid)?;
    let frames = limited(load_dataset(&path)?.frames, cfg.eval.max_frames);
    let models = nets.models(cfg);
    let gts: Vec<HandPose> = frames.iter().map(|f| f.gt.clone()).collect();
    let mut runs = Vec::with_capacity(cfg.eval.grid.len());
    for p in &cfg.eval.grid {
        let pc = cfg.pipeline_for(p);
        let preds = frames
            .iter()
            .map(|f| infer(FrameInput::from(f), &pc, models).map(|r| r.pose))
            .collect::<virtview::Result<Vec<_>>>()?;
        let report: EvalReport = mean_joint_error_with(&preds, &gts, &cfg.eval.thresholds)?;
        println!(
            "{:<15} N={:<3} {}  mean error {:.3} mm",
            p.mode.to_string(),
            p.n,
            if p.weighted { "weighted" } else { "averaged" },
            report.mean_joint_error_mm
        );
        runs.push(GridResult {
            mode: p.mode.to_string(),
            n: p.n,
            weighted: p.weighted,
            report,
        });
    }
    let report = GridReport {
        config_hash: result_hash(cfg)?,
        estimator: cfg.estimator.kind,
        n_frames: frames.len(),
        runs,
    };
    create_parent(out)?;
    write_json(out, &report)?;
    let mut csv = String::from("mode,n,weighted,threshold_mm,fraction\n");
    for r in &report.runs {
        for (t, f) in &r.report.success_curve {
            csv.push_str(&format!("{},{},{},{t},{f}\n", r.mode, r.n, r.weighted));
        }
    }
    let csv_path = out.with_extension("csv");
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let path = dataset_path(cfg)?;
    let nets = Loaded::load(cfg, &cfg.bench.grid)?;
    let frames = limited(load_dataset(&path)?.frames, cfg.bench.max_frames);
    let models = nets.models(cfg);
    let mut runs = Vec::with_capacity(cfg.bench.grid.len());
    for p in &cfg.bench.grid {
        let report: FpsReport = bench_fps(&cfg.pipeline_for(p), models, &frames, cfg.bench.repetitions)?;
        println!(
            "{:<15} N={:<3} {:>8.2} fps  (render {:.1} ms, estimate {:.1} ms, confidence {:.1} ms per frame, {} threads)",
            p.mode.to_string(),
            p.n,
            report.frames_per_second,
            report.render_s * 1e3,
            report.estimate_s * 1e3,
            report.confidence_s * 1e3,
            report.thread_count
        );
        runs.push(GridResult {
            mode: p.mode.to_string(),
            n: p.n,
            weighted: p.weighted,
            report,
        });
    }
    create_parent(out)?;
    write_json(
        out,
        &GridReport {
            config_hash: result_hash(cfg)?,
            estimator: cfg.estimator.kind,
            n_frames: frames.len(),
            runs,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_picks_are_distinct_and_in_range() {
        for i in 0..50 {
            let ids = pick_views(9, i, 5, 25);
            let mut s = ids.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 5);
            assert!(ids.iter().all(|&v| v < 25));
        }
    }
}
