//! The run configuration: one JSON file holding every module's settings,
//! with command-line flags layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use virtview::confidence::{StudentConfig, TeacherConfig, TrainConfig};
use virtview::estimator::{EstimatorConfig, OracleEstimator, TrainSchedule, ViewEstimator};
use virtview::fusion::{Mode, PipelineConfig};
use virtview::geometry::Intrinsics;
use virtview::metrics::default_thresholds;
use virtview::seed::mix_seed;
use virtview::synthdata::{default_camera, AugmentConfig, PoseSampler, SynthHandSpec};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every seed used by a command.
    pub seed: u64,
    /// Worker threads; falls back to the logical core count.
    pub threads: Option<usize>,
    pub paths: Paths,
    pub synth: SynthSection,
    pub pipeline: PipelineConfig,
    pub estimator: EstimatorSection,
    pub teacher: Option<TeacherConfig>,
    pub student: StudentConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub render: RenderSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            paths: Paths::default(),
            synth: SynthSection::default(),
            pipeline: PipelineConfig::default(),
            estimator: EstimatorSection::default(),
            teacher: None,
            student: StudentConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            render: RenderSection::default(),
        }
    }
}

/// Paths are taken relative to the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub frames: usize,
    pub hand: SynthHandSpec,
    pub sampler: PoseSampler,
    pub camera: Intrinsics,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            frames: 100,
            hand: SynthHandSpec::default(),
            sampler: PoseSampler::Uniform,
            camera: default_camera(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Ground-truth plus occlusion-dependent noise; needs labeled frames.
    Oracle,
    /// The anchor-based network, loaded from a checkpoint.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub kind: EstimatorKind,
    pub oracle: OracleEstimator,
    pub learned: EstimatorConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Oracle,
            oracle: OracleEstimator::default(),
            learned: EstimatorConfig::default(),
        }
    }
}

impl EstimatorSection {
    pub fn feature_shape(&self) -> [usize; 3] {
        match self.kind {
            EstimatorKind::Oracle => self.oracle.feature_shape(),
            EstimatorKind::Learned => self.learned.feature_shape(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Estimator,
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stages: Vec<Stage>,
    pub estimator: TrainSchedule,
    /// Lattice views rendered per frame for estimator-only training.
    pub views_per_frame: usize,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    /// Unlabeled synthetic frames added to the distillation set.
    pub distill_extra_frames: usize,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Estimator, Stage::Teacher, Stage::Student],
            estimator: TrainSchedule::default(),
            views_per_frame: 5,
            teacher: TrainConfig {
                epochs: 4,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            student: TrainConfig {
                epochs: 20,
                lr: 2e-3,
                decay: 0.97,
                ..TrainConfig::default()
            },
            distill_extra_frames: 0,
            augment: None,
        }
    }
}

/// One point of an evaluation or benchmark grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub mode: Mode,
    pub n: usize,
    #[serde(default)]
    pub weighted: bool,
}

pub fn grid(modes: &[Mode], ns: &[usize], weighted: bool) -> Vec<GridPoint> {
    modes
        .iter()
        .flat_map(|&mode| ns.iter().map(move |&n| GridPoint { mode, n, weighted }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub grid: Vec<GridPoint>,
    pub thresholds: Vec<f64>,
    /// Only the first this many frames are scored.
    pub max_frames: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            grid: grid(&[Mode::Uniform], &[1, 3, 9, 15, 25], false),
            thresholds: default_thresholds(),
            max_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub grid: Vec<GridPoint>,
    pub repetitions: usize,
    pub max_frames: Option<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            grid: vec![
                GridPoint {
                    mode: Mode::Uniform,
                    n: 25,
                    weighted: false,
                },
                GridPoint {
                    mode: Mode::SelectLight,
                    n: 3,
                    weighted: true,
                },
            ],
            repetitions: 3,
            max_frames: Some(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    /// Dataset frames to render.
    pub frames: Vec<usize>,
    pub pgm: bool,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            frames: vec![0],
            pgm: true,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn thread_count(&self) -> usize {
        self.threads.unwrap_or_else(virtview::parallel::default_threads)
    }

    /// Pipeline settings for one grid point, with the run seed folded in.
    pub fn pipeline_for(&self, p: &GridPoint) -> PipelineConfig {
        PipelineConfig {
            mode: p.mode,
            n: p.n,
            weighted: p.weighted,
            threads: self.thread_count(),
            seed: mix_seed(self.seed, self.pipeline.seed),
            ..self.pipeline.clone()
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        self.teacher
            .clone()
            .unwrap_or_else(|| TeacherConfig::for_features(self.estimator.feature_shape()))
    }

    /// Range checks that need no files.
    pub fn validate(&self) -> Result<(), Failure> {
        if self.threads == Some(0) {
            return Err(config_err("threads must be at least 1"));
        }
        self.synth.hand.validate().map_err(config_err)?;
        if self.synth.frames == 0 {
            return Err(config_err("synth.frames must be at least 1"));
        }
        self.pipeline.validate().map_err(config_err)?;
        self.estimator.oracle.noise.validate().map_err(config_err)?;
        self.estimator.learned.validate().map_err(config_err)?;
        if self.estimator.kind == EstimatorKind::Learned
            && self.estimator.learned.crop_size != self.pipeline.views.crop.crop_size
        {
            return Err(config_err(format!(
                "estimator crop size {} differs from pipeline crop size {}",
                self.estimator.learned.crop_size, self.pipeline.views.crop.crop_size
            )));
        }
        let tc = self.teacher_config();
        tc.validate().map_err(config_err)?;
        if tc.in_shape != self.estimator.feature_shape() {
            return Err(config_err(format!(
                "teacher expects features {:?}, estimator produces {:?}",
                tc.in_shape,
                self.estimator.feature_shape()
            )));
        }
        self.student.validate().map_err(config_err)?;
        if self.student.crop_size != self.pipeline.views.crop.crop_size {
            return Err(config_err(format!(
                "student crop size {} differs from pipeline crop size {}",
                self.student.crop_size, self.pipeline.views.crop.crop_size
            )));
        }
        if self.student.views != self.pipeline.views.m() {
            return Err(config_err(format!(
                "student scores {} views, lattice has {}",
                self.student.views,
                self.pipeline.views.m()
            )));
        }
        self.train.teacher.validate().map_err(config_err)?;
        self.train.student.validate().map_err(config_err)?;
        let m = self.pipeline.views.m();
        if self.train.views_per_frame == 0 || self.train.views_per_frame > m {
            return Err(config_err(format!("train.views_per_frame must be in 1..={m}")));
        }
        if let Some(a) = &self.train.augment {
            a.validate().map_err(config_err)?;
        }
        for p in self.eval.grid.iter().chain(&self.bench.grid) {
            self.pipeline_for(p).validate().map_err(config_err)?;
        }
        if self.eval.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(config_err("eval thresholds must be finite"));
        }
        if self.bench.repetitions < 3 {
            return Err(config_err("bench.repetitions must be at least 3"));
        }
        if self.eval.max_frames == Some(0) || self.bench.max_frames == Some(0) {
            return Err(config_err("max_frames must be at least 1"));
        }
        Ok(())
    }
}

/// Networks a grid point needs besides the estimator.
pub fn needs(p: &GridPoint) -> (bool, bool) {
    let teacher = p.mode == Mode::SelectTeacher || (p.weighted && matches!(p.mode, Mode::Uniform | Mode::Random));
    (teacher, p.mode == Mode::SelectLight)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 5, "eval": {"grid": [{"mode": "random", "n": 1}]}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.eval.grid, vec![GridPoint { mode: Mode::Random, n: 1, weighted: false }]);
        assert_eq!(c.pipeline, PipelineConfig::default());
        assert!(RunConfig::from_json(r#"{"sede": 5}"#).is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut c = RunConfig::default();
        c.eval.grid = grid(&[Mode::Uniform], &[26], false);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.estimator.oracle.noise.base_sigma_mm = -1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.threads = Some(0);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.grid = grid(&[Mode::Random], &[40], false);
        c.validate().unwrap();
    }

    #[test]
    fn grid_is_a_cross_product() {
        let g = grid(&[Mode::Uniform, Mode::SelectTeacher], &[1, 3], true);
        assert_eq!(g.len(), 4);
        assert_eq!(g[3], GridPoint { mode: Mode::SelectTeacher, n: 3, weighted: true });
        assert_eq!(needs(&g[3]), (true, false));
        assert_eq!(needs(&GridPoint { mode: Mode::SelectLight, n: 3, weighted: true }), (false, true));
    }
}
