//! `virtview`: synthesize data, render views, train, evaluate and benchmark.

mod commands;
mod config;
mod failure;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use virtview::fusion::Mode;

use config::{grid, EstimatorKind, GridPoint, RunConfig, Stage};
use failure::Failure;

#[derive(Parser)]
#[command(name = "virtview", version, about = "Virtual-view hand pose experiments on synthetic depth data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering and training.
    #[arg(long, global = true, env = "VIRTVIEW_THREADS")]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Comma-separated modes: uniform, select_teacher, select_light, random.
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<Mode>>,
    /// Comma-separated view counts.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Confidence-weighted fusion instead of plain averaging.
    #[arg(long)]
    weighted: Option<bool>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory holding the trained checkpoints.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Use only the first frames of the dataset.
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth {
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Render the candidate views of dataset frames as 16-bit PGM images.
    Render {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated frame indices.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        /// Write only the view metadata.
        #[arg(long)]
        no_pgm: bool,
    },
    /// Train the estimator, the teacher jointly with it, then the student.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated subset of: estimator, teacher, student.
        #[arg(long, value_delimiter = ',', value_enum)]
        stages: Option<Vec<Stage>>,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorKind>,
    },
    /// Score the pipeline over a grid of modes and view counts.
    Eval {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Time the pipeline stages over a grid of modes and view counts.
    Bench {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

fn distinct<T: PartialEq + Copy>(it: impl Iterator<Item = T>) -> Vec<T> {
    let mut v = Vec::new();
    for x in it {
        if !v.contains(&x) {
            v.push(x);
        }
    }
    v
}

/// Replaces the grid when any of its flags is given; unset axes keep the
/// values found in the configured grid.
fn override_grid(g: &mut Vec<GridPoint>, a: &GridArgs) {
    if a.mode.is_none() && a.n.is_none() && a.weighted.is_none() {
        return;
    }
    let modes = a.mode.clone().unwrap_or_else(|| distinct(g.iter().map(|p| p.mode)));
    let ns = a.n.clone().unwrap_or_else(|| distinct(g.iter().map(|p| p.n)));
    let weighted = a.weighted.unwrap_or_else(|| g.first().is_some_and(|p| p.weighted));
    *g = grid(&modes, &ns, weighted);
}

fn apply_grid_args(cfg: &mut RunConfig, a: &GridArgs, bench: bool) {
    if let Some(k) = a.estimator {
        cfg.estimator.kind = k;
    }
    if let Some(p) = &a.dataset {
        cfg.paths.dataset = Some(p.clone());
    }
    if let Some(p) = &a.checkpoints {
        cfg.paths.checkpoints = Some(p.clone());
    }
    if bench {
        override_grid(&mut cfg.bench.grid, a);
        if a.max_frames.is_some() {
            cfg.bench.max_frames = a.max_frames;
        }
    } else {
        override_grid(&mut cfg.eval.grid, a);
        if a.max_frames.is_some() {
            cfg.eval.max_frames = a.max_frames;
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if common.out.is_some() {
        cfg.paths.out = common.out.clone();
    }
    let default_out = match &cli.command {
        Command::Synth { frames, .. } => {
            if let Some(f) = frames {
                cfg.synth.frames = *f;
            }
            "dataset.vvds"
        }
        Command::Render { dataset, frames, no_pgm } => {
            if dataset.is_some() {
                cfg.paths.dataset = dataset.clone();
            }
            if let Some(f) = frames {
                cfg.render.frames = f.clone();
            }
            if *no_pgm {
                cfg.render.pgm = false;
            }
            "render"
        }
        Command::Train { dataset, stages, estimator } => {
            if dataset.is_some() {
                cfg.paths.dataset = dataset.clone();
            }
            if let Some(s) = stages {
                cfg.train.stages = s.clone();
            }
            if let Some(k) = estimator {
                cfg.estimator.kind = *k;
            }
            "checkpoints"
        }
        Command::Eval { grid } => {
            apply_grid_args(&mut cfg, grid, false);
            "eval.json"
        }
        Command::Bench { grid, repetitions } => {
            apply_grid_args(&mut cfg, grid, true);
            if let Some(r) = repetitions {
                cfg.bench.repetitions = *r;
            }
            "bench.json"
        }
    };
    cfg.validate()?;
    let fallback = match cli.command {
        Command::Train { .. } => cfg.paths.checkpoints.clone(),
        _ => None,
    };
    let out = cfg.paths.out.clone().or(fallback).unwrap_or_else(|| PathBuf::from(default_out));
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &out),
        Command::Render { .. } => commands::render(&cfg, &out),
        Command::Train { .. } => commands::train(&cfg, &out),
        Command::Eval { .. } => commands::eval(&cfg, &out),
        Command::Bench { .. } => commands::bench(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(f) => f,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let f = Failure::Config(first.to_string());
            eprintln!("{}", f.line());
            return ExitCode::from(f.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
