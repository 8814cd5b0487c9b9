//! Command-line front end: `bevis gen|train|infer|eval|render`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bevis::config::Config;
use bevis::pipeline::{self, PipelineConfig};
use bevis::Result;

/// Environment variable that sets the number of worker threads.
const WORKERS_ENV: &str = "BEVIS_NUM_WORKERS";

#[derive(Parser)]
#[command(name = "bevis", version, about = "Bird's-eye-view instance segmentation of point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines, `include = file`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Stage {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/val/test manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 2D network, then the 3D network with the 2D one frozen.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
    /// Segment scenes: writes `<scene>.pred.txt` and `<scene>.bevpc`.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or a single `.bevpc` file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifest split to run on when `--data` is a directory.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write PPM renders.
        #[arg(long)]
        render: bool,
    },
    /// Score predictions against ground truth; exits 1 when configured
    /// thresholds are not met.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory with predictions (or a labeled dataset).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// Directory for `metrics.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Manifest split to score (`all` for every scene).
        #[arg(long)]
        split: Option<String>,
    },
    /// Render the bird's-eye view of one scene (and 2D embeddings with `--ckpt`).
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<PipelineConfig> {
    let mut c = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bevis::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        c.set("seed", s);
    }
    for (k, v) in extra {
        c.set(k, v);
    }
    PipelineConfig::from_config(&c)
}

fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| bevis::Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| bevis::Error::Config(format!("thread pool: {e}")))
}

fn print_summary(stage: &str, s: &pipeline::TrainSummary) {
    println!(
        "{stage}: {} steps, best step {}, val loss {}, {:.1}s -> {}",
        s.steps,
        s.best_step,
        s.best_val_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
        s.seconds,
        s.checkpoint.display()
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_workers()?;
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common, &[])?;
            let entries = pipeline::cmd_gen(&cfg, &out)?;
            println!("wrote {} scenes to {}", entries.len(), out.display());
        }
        Command::Train {
            common,
            data,
            out,
            stage,
        } => {
            let cfg = load_config(&common, &[])?;
            if stage != Stage::ThreeD {
                print_summary("2d", &pipeline::cmd_train_2d(&cfg, &data, &out)?);
            }
            if stage != Stage::TwoD {
                print_summary("3d", &pipeline::cmd_train_3d(&cfg, &data, &out)?);
            }
        }
        Command::Infer {
            common,
            data,
            ckpt,
            out,
            split,
            render,
        } => {
            let cfg = load_config(&common, &[])?;
            let names = pipeline::cmd_infer(&cfg, &data, &ckpt, &out, &split, render)?;
            println!("segmented {} scenes into {}", names.len(), out.display());
        }
        Command::Eval {
            common,
            pred,
            gt,
            out,
            split,
        } => {
            let extra: Vec<(&str, String)> = split.into_iter().map(|s| ("eval.split", s)).collect();
            let cfg = load_config(&common, &extra)?;
            let outcome = pipeline::cmd_eval(&cfg, &pred, &gt, out.as_deref())?;
            print!("{}", outcome.csv());
            println!();
            print!("{}", outcome.overall.table(&pipeline::class_names()));
            if !outcome.failures.is_empty() {
                for f in &outcome.failures {
                    eprintln!("threshold not met: {f}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Render {
            common,
            scene,
            ckpt,
            out,
        } => {
            let cfg = load_config(&common, &[])?;
            pipeline::cmd_render(&cfg, &scene, ckpt.as_deref().map(Path::new), &out)?;
            println!("renders written to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
