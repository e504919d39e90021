use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use resdistill::distill::RegimeKind;
use resdistill_cli::commands;
use resdistill_cli::config::ExperimentConfig;

/// Cross-resolution teacher-student experiments on FCN embedding networks.
#[derive(Parser)]
#[command(name = "resdistill", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding run.output_dir.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Training seed, overriding train.seed and ladder.seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overwrite an output directory left by an earlier run.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher at train.teacher_resolution.
    TrainTeacher,
    /// Train one student at train.student_resolution.
    TrainStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        regime: RegimeKind,
    },
    /// Teacher plus every (resolution, regime) student, over ladder.seeds.
    Ladder,
    /// Write per-image embeddings and fused per-identity templates.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input resolution; defaults to train.teacher_resolution.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Evaluate a checkpoint on the open-set protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input resolution; defaults to train.teacher_resolution.
        #[arg(long)]
        resolution: Option<usize>,
        /// Regime column written to the metric rows.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Analytic compute and memory per resolution.
    Cost,
    /// Finite-difference gradient checks; fails above tolerance.
    Gradcheck,
    /// Rebuild tables from an earlier run's metrics.csv.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::parse("", std::path::Path::new("<defaults>"))?,
    };
    if let Some(dir) = &common.output {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.ladder.seeds = vec![seed];
    }
    Ok(cfg)
}

fn init_logging() {
    let level = match std::env::var("RD_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr).init();
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs).build_global().context("cannot start worker threads")?;
    let cfg = load_config(&cli.common)?;
    let force = cli.common.force;
    let teacher_res = cfg.train.teacher_resolution;
    match cli.command {
        Command::TrainTeacher => commands::train_teacher_cmd(&cfg, force),
        Command::TrainStudent { teacher, regime } => commands::train_student_cmd(&cfg, &teacher, regime, force),
        Command::Ladder => commands::ladder_cmd(&cfg, force),
        Command::Extract { checkpoint, resolution } => {
            commands::extract_cmd(&cfg, &checkpoint, resolution.unwrap_or(teacher_res), force)
        }
        Command::Evaluate { checkpoint, resolution, label } => {
            commands::evaluate_cmd(&cfg, &checkpoint, resolution.unwrap_or(teacher_res), &label, force)
        }
        Command::Cost => commands::cost_cmd(&cfg, force),
        Command::Gradcheck => commands::gradcheck_cmd(&cfg, force),
        Command::Report { input } => commands::report_cmd(&cfg, &input, force),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
