use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use causal_flow::commands::{self, EvalSubject, StageSelection, TrainOptions};
use causal_flow::config::RunConfig;
use causal_flow::numerics::gradcheck::GradCheckConfig;
use causal_flow::planner::PlannerConfig;

#[derive(Parser)]
#[command(name = "causal-flow", version, about = "Toy causal-flow OCR pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and eval dataset snapshots.
    GenData,
    /// Train one stage (1, 2, 3) or all of them.
    Train {
        #[arg(long, default_value = "all")]
        stage: StageSelection,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint (or the echo stub) and write a report.
    Eval {
        #[arg(long, conflicts_with = "echo", required_unless_present = "echo")]
        checkpoint: Option<PathBuf>,
        /// Transcribe every sample as its own target.
        #[arg(long)]
        echo: bool,
        /// Dataset snapshot directory; the configured eval split otherwise.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Print the crop plan and token budget for a page.
    Plan {
        width: usize,
        height: usize,
        /// Use the full-size planner constants instead of the configured ones.
        #[arg(long)]
        paper_constants: bool,
    },
    /// Print the dual-stream mask for `m` visual and `n` query tokens.
    MaskDump { m: usize, n: usize },
    /// Finite-difference gradient check of the whole model in f64.
    GradCheck {
        #[arg(long, default_value_t = 64)]
        coords: usize,
    },
    /// Train and evaluate causal-flow against the raster baseline.
    Ablate,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan {
            width,
            height,
            paper_constants,
        } => {
            let planner = if paper_constants {
                PlannerConfig::paper()
            } else {
                load_config(&cli.common)?.model.planner
            };
            println!("{}", commands::plan_line(width, height, &planner)?);
        }
        Command::MaskDump { m, n } => print!("{}", commands::mask_dump(m, n)?),
        Command::GenData => {
            let cfg = load_config(&cli.common)?;
            let (train, eval) = commands::gen_data(&cfg)?;
            println!("train {}", train.display());
            println!("eval {}", eval.display());
        }
        Command::Train {
            stage,
            resume,
            max_steps,
        } => {
            let cfg = load_config(&cli.common)?;
            let opts = TrainOptions { resume, max_steps };
            let outcome = commands::train(&cfg, stage, &opts)?;
            if let Some(last) = outcome.records.last() {
                println!("{}", last.deterministic_line());
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("metrics {}", outcome.metrics_log.display());
        }
        Command::Eval {
            checkpoint,
            echo,
            dataset,
        } => {
            let cfg = load_config(&cli.common)?;
            let subject = match checkpoint {
                Some(path) if !echo => EvalSubject::Checkpoint(path),
                _ => EvalSubject::Echo,
            };
            let (report, path) = commands::eval(&cfg, &subject, dataset.as_deref())?;
            let text = report.to_text();
            for line in text.lines().filter(|l| l.starts_with("aggregate")) {
                println!("{line}");
            }
            println!("report {}", path.display());
        }
        Command::GradCheck { coords } => {
            let cfg = load_config(&cli.common)?;
            let check = GradCheckConfig {
                coords_per_group: coords,
                seed: cfg.seed,
                ..GradCheckConfig::default()
            };
            let report = commands::grad_check_model(&cfg, &check)?;
            for g in &report.groups {
                println!("group={} coords={} max_rel_err={:e}", g.group, g.coords, g.max_rel_err);
            }
            println!("max_rel_err={:e}", report.max_rel_err());
        }
        Command::Ablate => {
            let cfg = load_config(&cli.common)?;
            let arms = commands::ablate(&cfg).context("ablation run")?;
            print!("{}", commands::ablation_summary(&arms));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<causal_flow::Error>())
                .map_or("other", causal_flow::Error::kind);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error kind={kind} message={message:?}");
            ExitCode::FAILURE
        }
    }
}
