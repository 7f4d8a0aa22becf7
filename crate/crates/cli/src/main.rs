//! `foctta`: pretrain, profile, adapt, sweep and report from one JSON config.
//!
//! Exit codes: 0 on success, 2 for configuration or artifact problems, 3 for
//! runtime and numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use foctta_core::ctta::StrategyMode;
use foctta_core::experiment::pipeline::{self, CHECKPOINT_FILE, PLAN_FILE};
use foctta_core::experiment::report::cmd_report;
use foctta_core::experiment::ExperimentConfig;
use foctta_core::memory::audit;
use foctta_core::nn::load_checkpoint;
use foctta_core::warmup::AdaptationPlan;
use foctta_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "foctta", version, about = "Focused continual test-time adaptation experiments")]
struct Cli {
    /// JSON config; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reference CNN on clean source data.
    Pretrain,
    /// Rank representation layers and write an adaptation plan.
    Warmup {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one adaptation over the configured stream.
    Adapt {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        mode: Option<StrategyMode>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run every configured mode at every batch size.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
    },
    /// Aggregate run summaries into comparison tables.
    Report {
        /// Summary files or directories holding run directories.
        paths: Vec<PathBuf>,
        /// Pick, per mode, the largest batch whose predicted cost fits.
        #[arg(long)]
        budget_bytes: Option<u64>,
    },
    /// Predicted versus measured backprop memory for one mode and batch size.
    Audit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        mode: Option<StrategyMode>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    match &cli.command {
        Command::Pretrain => {
            let path = pipeline::cmd_pretrain(&cfg, &out)?;
            let (_, meta) = load_checkpoint(&path)?;
            println!(
                "checkpoint {} (clean accuracy {:.4})",
                path.display(),
                meta.clean_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::Warmup { checkpoint } => {
            let ck = or_default(checkpoint, &out, CHECKPOINT_FILE);
            let path = pipeline::cmd_warmup(&cfg, &ck, &out)?;
            let plan = AdaptationPlan::load(&path)?;
            if let Some(iv) = &plan.importance {
                print!("{}", iv.ranked_table());
            }
            println!("plan {} selects {:?}", path.display(), plan.selected);
        }
        Command::Adapt {
            checkpoint,
            plan,
            mode,
            batch_size,
        } => {
            if let Some(m) = mode {
                cfg.adapt.mode = *m;
            }
            if let Some(b) = batch_size {
                cfg.adapt.batch_size = *b;
            }
            let ck = or_default(checkpoint, &out, CHECKPOINT_FILE);
            let pl = or_default(plan, &out, PLAN_FILE);
            let path = pipeline::cmd_adapt(&cfg, &ck, &pl, &out)?;
            let s = pipeline::load_summary(&path)?;
            println!("{} B={} average error {:.2}% -> {}", s.mode, s.batch_size, s.average_error_pct, path.display());
        }
        Command::Sweep {
            checkpoint,
            plan,
            batch_sizes,
        } => {
            let ck = or_default(checkpoint, &out, CHECKPOINT_FILE);
            let pl = or_default(plan, &out, PLAN_FILE);
            let bs = batch_sizes.clone().unwrap_or_else(|| cfg.sweep.batch_sizes.clone());
            let path = pipeline::cmd_sweep(&cfg, &ck, &pl, &bs, &out)?;
            println!("comparison {}", path.display());
        }
        Command::Report { paths, budget_bytes } => {
            let inputs = if paths.is_empty() { vec![out.clone()] } else { paths.clone() };
            let report = cmd_report(&inputs, *budget_bytes, &out)?;
            print!("{}", report.to_text());
        }
        Command::Audit {
            checkpoint,
            plan,
            mode,
            batch_size,
        } => {
            let ck = or_default(checkpoint, &out, CHECKPOINT_FILE);
            let pl = or_default(plan, &out, PLAN_FILE);
            let inputs = pipeline::load_inputs(&cfg, &ck, &pl)?;
            let mode = mode.unwrap_or(cfg.adapt.mode);
            let b = batch_size.unwrap_or(cfg.adapt.batch_size);
            let strategy = foctta_core::ctta::Strategy::resolve(
                &inputs.model,
                &inputs.plan,
                &pipeline::run_options(&cfg, mode),
            )?;
            let report = audit(&inputs.model, &strategy.trainable, strategy.bn_mode, b, cfg.adapt.precision)?;
            print!("{}", report.to_table());
            if !report.reconciles() {
                return Err(Error::Internal("measured weight-grad bytes differ from the analytic model".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
