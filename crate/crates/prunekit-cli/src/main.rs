//! Command-line front end: pretrain, rate search, pruning schedule, full
//! runs, mode comparison and checkpoint evaluation.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 1 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prunekit::pipeline::{self, PipelineConfig, RatesFile};
use prunekit::Error;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Structured filter pruning with optimized per-group rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unpruned network and save pretrained.pkck
    Pretrain(CommonArgs),
    /// Search per-group pruning rates for a pretrained checkpoint
    OptimizeRates {
        #[command(flatten)]
        common: CommonArgs,
        /// Pretrained checkpoint (defaults to <out-dir>/pretrained.pkck)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Apply the pruning schedule to a pretrained checkpoint
    Prune {
        #[command(flatten)]
        common: CommonArgs,
        /// Pretrained checkpoint (defaults to <out-dir>/pretrained.pkck)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// rates.json from optimize-rates; uniform target rates otherwise
        #[arg(long)]
        rates: Option<PathBuf>,
    },
    /// Run pretrain, rate search, schedule and reports end to end
    RunAll(CommonArgs),
    /// Run both modes across seeds and tabulate accuracy and sparsity
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated seed list, e.g. 1,2,3
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Report accuracy and sparsity of a checkpoint
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_checkpoint(common: &CommonArgs, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| common.out_dir.join("pretrained.pkck"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load_config(&common)?;
            pipeline::pretrain_only(&cfg, &common.out_dir)?;
            println!(
                "pretrained checkpoint written to {}",
                common.out_dir.join("pretrained.pkck").display()
            );
        }
        Command::OptimizeRates { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ckpt = default_checkpoint(&common, &checkpoint);
            let rates = pipeline::optimize_only(&cfg, &ckpt, &common.out_dir)?;
            println!("phi_star = {rates:?}");
            println!(
                "rates written to {}",
                common.out_dir.join("rates.json").display()
            );
        }
        Command::Prune {
            common,
            checkpoint,
            rates,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = default_checkpoint(&common, &checkpoint);
            let rates = match rates {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        Error::Config(format!("cannot read rates {}: {e}", path.display()))
                    })?;
                    let parsed: RatesFile = serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("invalid rates file: {e}")))?;
                    Some(parsed.phi_star)
                }
                None => None,
            };
            let report = pipeline::prune_only(&cfg, &ckpt, rates, &common.out_dir)?;
            print_summary(&report, &common.out_dir);
        }
        Command::RunAll(common) => {
            let cfg = load_config(&common)?;
            let report = pipeline::run(&cfg, &common.out_dir)?;
            print_summary(&report, &common.out_dir);
        }
        Command::Compare { common, seeds } => {
            let cfg = load_config(&common)?;
            let table = pipeline::compare_modes(&cfg, &seeds, &common.out_dir)?;
            println!("mode,n_seeds,accuracy_mean,accuracy_std,sparsity_mean,sparsity_std");
            for row in &table {
                println!(
                    "{},{},{:.4},{:.4},{:.4},{:.4}",
                    row.mode.as_str(),
                    row.n_seeds,
                    row.accuracy_mean,
                    row.accuracy_std,
                    row.sparsity_mean,
                    row.sparsity_std
                );
            }
            println!(
                "table written to {}",
                common.out_dir.join("compare.csv").display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let summary = pipeline::evaluate_checkpoint(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn print_summary(report: &pipeline::RunReport, out_dir: &Path) {
    println!(
        "mode {} | target {:.2} | final sparsity {:.4} | final accuracy {:.4}",
        report.mode.as_str(),
        report.target,
        report.final_sparsity.overall,
        report.final_accuracy
    );
    println!(
        "params {} -> {} | phi_star {:?}",
        report.params_total, report.params_after, report.phi_star
    );
    println!("reports in {}", out_dir.display());
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Json(_))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
