//! `halo`: config-driven training, pruning, sweeps, convexity checks and
//! sparsity analysis.

mod analyze;
mod config;
mod prune;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use halo_core::theory::{verify_convexity, VerifyOptions};
use halo_core::Error;

use crate::config::{parse_f64, parse_list, RunConfig};
use crate::prune::{Mode, PruneArgs, Selector};

#[derive(Parser)]
#[command(name = "halo", version, about = "Sparse training with learned per-weight shrinkage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        config: PathBuf,
        /// Overrides the config's out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Mask a trained checkpoint by magnitude, optionally retraining.
    #[command(group(ArgGroup::new("selector").required(true).args(["target", "threshold"])))]
    Prune {
        checkpoint: PathBuf,
        /// Global sparsity to reach.
        #[arg(long)]
        target: Option<f64>,
        /// Prune every weight with magnitude at or below this value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "threshold")]
        mode: Mode,
        /// Run config; defaults to the echo next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for `--mode random`; defaults to the model seed plus one.
        #[arg(long)]
        reinit_seed: Option<u64>,
    },
    /// Train and prune over a ξ = ψ grid, targets and seeds.
    Sweep {
        config: PathBuf,
        /// Comma-separated ξ values (ψ follows ξ for the adaptive kinds).
        #[arg(long)]
        xi: String,
        /// Comma-separated sparsity targets.
        #[arg(long)]
        targets: String,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sample linear instances and check Hessian definiteness in the
    /// convexity region; prints a JSON report.
    VerifyTheory {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute sparsity metrics over a finished run directory.
    Analyze {
        run_dir: PathBuf,
        /// Comma-separated metric names, or `all`.
        #[arg(long)]
        metrics: String,
        /// Two mask files to compare for `overlap`.
        #[arg(long, num_args = 2, value_delimiter = ',')]
        masks: Vec<PathBuf>,
        /// Output directory; defaults to `<run_dir>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 1 usage/config, 2 numeric failure, 3 I/O or malformed input.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } | Error::Solver(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Input(_) => 3,
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) | Error::Domain(_) => 1,
    }
}

fn run(command: Command) -> halo_core::Result<()> {
    match command {
        Command::Train { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let out = run::resolve_out(&cfg, out_dir)?;
            let data = run::load_data(&cfg)?;
            let trained = run::train_run(&cfg, &data, &out)?;
            let last = trained.record.final_epoch();
            println!(
                "trained {} for {} epochs ({} steps): test accuracy {:?}, test loss {:?}, sparsity {:?} -> {}",
                cfg.model.name,
                trained.record.epochs.len(),
                trained.record.steps,
                last.and_then(|e| e.test_accuracy),
                last.and_then(|e| e.test_loss),
                last.map(|e| e.sparsity_thresholded),
                out.display()
            );
        }
        Command::Prune {
            checkpoint,
            target,
            threshold,
            mode,
            config,
            out,
            reinit_seed,
        } => {
            let selector = match (target, threshold) {
                (Some(t), None) => Selector::Target(t),
                (None, Some(t)) => Selector::Threshold(t),
                _ => unreachable!("clap enforces exactly one selector"),
            };
            let report = prune::cmd_prune(PruneArgs {
                checkpoint,
                selector,
                mode,
                config,
                out,
                reinit_seed,
            })?;
            println!("{}", serde_json::to_string(&report).expect("serializable"));
        }
        Command::Sweep {
            config,
            xi,
            targets,
            seeds,
            out_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = run::resolve_out(&cfg, out_dir)?;
            let xis = parse_list("xi", &xi, |v| parse_f64("xi", v))?;
            let targets = parse_list("targets", &targets, |v| parse_f64("targets", v))?;
            let seeds = match seeds {
                Some(s) => parse_list("seeds", &s, |v| {
                    v.parse::<u64>()
                        .map_err(|_| Error::Config(format!("expected an integer seed, got {v:?}")))
                })?,
                None => vec![cfg.optim.seed],
            };
            let rows = sweep::cmd_sweep(&cfg, &xis, &targets, &seeds, &out)?;
            println!("{} sweep cells -> {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::VerifyTheory { samples, seed, out } => {
            let report = verify_convexity(samples, seed, &VerifyOptions::default())?;
            let json = report.to_json();
            match out {
                Some(path) => {
                    std::fs::write(&path, format!("{json}\n"))?;
                    println!(
                        "{} inside samples, {} counterexamples -> {}",
                        report.inside_tested,
                        report.counterexamples,
                        path.display()
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Analyze {
            run_dir,
            metrics,
            masks,
            out,
        } => {
            let metrics = analyze::parse_metrics(&metrics)?;
            let out = out.unwrap_or_else(|| run_dir.join("analysis"));
            for (metric, path, headline) in analyze::cmd_analyze(&run_dir, &metrics, &masks, &out)? {
                println!("{metric}: {headline} -> {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
