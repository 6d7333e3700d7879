//! `prune`: magnitude masks on a trained checkpoint, optionally followed by a
//! second training stage.

use std::path::{Path, PathBuf};

use halo_core::data::Dataset;
use halo_core::models::{build_model, Model};
use halo_core::optim::train;
use halo_core::penalties::PenaltyConfig;
use halo_core::pruning::{apply_mask, threshold_for_sparsity, PruneMask};
use halo_core::{Error, Result};
use serde::Serialize;

use crate::config::{RunConfig, ECHO_FILE};
use crate::run::{load_data, INIT_FILE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selector {
    Target(f64),
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Mask and evaluate.
    Threshold,
    /// Mask, rewind survivors to their initial values and retrain.
    Lottery,
    /// Mask, reinitialize survivors from a fresh seed and retrain.
    Random,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Threshold => "threshold",
            Mode::Lottery => "lottery",
            Mode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub mode: String,
    pub target: Option<f64>,
    pub threshold: f64,
    pub sparsity_ratio: f64,
    pub exact_zero_fraction: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn mask_for(model: &Model, selector: Selector, stage: &str) -> Result<PruneMask> {
    let w = model.penalized_weights();
    let tau = match selector {
        Selector::Target(t) => threshold_for_sparsity(&w, t)?,
        Selector::Threshold(t) if t >= 0.0 => t,
        Selector::Threshold(t) => return Err(Error::Config(format!("threshold must be >= 0, got {t}"))),
    };
    Ok(PruneMask::from_threshold(&w, tau, stage))
}

/// Applies the mask and evaluates the masked model.
pub fn prune_and_evaluate(
    model: &Model,
    selector: Selector,
    mode: Mode,
    eval: &Dataset,
    chunk: usize,
) -> Result<(Model, PruneMask, PruneReport)> {
    let mask = mask_for(model, selector, mode.name())?;
    let pruned = apply_mask(model, &mask)?;
    let report = report(&pruned, &mask, selector, mode, eval, chunk)?;
    Ok((pruned, mask, report))
}

fn report(model: &Model, mask: &PruneMask, selector: Selector, mode: Mode, eval: &Dataset, chunk: usize) -> Result<PruneReport> {
    let metrics = model.evaluate(eval, chunk)?;
    let w = model.penalized_weights();
    Ok(PruneReport {
        mode: mode.name().into(),
        target: match selector {
            Selector::Target(t) => Some(t),
            Selector::Threshold(_) => None,
        },
        threshold: mask.threshold,
        sparsity_ratio: mask.sparsity(),
        exact_zero_fraction: w.iter().filter(|v| **v == 0.0).count() as f64 / w.len().max(1) as f64,
        loss: metrics.loss,
        accuracy: metrics.accuracy,
    })
}

pub struct PruneArgs {
    pub checkpoint: PathBuf,
    pub selector: Selector,
    pub mode: Mode,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub reinit_seed: Option<u64>,
}

/// The run directory holding `checkpoint`.
fn run_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn cmd_prune(args: PruneArgs) -> Result<PruneReport> {
    let dir = run_dir(&args.checkpoint);
    let config_path = args.config.clone().unwrap_or_else(|| dir.join(ECHO_FILE));
    let cfg = RunConfig::load(&config_path)?;
    let data = load_data(&cfg)?;
    let out = args.out.clone().unwrap_or_else(|| dir.clone());
    std::fs::create_dir_all(&out)?;
    let trained = Model::load_checkpoint(&args.checkpoint)?;
    let chunk = cfg.optim.eval_chunk;

    let (model, mask, report) = match args.mode {
        Mode::Threshold => prune_and_evaluate(&trained, args.selector, args.mode, data.eval_set(), chunk)?,
        Mode::Lottery | Mode::Random => {
            let mask = mask_for(&trained, args.selector, args.mode.name())?;
            let start = if args.mode == Mode::Lottery {
                let init = dir.join(INIT_FILE);
                if !init.exists() {
                    return Err(Error::Config(format!(
                        "lottery mode rewinds to {}, which does not exist; train the run first",
                        init.display()
                    )));
                }
                Model::load_checkpoint(&init)?
            } else {
                build_model(&trained.spec, args.reinit_seed.unwrap_or(trained.seed + 1))?
            };
            let start = apply_mask(&start, &mask)?;
            let (model, record) = train(&start, &data.train, data.test.as_ref(), &PenaltyConfig::none(), &cfg.optim)?;
            record.write_jsonl(&out.join("stage2.jsonl"))?;
            record.write_timings(&out.join("stage2_timings.csv"))?;
            let report = report(&model, &mask, args.selector, args.mode, data.eval_set(), chunk)?;
            (model, mask, report)
        }
    };
    model.save_checkpoint(&out.join("pruned.ckpt"))?;
    mask.save(&out.join("pruned.mask"))?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    std::fs::write(out.join("prune_report.json"), format!("{json}\n"))?;
    Ok(report)
}
