//! `analyze`: sparsity-characterization metrics over a finished run directory.

use std::path::{Path, PathBuf};

use halo_core::analysis::{
    config_hash, feature_energy, generalization_gap, layer_sparsity_profile, monotonic_trend_pair,
    sparsity_during_training, sparsity_overlap, write_metric_csv,
};
use halo_core::models::Model;
use halo_core::optim::RunRecord;
use halo_core::pruning::{PruneMask, threshold_for_sparsity};
use halo_core::{Error, Result};

use crate::config::{RunConfig, ECHO_FILE};
use crate::run::{read_activations, ACTIVATION_FILE, INIT_FILE, MODEL_FILE, RECORD_FILE, SNAPSHOT_FILE};

pub const METRICS: [&str; 6] = [
    "layer_sparsity",
    "trend",
    "energy",
    "overlap",
    "gap",
    "sparsity_during_training",
];

/// Coefficients sampled for the rank trend.
const TREND_SAMPLE: usize = 10_000;
const ENERGY_LEVEL: f64 = 0.95;
const REFERENCE_PERCENTILE: f64 = 95.0;

pub fn parse_metrics(list: &str) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if name == "all" {
            return Ok(METRICS.to_vec());
        }
        match METRICS.iter().find(|m| **m == name) {
            Some(m) if !out.contains(m) => out.push(*m),
            Some(_) => {}
            None => {
                return Err(Error::Config(format!(
                    "unknown metric {name:?}; valid metrics: {}, all",
                    METRICS.join(", ")
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no metrics requested; valid metrics: {}, all", METRICS.join(", "))));
    }
    Ok(out)
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    record: RunRecord,
    model: Model,
    hash: String,
}

fn need(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} not found; {hint}", path.display())))
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Writes one CSV per metric into `out` and returns (metric, file, headline).
pub fn cmd_analyze(run_dir: &Path, metrics: &[&str], masks: &[PathBuf], out: &Path) -> Result<Vec<(String, PathBuf, String)>> {
    for file in [ECHO_FILE, RECORD_FILE, MODEL_FILE] {
        need(&run_dir.join(file), "is this a completed training run directory?")?;
    }
    let record = RunRecord::read_jsonl(&run_dir.join(RECORD_FILE))?;
    let run = Run {
        dir: run_dir.to_path_buf(),
        cfg: RunConfig::load(&run_dir.join(ECHO_FILE))?,
        hash: config_hash(&record.config),
        model: Model::load_checkpoint(&run_dir.join(MODEL_FILE))?,
        record,
    };
    if !masks.is_empty() && masks.len() != 2 {
        return Err(Error::Config(format!("overlap compares exactly two masks, got {}", masks.len())));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for &metric in metrics {
        let path = out.join(format!("{metric}.csv"));
        let headline = match metric {
            "layer_sparsity" => layer_sparsity(&run, &path)?,
            "trend" => trend(&run, &path)?,
            "energy" => energy(&run, &path)?,
            "overlap" => overlap(&run, masks, &path)?,
            "gap" => gap(&run, &path)?,
            "sparsity_during_training" => during_training(&run, &path)?,
            other => unreachable!("metric {other} passed validation"),
        };
        written.push((metric.to_string(), path, headline));
    }
    Ok(written)
}

fn layer_sparsity(run: &Run, path: &Path) -> Result<String> {
    let threshold = run.cfg.optim.report_threshold;
    let profile = layer_sparsity_profile(&run.model, threshold)?;
    let rows = run
        .model
        .penalized_params()
        .iter()
        .zip(&profile)
        .map(|(s, f)| vec![s.layer.to_string(), s.weights.len().to_string(), fmt(*f)])
        .collect::<Vec<_>>();
    write_metric_csv(path, "layer_sparsity", &run.hash, &["layer", "weights", "sparsity"], &rows)?;
    let lo = profile.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!("profile {profile:?} (spread {})", hi - lo))
}

fn trend(run: &Run, path: &Path) -> Result<String> {
    let kind = run.cfg.penalty.kind;
    if !kind.uses_weight_lambdas() {
        return Err(Error::Config(format!(
            "trend needs per-weight coefficients (kind halo, shalo2 or weighted); this run used {kind}"
        )));
    }
    let lambdas = run.model.penalized_lambdas();
    let weights = run.model.penalized_weights();
    let sample = TREND_SAMPLE.min(weights.len());
    let pair = monotonic_trend_pair(
        &lambdas,
        &weights,
        run.cfg.penalty.h_kind,
        run.cfg.penalty.k,
        sample,
        run.cfg.optim.seed,
    )?;
    let rows = vec![
        vec!["lambda_vs_weight".into(), sample.to_string(), fmt(pair.lambda_vs_weight)],
        vec!["h_vs_weight".into(), sample.to_string(), fmt(pair.h_vs_weight)],
    ];
    write_metric_csv(path, "trend", &run.hash, &["pairing", "sample", "spearman"], &rows)?;
    Ok(format!(
        "spearman lambda~|w| {} h(lambda)~|w| {}",
        pair.lambda_vs_weight, pair.h_vs_weight
    ))
}

fn energy(run: &Run, path: &Path) -> Result<String> {
    let file = run.dir.join(ACTIVATION_FILE);
    need(
        &file,
        "no stored activations; rerun train with probe capture enabled (e.g. probe_size = 2048)",
    )?;
    let layers = read_activations(&file)?;
    // The last entry is the output layer; only hidden representations count.
    let hidden = &layers[..layers.len().saturating_sub(1)];
    if hidden.is_empty() {
        return Err(Error::Config("the model has no hidden layers to analyze".into()));
    }
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (i, acts) in hidden.iter().enumerate() {
        let profile = feature_energy(acts)?;
        counts.push(profile.components_for(ENERGY_LEVEL));
        for (c, e) in profile.cumulative.iter().enumerate() {
            rows.push(vec![i.to_string(), (c + 1).to_string(), fmt(*e)]);
        }
    }
    write_metric_csv(path, "energy", &run.hash, &["hidden_layer", "components", "cumulative_energy"], &rows)?;
    Ok(format!("components for {ENERGY_LEVEL} energy per hidden layer {counts:?}"))
}

fn overlap(run: &Run, masks: &[PathBuf], path: &Path) -> Result<String> {
    let (a, b, label) = if masks.len() == 2 {
        (PruneMask::load(&masks[0])?, PruneMask::load(&masks[1])?, "mask files")
    } else {
        // Default pairing: the trained zero set against magnitude pruning of
        // the initialization at the same sparsity.
        let init_path = run.dir.join(INIT_FILE);
        need(&init_path, "pass --masks A B or analyze a run trained by this tool")?;
        let init = Model::load_checkpoint(&init_path)?;
        let trained = PruneMask::from_threshold(&run.model.penalized_weights(), run.cfg.optim.report_threshold, "trained");
        let w0 = init.penalized_weights();
        let tau = threshold_for_sparsity(&w0, trained.sparsity())?;
        (trained, PruneMask::from_threshold(&w0, tau, "init"), "trained vs init magnitude")
    };
    let so = sparsity_overlap(&a.keep, &b.keep)?;
    let rows = vec![vec![label.to_string(), fmt(a.sparsity()), fmt(b.sparsity()), fmt(so)]];
    write_metric_csv(path, "overlap", &run.hash, &["pairing", "sparsity_a", "sparsity_b", "overlap"], &rows)?;
    Ok(format!("SO {so}"))
}

fn gap(run: &Run, path: &Path) -> Result<String> {
    let gaps = generalization_gap(&run.record).map_err(|e| {
        Error::Config(format!("{e}; gap needs eval_train = true and a test split"))
    })?;
    let rows = run
        .record
        .epochs
        .iter()
        .zip(&gaps)
        .map(|(e, g)| {
            vec![
                e.epoch.to_string(),
                fmt(e.train_accuracy.unwrap_or(f64::NAN)),
                fmt(e.test_accuracy.unwrap_or(f64::NAN)),
                fmt(*g),
            ]
        })
        .collect::<Vec<_>>();
    write_metric_csv(path, "gap", &run.hash, &["epoch", "train_accuracy", "test_accuracy", "gap"], &rows)?;
    Ok(format!("final gap {:?}", gaps.last()))
}

fn during_training(run: &Run, path: &Path) -> Result<String> {
    let file = run.dir.join(SNAPSHOT_FILE);
    need(&file, "no weight snapshots; rerun train with snapshot_every = 1")?;
    let snapshots = RunRecord::read_snapshots(&file)?;
    let weights: Vec<Vec<f64>> = snapshots.iter().map(|s| s.weights.clone()).collect();
    let fractions = sparsity_during_training(&weights, &run.model.penalized_weights(), REFERENCE_PERCENTILE)?;
    let rows = snapshots
        .iter()
        .zip(&fractions)
        .map(|(s, f)| vec![s.epoch.to_string(), fmt(*f)])
        .collect::<Vec<_>>();
    write_metric_csv(path, "sparsity_during_training", &run.hash, &["epoch", "below_reference_p95"], &rows)?;
    Ok(format!("fractions {fractions:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_validate() {
        assert_eq!(parse_metrics("all").unwrap().len(), 6);
        assert_eq!(parse_metrics("gap, trend,gap").unwrap(), vec!["gap", "trend"]);
        let err = parse_metrics("gap,entropy").unwrap_err().to_string();
        assert!(err.contains("entropy") && err.contains("layer_sparsity"), "{err}");
        assert!(parse_metrics("").is_err());
    }
}
