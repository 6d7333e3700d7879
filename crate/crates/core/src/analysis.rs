//! Sparsity characterization: rank trends, per-layer profiles, feature
//! energy, overlap, generalization gap and sparsity during training.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::optim::RunRecord;
use crate::penalties::{h_eval, HKind};
use crate::theory::linalg::{symmetric_eigenvalues, Matrix};

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Contract("rank correlation needs at least two points".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Spearman ρ between coefficients and weight magnitudes over a random
/// subsample drawn without replacement.
pub fn monotonic_trend(lambdas: &[f64], magnitudes: &[f64], sample: usize, seed: u64) -> Result<f64> {
    if lambdas.len() != magnitudes.len() {
        return Err(Error::Contract(format!(
            "{} coefficients vs {} weights",
            lambdas.len(),
            magnitudes.len()
        )));
    }
    if sample > lambdas.len() {
        return Err(Error::Contract(format!("sample {sample} exceeds {} weights", lambdas.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, lambdas.len(), sample).into_vec();
    idx.sort_unstable();
    let l: Vec<f64> = idx.iter().map(|&i| lambdas[i]).collect();
    let w: Vec<f64> = idx.iter().map(|&i| magnitudes[i].abs()).collect();
    spearman(&l, &w)
}

/// Rank trend for both pairings: λ vs |w| and h(λ) vs |w|.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPair {
    pub lambda_vs_weight: f64,
    pub h_vs_weight: f64,
}

pub fn monotonic_trend_pair(
    lambdas: &[f64],
    magnitudes: &[f64],
    h_kind: HKind,
    k: f64,
    sample: usize,
    seed: u64,
) -> Result<TrendPair> {
    let h: Vec<f64> = lambdas.iter().map(|&l| h_eval(h_kind, k, l)).collect::<Result<_>>()?;
    Ok(TrendPair {
        lambda_vs_weight: monotonic_trend(lambdas, magnitudes, sample, seed)?,
        h_vs_weight: monotonic_trend(&h, magnitudes, sample, seed)?,
    })
}

/// Fraction of weights at or below `threshold` in each penalized layer.
pub fn layer_sparsity_profile(model: &Model, threshold: f64) -> Result<Vec<f64>> {
    let slices = model.penalized_params();
    if slices.is_empty() {
        return Err(Error::Contract("model has no penalized layers".into()));
    }
    Ok(slices
        .iter()
        .map(|s| crate::pruning::sparsity_of_weights(s.weights, threshold))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    /// Normalized cumulative eigenvalue sums, one per component.
    pub cumulative: Vec<f64>,
    /// Set when the activations have no variance (profile is all ones).
    pub zero_variance: bool,
}

impl EnergyProfile {
    /// Components needed to reach `level` of the total energy.
    pub fn components_for(&self, level: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| c >= level - 1e-12)
            .map_or(self.cumulative.len(), |i| i + 1)
    }
}

/// Cumulative energy from eigenvalues (clamped at zero, sorted descending).
pub fn energy_from_eigenvalues(eigenvalues: &[f64]) -> EnergyProfile {
    let mut e: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    e.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = e.iter().sum();
    if !(total > 0.0) {
        return EnergyProfile {
            cumulative: vec![1.0; e.len()],
            zero_variance: true,
        };
    }
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = e
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    EnergyProfile {
        cumulative,
        zero_variance: false,
    }
}

/// Energy profile of the covariance of N × C activations.
pub fn feature_energy(activations: &Tensor) -> Result<EnergyProfile> {
    let s = activations.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("activations must be N×C, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::Contract(format!("energy needs at least 2 samples, got {n}")));
    }
    let data = activations.data();
    let mut mean = vec![0.0; c];
    for row in data.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(c);
    let mut centered = vec![0.0; c];
    for row in data.chunks(c) {
        for ((d, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *d = v - m;
        }
        for i in 0..c {
            if centered[i] == 0.0 {
                continue;
            }
            for j in i..c {
                cov.data[i * c + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov.data[i * c + j] / (n - 1) as f64;
            cov.data[i * c + j] = v;
            cov.data[j * c + i] = v;
        }
    }
    Ok(energy_from_eigenvalues(&symmetric_eigenvalues(&cov)))
}

/// Jaccard similarity of the zero sets of two keep-masks; 1 when both are
/// empty.
pub fn sparsity_overlap(keep_a: &[bool], keep_b: &[bool]) -> Result<f64> {
    if keep_a.len() != keep_b.len() {
        return Err(Error::Contract(format!(
            "masks of length {} and {}",
            keep_a.len(),
            keep_b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in keep_a.iter().zip(keep_b) {
        inter += (!a && !b) as usize;
        union += (!a || !b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Train accuracy minus test accuracy per epoch.
pub fn generalization_gap(record: &RunRecord) -> Result<Vec<f64>> {
    record
        .epochs
        .iter()
        .map(|e| match (e.train_accuracy, e.test_accuracy) {
            (Some(tr), Some(te)) => Ok(tr - te),
            _ => Err(Error::Contract(format!("epoch {} lacks train or test accuracy", e.epoch))),
        })
        .collect()
}

/// Nearest-rank percentile of magnitudes.
pub fn percentile_magnitude(weights: &[f64], percentile: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Contract("percentile of an empty set".into()));
    }
    let mut m: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    m.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * m.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(m[rank.min(m.len()) - 1])
}

/// Per snapshot, the fraction of weights at or below the reference model's
/// `percentile`-th magnitude.
pub fn sparsity_during_training(snapshots: &[Vec<f64>], reference: &[f64], percentile: f64) -> Result<Vec<f64>> {
    if snapshots.is_empty() {
        return Err(Error::Contract("no weight snapshots recorded; enable snapshots when training".into()));
    }
    let tau = percentile_magnitude(reference, percentile)?;
    snapshots
        .iter()
        .map(|s| {
            if s.len() != reference.len() {
                return Err(Error::Contract(format!(
                    "snapshot of {} weights vs reference of {}",
                    s.len(),
                    reference.len()
                )));
            }
            Ok(s.iter().filter(|w| w.abs() <= tau).count() as f64 / s.len() as f64)
        })
        .collect()
}

/// FNV-1a digest used to tag metric files with their run configuration.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("serializable");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// CSV with a `# metric=… config_hash=…` line, a column header and rows.
pub fn metric_csv(metric: &str, hash: &str, columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("# metric={metric} config_hash={hash}\n{}\n", columns.join(","));
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_metric_csv(path: &Path, metric: &str, hash: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    std::fs::write(path, metric_csv(metric, hash, columns, rows))?;
    Ok(())
}
