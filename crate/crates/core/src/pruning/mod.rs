//! Magnitude thresholds, masks, two-stage pruning baselines and the local
//! linear approximation.

mod lla;

pub use lla::{
    halo_lambda_update, halo_map, lla, ols, two_stage_linear, weighted_lasso, CdOptions, HaloMap, LinearProblem,
    PenaltyDeriv,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelSpec};
use crate::optim::{train, OptimConfig, RunRecord};
use crate::penalties::PenaltyConfig;

/// Fraction of `weights` with magnitude at or below `threshold`; a threshold
/// of 0 counts exact zeros.
pub fn sparsity_of_weights(weights: &[f64], threshold: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|w| w.abs() <= threshold).count() as f64 / weights.len() as f64
}

/// Sparsity over the model's penalized weights.
pub fn sparsity_ratio(model: &Model, threshold: f64) -> f64 {
    sparsity_of_weights(&model.penalized_weights(), threshold)
}

/// Global magnitude threshold τ: the ⌈target·p⌉-th smallest magnitude (0 for
/// target 0). Pruning keeps exactly the weights with |w| > τ, so every
/// magnitude tied with τ is pruned.
pub fn threshold_for_sparsity(magnitudes: &[f64], target: f64) -> Result<f64> {
    if magnitudes.is_empty() {
        return Err(Error::Contract("threshold over an empty weight set".into()));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Contract(format!("target sparsity {target} outside [0, 1]")));
    }
    let p = magnitudes.len();
    // Guard against 0.9·10 = 9.000000000000002 rounding up.
    let rank = ((target * p as f64) - 1e-9).ceil().max(0.0) as usize;
    if rank == 0 {
        return Ok(0.0);
    }
    let mut sorted: Vec<f64> = magnitudes.iter().map(|m| m.abs()).collect();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[rank.min(p) - 1])
}

/// Keep flags over the penalized weights, in `penalized_params` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    pub threshold: f64,
    pub stage: String,
}

impl PruneMask {
    pub fn from_threshold(weights: &[f64], threshold: f64, stage: &str) -> Self {
        Self {
            keep: weights.iter().map(|w| w.abs() > threshold).collect(),
            threshold,
            stage: stage.to_string(),
        }
    }

    /// Mask reaching at least `target` sparsity on the model's penalized
    /// weights.
    pub fn for_target(model: &Model, target: f64, stage: &str) -> Result<Self> {
        let w = model.penalized_weights();
        let tau = threshold_for_sparsity(&w, target)?;
        Ok(Self::from_threshold(&w, tau, stage))
    }

    /// The model's current masks, with unmasked layers kept in full.
    pub fn of_model(model: &Model) -> Self {
        let keep = model
            .params
            .iter()
            .filter(|p| p.is_penalized())
            .flat_map(|p| match &p.mask {
                Some(m) => m.clone(),
                None => vec![true; p.weights.len()],
            })
            .collect();
        Self {
            keep,
            threshold: 0.0,
            stage: "model".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len() as f64
    }

    /// Indices of dropped weights.
    pub fn zero_set(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, k)| !**k)
            .map(|(i, _)| i)
            .collect()
    }

    /// Binary layout: u64 count, f64 threshold (both little-endian), keep
    /// bits packed LSB-first, then a u8-length-prefixed stage label.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.keep.len() / 8 + 2 + self.stage.len());
        out.extend_from_slice(&(self.keep.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.threshold.to_le_bytes());
        for chunk in self.keep.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | ((k as u8) << i)));
        }
        let stage = &self.stage.as_bytes()[..self.stage.len().min(255)];
        out.push(stage.len() as u8);
        out.extend_from_slice(stage);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |offset: usize| Error::Format {
            offset: offset as u64,
            message: "truncated mask file".into(),
        };
        let header = bytes.get(..16).ok_or_else(|| truncated(0))?;
        let count = u64::from_le_bytes(header[..8].try_into().expect("8 bytes")) as usize;
        let threshold = f64::from_le_bytes(header[8..].try_into().expect("8 bytes"));
        let nbytes = count.div_ceil(8);
        let bits = bytes.get(16..16 + nbytes).ok_or_else(|| truncated(16))?;
        let keep = (0..count).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let stage = match bytes.get(16 + nbytes) {
            Some(&len) => {
                let start = 17 + nbytes;
                let raw = bytes.get(start..start + len as usize).ok_or_else(|| truncated(start))?;
                String::from_utf8_lossy(raw).into_owned()
            }
            None => String::new(),
        };
        Ok(Self { keep, threshold, stage })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Zeroes dropped weights and freezes them for later training.
pub fn apply_mask(model: &Model, mask: &PruneMask) -> Result<Model> {
    let total = model.penalized_count();
    if mask.len() != total {
        return Err(Error::Contract(format!(
            "mask has {} flags, model has {total} penalized weights",
            mask.len()
        )));
    }
    let mut out = model.clone();
    let mut offset = 0;
    for p in out.params.iter_mut().filter(|p| p.is_penalized()) {
        let n = p.weights.len();
        let keep = &mask.keep[offset..offset + n];
        for (w, &k) in p.weights.data_mut().iter_mut().zip(keep) {
            if !k {
                *w = 0.0;
            }
        }
        p.mask = Some(match &p.mask {
            Some(old) => old.iter().zip(keep).map(|(a, b)| *a && *b).collect(),
            None => keep.to_vec(),
        });
        offset += n;
    }
    Ok(out)
}

/// Where stage-two weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reinit {
    /// Rewind to the stage-one initial weights.
    Lottery,
    /// Fresh initialization from the given seed.
    Random(u64),
}

pub struct PrunedRetrain {
    pub model: Model,
    pub mask: PruneMask,
    pub record: RunRecord,
}

/// Masks `trained` at `target`, reinitializes the survivors and retrains.
#[allow(clippy::too_many_arguments)]
pub fn retrain_pruned(
    initial: &Model,
    trained: &Model,
    target: f64,
    reinit: Reinit,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    penalty: &PenaltyConfig,
    optim: &OptimConfig,
) -> Result<PrunedRetrain> {
    let stage = match reinit {
        Reinit::Lottery => "lottery",
        Reinit::Random(_) => "random",
    };
    let mask = PruneMask::for_target(trained, target, stage)?;
    let start = match reinit {
        Reinit::Lottery => initial.clone(),
        Reinit::Random(seed) => build_model(&initial.spec, seed)?,
    };
    let start = apply_mask(&start, &mask)?;
    let (model, record) = train(&start, train_data, test_data, penalty, optim)?;
    Ok(PrunedRetrain { model, mask, record })
}

pub struct TwoStage {
    pub initial: Model,
    pub dense: Model,
    pub dense_record: RunRecord,
    pub pruned: PrunedRetrain,
}

/// Dense training, global magnitude mask at `target`, then retraining of the
/// survivors with the same epoch budget.
pub fn two_stage_prune(
    spec: &ModelSpec,
    seed: u64,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    optim: &OptimConfig,
    target: f64,
    reinit: Reinit,
) -> Result<TwoStage> {
    let initial = build_model(spec, seed)?;
    let none = PenaltyConfig::none();
    let (dense, dense_record) = train(&initial, train_data, test_data, &none, optim)?;
    let pruned = retrain_pruned(&initial, &dense, target, reinit, train_data, test_data, &none, optim)?;
    Ok(TwoStage {
        initial,
        dense,
        dense_record,
        pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    #[test]
    fn threshold_examples() {
        let w = [1.0, 2.0, 3.0, 4.0];
        let tau = threshold_for_sparsity(&w, 0.5).unwrap();
        assert_eq!(tau, 2.0);
        let m = PruneMask::from_threshold(&w, tau, "t");
        assert_eq!(m.keep, vec![false, false, true, true]);
        assert_eq!(m.sparsity(), 0.5);

        let tau = threshold_for_sparsity(&w, 0.0).unwrap();
        assert_eq!(PruneMask::from_threshold(&w, tau, "t").sparsity(), 0.0);

        let ties = [1.0, 1.0, 1.0, 2.0];
        let tau = threshold_for_sparsity(&ties, 0.5).unwrap();
        assert_eq!(tau, 1.0);
        assert_eq!(PruneMask::from_threshold(&ties, tau, "t").sparsity(), 0.75);

        assert!(matches!(threshold_for_sparsity(&[], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn exact_target_on_round_counts() {
        let w: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(threshold_for_sparsity(&w, 0.9).unwrap(), 9.0);
    }

    #[test]
    fn sparsity_examples() {
        let w = [0.0, 1.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(sparsity_of_weights(&w, 0.0), 0.3);
        let m = build_model(&ModelSpec::lenet_300_100(), 0).unwrap();
        assert_eq!(sparsity_ratio(&m, 0.0), 0.0);
    }

    #[test]
    fn mask_bytes_roundtrip() {
        let m = PruneMask {
            keep: (0..19).map(|i| i % 3 == 0).collect(),
            threshold: 0.125,
            stage: "lottery".into(),
        };
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 16 + 3 + 1 + 7);
        assert_eq!(PruneMask::from_bytes(&bytes).unwrap(), m);
        assert!(matches!(PruneMask::from_bytes(&bytes[..17]), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_application_contracts() {
        let model = build_model(&ModelSpec::mlp("m", 4, &[3], 2), 9).unwrap();
        let n = model.penalized_count();
        let all = PruneMask {
            keep: vec![true; n],
            threshold: 0.0,
            stage: "t".into(),
        };
        let same = apply_mask(&model, &all).unwrap();
        let x = Tensor::full(&[2, 4], 0.5);
        assert_eq!(same.predict(&x).unwrap(), model.predict(&x).unwrap());

        let none = PruneMask {
            keep: vec![false; n],
            ..all.clone()
        };
        let mut zeroed = apply_mask(&model, &none).unwrap();
        for p in &mut zeroed.params {
            p.bias.data_mut().fill(0.25);
        }
        // Bias-only network: hidden units are relu(0.25), logits 0.25.
        assert!(zeroed.predict(&x).unwrap().data().iter().all(|&v| v == 0.25));

        let short = PruneMask {
            keep: vec![true; n - 1],
            ..all
        };
        assert!(matches!(apply_mask(&model, &short), Err(Error::Contract(_))));
    }
}
