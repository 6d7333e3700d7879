//! SGD with momentum over weights and regularization coefficients, and the
//! training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset, Targets};
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::models::{LayerSpec, Model, INIT_SCHEME};
use crate::penalties::{penalty_subgrad, penalty_value, Coeffs, GroupMap, Groups, PenaltyConfig, PenaltyKind};
use crate::pruning::sparsity_of_weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Applied to weights only; never to biases or coefficients.
    pub weight_decay: f64,
    /// (epoch milestone, multiplier) pairs.
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_floor: f64,
    /// Initial learning rate for coefficients; `None` shares `lr0`.
    pub lambda_lr0: Option<f64>,
    /// Coefficient momentum; `None` shares `momentum`.
    pub lambda_momentum: Option<f64>,
    /// Hold coefficients fixed at their current values.
    pub freeze_lambdas: bool,
    /// Magnitude at or below which a weight counts as zero in reports.
    pub report_threshold: f64,
    /// Keep a (Λ, W) snapshot every this many epochs (0 disables).
    pub snapshot_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Evaluate training-set metrics after each epoch.
    pub eval_train: bool,
    pub eval_chunk: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Vec::new(),
            epochs: 1,
            batch_size: 100,
            seed: 0,
            lambda_floor: 1e-8,
            lambda_lr0: None,
            lambda_momentum: None,
            freeze_lambdas: false,
            report_threshold: 1e-3,
            snapshot_every: 0,
            max_steps: None,
            eval_train: true,
            eval_chunk: 500,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        for m in std::iter::once(self.momentum).chain(self.lambda_momentum) {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum must lie in [0, 1), got {m}"));
            }
        }
        if !(self.lambda_floor > 0.0) {
            return bad(format!("lambda_floor must be > 0, got {}", self.lambda_floor));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: `lr0` times every multiplier whose milestone has
/// been reached.
pub fn lr_at(lr0: f64, schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .filter(|(m, _)| *m <= epoch)
        .fold(lr0, |lr, (_, f)| lr * f)
}

/// One momentum step: `buf ← μ·buf + (g + wd·p)`, `p ← p − lr·buf`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], buf: &mut [f64], momentum: f64, lr: f64, weight_decay: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::Contract(format!(
            "sgd step over {} params, {} grads, {} buffers",
            param.len(),
            grad.len(),
            buf.len()
        )));
    }
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + (g + weight_decay * *p);
        *p -= lr * *b;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch data loss during the epoch.
    pub batch_loss: f64,
    /// Mean minibatch data loss plus penalty.
    pub batch_objective: f64,
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub penalty: f64,
    /// Fraction of penalized weights exactly zero.
    pub sparsity_exact: f64,
    /// Fraction of penalized weights at or below the report threshold.
    pub sparsity_thresholded: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub lambdas: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    /// Objective of every minibatch before its update.
    pub step_objectives: Vec<f64>,
    pub steps: usize,
    pub snapshots: Vec<Snapshot>,
    /// Wall-clock seconds per epoch; excluded from the JSONL record.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    summary: bool,
    config: &'a serde_json::Value,
    epochs_run: usize,
    steps: usize,
    final_epoch: Option<&'a EpochRecord>,
}

impl RunRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Per-epoch lines followed by one summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        let summary = Summary {
            summary: true,
            config: &self.config,
            epochs_run: self.epochs.len(),
            steps: self.steps,
            final_epoch: self.epochs.last(),
        };
        out.push_str(&serde_json::to_string(&summary).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Reads the per-epoch lines and summary back.
    pub fn read_jsonl(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path)?;
        let mut epochs = Vec::new();
        let mut config = serde_json::Value::Null;
        let mut steps = 0;
        let mut offset = 0u64;
        for line in text.lines() {
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format {
                offset,
                message: format!("bad record line: {e}"),
            })?;
            if value.get("summary").is_some() {
                config = value["config"].clone();
                steps = value["steps"].as_u64().unwrap_or(0) as usize;
            } else {
                epochs.push(serde_json::from_value(value).map_err(|e| Error::Format {
                    offset,
                    message: format!("bad epoch line: {e}"),
                })?);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(RunRecord {
            config,
            epochs,
            step_objectives: Vec::new(),
            steps,
            snapshots: Vec::new(),
            epoch_seconds: Vec::new(),
        })
    }

    pub fn write_snapshots(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.snapshots {
            serde_json::to_writer(&mut w, s).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    offset: 0,
                    message: format!("bad snapshot: {e}"),
                })
            })
            .collect()
    }

    /// Timing sidecar: one `epoch,seconds` row per epoch.
    pub fn write_timings(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,seconds\n");
        for (i, s) in self.epoch_seconds.iter().enumerate() {
            out.push_str(&format!("{},{s}\n", i + 1));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Group index of every penalized weight and the number of groups.
pub fn resolve_groups(model: &Model, kind: PenaltyKind, map: &GroupMap) -> Result<(Vec<usize>, usize)> {
    let layout = model.penalized_layout();
    let total: usize = layout.iter().sum();
    if kind == PenaltyKind::Sws {
        return Ok((vec![0; total], 1));
    }
    match map {
        GroupMap::Layer => {
            let assign = layout
                .iter()
                .enumerate()
                .flat_map(|(g, &n)| std::iter::repeat(g).take(n))
                .collect();
            Ok((assign, layout.len()))
        }
        GroupMap::Unit => {
            let mut assign = Vec::with_capacity(total);
            let mut base = 0;
            for p in model.params.iter().filter(|p| p.is_penalized()) {
                let s = p.weights.shape();
                match model.spec.layers[p.layer] {
                    LayerSpec::Dense { .. } => {
                        assign.extend((0..p.weights.len()).map(|i| base + i % s[1]));
                        base += s[1];
                    }
                    _ => {
                        let fan = s[1] * s[2] * s[3];
                        assign.extend((0..p.weights.len()).map(|i| base + i / fan));
                        base += s[0];
                    }
                }
            }
            Ok((assign, base))
        }
        GroupMap::Explicit(assign) => {
            let groups = assign.iter().max().map_or(0, |m| m + 1);
            crate::penalties::check_partition(assign, total, groups)?;
            Ok((assign.clone(), groups))
        }
    }
}

struct Buffers {
    weights: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
    lambdas: Vec<Option<Vec<f64>>>,
    group: Vec<f64>,
}

impl Buffers {
    fn new(model: &Model) -> Self {
        Self {
            weights: model.params.iter().map(|p| vec![0.0; p.weights.len()]).collect(),
            bias: model.params.iter().map(|p| vec![0.0; p.bias.len()]).collect(),
            lambdas: model
                .params
                .iter()
                .map(|p| p.lambdas.as_ref().map(|l| vec![0.0; l.len()]))
                .collect(),
            group: vec![0.0; model.group_lambdas.len()],
        }
    }
}

/// Penalty value of the model's current parameters.
pub fn model_penalty(model: &Model, penalty: &PenaltyConfig, groups: &[usize]) -> Result<f64> {
    if penalty.kind == PenaltyKind::None {
        return Ok(0.0);
    }
    let w = model.penalized_weights();
    let lam = model.penalized_lambdas();
    penalty_value(penalty, &w, &coeffs_for(penalty, &lam, groups, &model.group_lambdas))
}

fn coeffs_for<'a>(penalty: &PenaltyConfig, lam: &'a [f64], groups: &'a [usize], group_lambdas: &'a [f64]) -> Coeffs<'a> {
    Coeffs {
        per_weight: penalty.kind.uses_weight_lambdas().then_some(lam),
        groups: penalty.kind.uses_group_lambdas().then_some(Groups {
            assign: groups,
            lambdas: group_lambdas,
        }),
    }
}

fn sparsity_pair(model: &Model, threshold: f64) -> (f64, f64) {
    let w = model.penalized_weights();
    (sparsity_of_weights(&w, 0.0), sparsity_of_weights(&w, threshold))
}

/// Configuration echo stored in every run record.
pub fn config_echo(model: &Model, penalty: &PenaltyConfig, optim: &OptimConfig) -> serde_json::Value {
    serde_json::json!({
        "model": model.spec,
        "init_seed": model.seed,
        "init_scheme": INIT_SCHEME,
        "penalty": penalty,
        "optim": optim,
    })
}

/// Minimizes data loss plus penalty over the weights, biases and (for the
/// adaptive kinds) the coefficients. Masked weights stay at zero.
pub fn train(
    model: &Model,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    penalty: &PenaltyConfig,
    optim: &OptimConfig,
) -> Result<(Model, RunRecord)> {
    penalty.validate()?;
    optim.validate()?;
    let mut model = model.clone();
    let (groups, group_count) = if penalty.kind.uses_group_lambdas() {
        resolve_groups(&model, penalty.kind, &penalty.group_map)?
    } else {
        (Vec::new(), 0)
    };
    if penalty.kind.uses_group_lambdas() && model.group_lambdas.len() != group_count {
        model.group_lambdas = vec![1.0; group_count];
    }
    let learn_lambdas = penalty.kind.learns_lambdas() && !optim.freeze_lambdas;
    let lambda_momentum = optim.lambda_momentum.unwrap_or(optim.momentum);
    let lambda_lr0 = optim.lambda_lr0.unwrap_or(optim.lr0);

    let mut record = RunRecord {
        config: config_echo(&model, penalty, optim),
        epochs: Vec::new(),
        step_objectives: Vec::new(),
        steps: 0,
        snapshots: Vec::new(),
        epoch_seconds: Vec::new(),
    };
    let mut bufs = Buffers::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let n = train_data.len();

    let mut exhausted = false;
    for epoch in 0..optim.epochs {
        let started = Instant::now();
        let lr = lr_at(optim.lr0, &optim.schedule, epoch);
        let lambda_lr = lr_at(lambda_lr0, &optim.schedule, epoch);
        let (mut loss_sum, mut obj_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in epoch_batches(n, optim.batch_size, Some(&mut rng)).into_iter().enumerate() {
            if optim.max_steps.is_some_and(|m| record.steps >= m) {
                exhausted = true;
                break;
            }
            let numeric = |message: String| Error::Numeric {
                epoch,
                batch: b,
                message,
            };
            let (x, targets) = train_data.batch(&idx)?;
            let mut tape = Tape::new();
            let trace = model.record(&mut tape, &x)?;
            let loss = match &targets {
                Targets::Classes { labels, .. } => tape.softmax_cross_entropy(trace.output, labels)?,
                Targets::Real(y) => tape.half_squared_error(trace.output, y)?,
            };
            let data_loss = tape.value(loss).item().expect("scalar loss");
            if !data_loss.is_finite() {
                return Err(numeric(format!("data loss is {data_loss}")));
            }
            tape.backward(loss)?;

            let mut wgrads = Vec::with_capacity(model.params.len());
            let mut bgrads = Vec::with_capacity(model.params.len());
            for &(w, bias) in &trace.params {
                wgrads.push(tape.take_grad(w).expect("weight grad").into_data());
                bgrads.push(tape.take_grad(bias).expect("bias grad").into_data());
            }
            drop(tape);

            let mut pen_value = 0.0;
            let mut lambda_grads: Option<Vec<f64>> = None;
            let mut group_grads: Vec<f64> = Vec::new();
            if penalty.kind != PenaltyKind::None {
                let w = model.penalized_weights();
                let lam = model.penalized_lambdas();
                let coeffs = coeffs_for(penalty, &lam, &groups, &model.group_lambdas);
                pen_value = penalty_value(penalty, &w, &coeffs)?;
                let sub = penalty_subgrad(penalty, &w, &coeffs)?;
                let mut offset = 0;
                for (p, g) in model.params.iter().zip(wgrads.iter_mut()) {
                    if p.is_penalized() {
                        for (gi, d) in g.iter_mut().zip(&sub.dw[offset..offset + p.weights.len()]) {
                            *gi += d;
                        }
                        offset += p.weights.len();
                    }
                }
                if !sub.dlambda.is_empty() {
                    lambda_grads = Some(sub.dlambda);
                }
                group_grads = sub.dgroup;
            }
            let objective = data_loss + pen_value;
            if !objective.is_finite() {
                return Err(numeric(format!("objective is {objective} (penalty {pen_value})")));
            }
            record.step_objectives.push(objective);
            loss_sum += data_loss;
            obj_sum += objective;
            batches += 1;

            let mut offset = 0;
            for (i, p) in model.params.iter_mut().enumerate() {
                if let Some(mask) = &p.mask {
                    for (g, &keep) in wgrads[i].iter_mut().zip(mask) {
                        if !keep {
                            *g = 0.0;
                        }
                    }
                }
                sgd_step(
                    p.weights.data_mut(),
                    &wgrads[i],
                    &mut bufs.weights[i],
                    optim.momentum,
                    lr,
                    optim.weight_decay,
                )?;
                if let Some(mask) = &p.mask {
                    for ((w, b), &keep) in p.weights.data_mut().iter_mut().zip(bufs.weights[i].iter_mut()).zip(mask) {
                        if !keep {
                            *w = 0.0;
                            *b = 0.0;
                        }
                    }
                }
                sgd_step(p.bias.data_mut(), &bgrads[i], &mut bufs.bias[i], optim.momentum, lr, 0.0)?;
                if let (Some(lam), Some(buf)) = (p.lambdas.as_mut(), bufs.lambdas[i].as_mut()) {
                    let len = lam.len();
                    if learn_lambdas {
                        if let Some(lg) = &lambda_grads {
                            sgd_step(lam.data_mut(), &lg[offset..offset + len], buf, lambda_momentum, lambda_lr, 0.0)?;
                            for l in lam.data_mut() {
                                *l = l.max(optim.lambda_floor);
                            }
                        }
                    }
                    offset += len;
                }
            }
            if learn_lambdas && !group_grads.is_empty() {
                if bufs.group.len() != group_grads.len() {
                    bufs.group = vec![0.0; group_grads.len()];
                }
                sgd_step(
                    &mut model.group_lambdas,
                    &group_grads,
                    &mut bufs.group,
                    lambda_momentum,
                    lambda_lr,
                    0.0,
                )?;
                for l in &mut model.group_lambdas {
                    *l = l.max(optim.lambda_floor);
                }
            }
            record.steps += 1;
        }
        if batches == 0 {
            break;
        }
        record.epochs.push(epoch_record(
            &model,
            train_data,
            test_data,
            penalty,
            optim,
            &groups,
            epoch,
            lr,
            loss_sum / batches as f64,
            obj_sum / batches as f64,
        )?);
        record.epoch_seconds.push(started.elapsed().as_secs_f64());
        if optim.snapshot_every > 0 && (epoch + 1) % optim.snapshot_every == 0 {
            record.snapshots.push(Snapshot {
                epoch: epoch + 1,
                lambdas: model.penalized_lambdas(),
                weights: model.penalized_weights(),
            });
        }
        if exhausted {
            break;
        }
    }
    Ok((model, record))
}

#[allow(clippy::too_many_arguments)]
fn epoch_record(
    model: &Model,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    penalty: &PenaltyConfig,
    optim: &OptimConfig,
    groups: &[usize],
    epoch: usize,
    lr: f64,
    batch_loss: f64,
    batch_objective: f64,
) -> Result<EpochRecord> {
    let train_metrics = if optim.eval_train {
        Some(model.evaluate(train_data, optim.eval_chunk)?)
    } else {
        None
    };
    let test_metrics = test_data.map(|d| model.evaluate(d, optim.eval_chunk)).transpose()?;
    let (sparsity_exact, sparsity_thresholded) = sparsity_pair(model, optim.report_threshold);
    Ok(EpochRecord {
        epoch: epoch + 1,
        lr,
        batch_loss,
        batch_objective,
        train_loss: train_metrics.map(|m| m.loss),
        train_accuracy: train_metrics.and_then(|m| m.accuracy),
        test_loss: test_metrics.map(|m| m.loss),
        test_accuracy: test_metrics.and_then(|m| m.accuracy),
        penalty: model_penalty(model, penalty, groups)?,
        sparsity_exact,
        sparsity_thresholded,
    })
}
