//! Network specifications, parameter bookkeeping and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::engine::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub penalize_final: bool,
    pub task: Task,
}

impl ModelSpec {
    /// 784→300→100→10 fully connected network.
    pub fn lenet_300_100() -> Self {
        Self::mlp("lenet-300-100", 784, &[300, 100], 10)
    }

    /// Caffe LeNet-5 (20 and 50 conv filters, 500 hidden units) with all
    /// widths scaled by `width`.
    pub fn lenet5_caffe(width: f64) -> Self {
        let scale = |c: f64| ((c * width).round() as usize).max(1);
        let (c1, c2, h) = (scale(20.0), scale(50.0), scale(500.0));
        Self {
            name: format!("lenet5-caffe-x{width}"),
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: c1,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Conv {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: c2 * 16,
                    outputs: h,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: h,
                    outputs: 10,
                },
            ],
            penalize_final: true,
            task: Task::Classification { classes: 10 },
        }
    }

    /// ReLU multilayer perceptron.
    pub fn mlp(name: &str, inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: classes,
        });
        Self {
            name: name.to_string(),
            input_shape: vec![inputs],
            layers,
            penalize_final: true,
            task: Task::Classification { classes },
        }
    }

    /// Single-output linear regression on `p` features.
    pub fn linear(p: usize) -> Self {
        Self {
            name: format!("linear-{p}"),
            input_shape: vec![p],
            layers: vec![LayerSpec::Dense { inputs: p, outputs: 1 }],
            penalize_final: true,
            task: Task::Regression,
        }
    }

    /// Checks adjacent extents and returns each layer's per-sample output
    /// shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let spec_err = |msg: String| Err(Error::Config(format!("model {}: {msg}", self.name)));
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if shape.len() != 1 || shape[0] != inputs {
                        return spec_err(format!("layer {i} dense expects [{inputs}], receives {shape:?}"));
                    }
                    vec![outputs]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return spec_err(format!(
                            "layer {i} conv expects {in_channels} channels, receives {shape:?}"
                        ));
                    }
                    if stride == 0 || kernel > shape[1] + 2 * padding || kernel > shape[2] + 2 * padding {
                        return spec_err(format!("layer {i} conv kernel {kernel} does not fit {shape:?}"));
                    }
                    vec![
                        out_channels,
                        (shape[1] + 2 * padding - kernel) / stride + 1,
                        (shape[2] + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { window } => {
                    if shape.len() != 3 || window == 0 || shape[1] % window != 0 || shape[2] % window != 0 {
                        return spec_err(format!("layer {i} pool {window} does not divide {shape:?}"));
                    }
                    vec![shape[0], shape[1] / window, shape[2] / window]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            shapes.push(shape.clone());
        }
        let expected_out = match self.task {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        };
        if shape != [expected_out] {
            return spec_err(format!("final output {shape:?}, task needs [{expected_out}]"));
        }
        let parametric = self.layers.iter().filter(|l| l.is_parametric()).count();
        let penalizable = if self.penalize_final {
            parametric
        } else {
            parametric.saturating_sub(1)
        };
        if penalizable == 0 {
            return spec_err("no penalizable layer".into());
        }
        Ok(shapes)
    }

    pub fn parametric_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parametric())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Trainable state of one dense or convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Index into `ModelSpec::layers`.
    pub layer: usize,
    /// Dense: inputs × outputs. Conv: F × C × k × k.
    pub weights: Tensor,
    pub bias: Tensor,
    /// Per-weight regularization coefficients; present only on penalized
    /// layers.
    pub lambdas: Option<Tensor>,
    /// Keep flags for pruned layers; dropped weights stay at exactly zero.
    pub mask: Option<Vec<bool>>,
}

impl LayerParams {
    pub fn is_penalized(&self) -> bool {
        self.lambdas.is_some()
    }
}

/// Penalized weights of one layer in the global ordering.
#[derive(Clone, Copy, Debug)]
pub struct PenalizedSlice<'a> {
    pub layer: usize,
    pub weights: &'a [f64],
    pub lambdas: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: Vec<LayerParams>,
    /// Shared or per-group coefficients used by the grouped penalties.
    pub group_lambdas: Vec<f64>,
}

/// Loss and accuracy of a model on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Fraction correct for classification; `None` for regression.
    pub accuracy: Option<f64>,
}

/// Tape handles produced by [`Model::record`].
#[derive(Debug)]
pub struct Trace {
    pub output: Var,
    /// (weights, bias) per parametric layer.
    pub params: Vec<(Var, Var)>,
}

pub const INIT_SCHEME: &str = "he-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias";

/// Builds a model with He-style uniform weights, zero biases and every
/// regularization coefficient at 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parametric = spec.parametric_layers();
    let last = *parametric.last().expect("validated");
    let mut params = Vec::with_capacity(parametric.len());
    for &li in &parametric {
        let (shape, fan_in, outputs) = match spec.layers[li] {
            LayerSpec::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels,
            ),
            _ => unreachable!(),
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let penalized = li != last || spec.penalize_final;
        params.push(LayerParams {
            layer: li,
            lambdas: penalized.then(|| Tensor::full(&shape, 1.0)),
            weights: Tensor::new(shape, data)?,
            bias: Tensor::zeros(&[outputs]),
            mask: None,
        });
    }
    Ok(Model {
        spec: spec.clone(),
        seed,
        params,
        group_lambdas: Vec::new(),
    })
}

impl Model {
    pub fn total_parameters(&self) -> usize {
        self.params.iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// Penalized weights in deterministic order (layer index, then
    /// row-major). Biases are never included.
    pub fn penalized_params(&self) -> Vec<PenalizedSlice<'_>> {
        self.params
            .iter()
            .filter_map(|p| {
                p.lambdas.as_ref().map(|l| PenalizedSlice {
                    layer: p.layer,
                    weights: p.weights.data(),
                    lambdas: l.data(),
                })
            })
            .collect()
    }

    pub fn penalized_count(&self) -> usize {
        self.penalized_params().iter().map(|s| s.weights.len()).sum()
    }

    pub fn penalized_weights(&self) -> Vec<f64> {
        self.penalized_params()
            .iter()
            .flat_map(|s| s.weights.iter().copied())
            .collect()
    }

    pub fn penalized_lambdas(&self) -> Vec<f64> {
        self.penalized_params()
            .iter()
            .flat_map(|s| s.lambdas.iter().copied())
            .collect()
    }

    /// Lengths of the penalized layers in order.
    pub fn penalized_layout(&self) -> Vec<usize> {
        self.penalized_params().iter().map(|s| s.weights.len()).collect()
    }

    /// Per penalized layer, the number of weights feeding each output unit
    /// (dense column or conv filter) and the unit count.
    pub fn penalized_units(&self) -> Vec<(usize, usize)> {
        self.params
            .iter()
            .filter(|p| p.is_penalized())
            .map(|p| {
                let s = p.weights.shape();
                match self.spec.layers[p.layer] {
                    LayerSpec::Dense { .. } => (s[0], s[1]),
                    _ => (s[1] * s[2] * s[3], s[0]),
                }
            })
            .collect()
    }

    /// Writes a flat vector back over the penalized weights.
    pub fn set_penalized_weights(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.penalized_count() {
            return Err(Error::Contract(format!(
                "{} values for {} penalized weights",
                flat.len(),
                self.penalized_count()
            )));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().filter(|p| p.lambdas.is_some()) {
            let n = p.weights.len();
            p.weights.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn batch_view(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.shape().first().copied().unwrap_or(0);
        let per: usize = self.spec.input_shape.iter().product();
        if batch.len() != n * per {
            return Err(Error::Dimension(format!(
                "batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.spec.input_shape);
        batch.clone().reshape(shape)
    }

    /// Records the forward pass on `tape`, registering every weight and bias
    /// as a differentiable leaf.
    pub fn record(&self, tape: &mut Tape, batch: &Tensor) -> Result<Trace> {
        let x = self.batch_view(batch)?;
        let mut h = tape.leaf(x, false);
        let mut params = Vec::with_capacity(self.params.len());
        let mut next = self.params.iter();
        for layer in &self.spec.layers {
            h = match *layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let p = next.next().expect("parametric layer");
                    let w = tape.leaf(p.weights.clone(), true);
                    let b = tape.leaf(p.bias.clone(), true);
                    params.push((w, b));
                    let z = match *layer {
                        LayerSpec::Conv { stride, padding, .. } => tape.conv2d(h, w, stride, padding)?,
                        _ => tape.matmul(h, w)?,
                    };
                    tape.add_bias(z, b)?
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::MaxPool { window } => tape.maxpool2d(h, window)?,
                LayerSpec::Flatten => {
                    let s = tape.value(h).shape();
                    let n = s[0];
                    let rest = s[1..].iter().product();
                    tape.reshape(h, vec![n, rest])?
                }
            };
        }
        Ok(Trace { output: h, params })
    }

    /// Tape-free forward pass. With `capture`, also returns the output of
    /// every parametric layer after its activation, reduced to N × units
    /// (conv maps are averaged over space).
    pub fn forward(&self, batch: &Tensor, capture: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.batch_view(batch)?;
        let mut captured = Vec::new();
        let mut pending = false;
        let mut next = self.params.iter();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let p = next.next().expect("parametric layer");
                    let n = h.shape()[0];
                    if h.rank() != 2 || h.shape()[1] != inputs {
                        return Err(Error::Dimension(format!(
                            "dense {inputs}->{outputs} receives {:?}",
                            h.shape()
                        )));
                    }
                    let mut out = vec![0.0; n * outputs];
                    for row in out.chunks_mut(outputs) {
                        row.copy_from_slice(p.bias.data());
                    }
                    kernels::gemm(n, inputs, outputs, h.data(), false, p.weights.data(), false, &mut out, 1.0);
                    Tensor::new(vec![n, outputs], out)?
                }
                LayerSpec::Conv { stride, padding, .. } => {
                    let p = next.next().expect("parametric layer");
                    let g = kernels::ConvGeometry::from_shapes(h.shape(), p.weights.shape(), stride, padding)?;
                    let mut out = kernels::conv2d_forward(&g, h.data(), p.weights.data());
                    let inner = g.out_h() * g.out_w();
                    for (j, v) in out.iter_mut().enumerate() {
                        *v += p.bias.data()[(j / inner) % g.filters];
                    }
                    Tensor::new(g.out_shape(), out)?
                }
                LayerSpec::Relu => {
                    let data = h.data().iter().map(|v| v.max(0.0)).collect();
                    Tensor::new(h.shape().to_vec(), data)?
                }
                LayerSpec::MaxPool { window } => {
                    let (shape, out, _) = kernels::maxpool2d_forward(h.shape(), h.data(), window)?;
                    Tensor::new(shape, out)?
                }
                LayerSpec::Flatten => {
                    let n = h.shape()[0];
                    let rest = h.len() / n.max(1);
                    h.reshape(vec![n, rest])?
                }
            };
            if capture {
                if layer.is_parametric() {
                    pending = true;
                }
                let activation_follows = matches!(self.spec.layers.get(i + 1), Some(LayerSpec::Relu));
                if pending && !(layer.is_parametric() && activation_follows) {
                    captured.push(per_unit_view(&h)?);
                    pending = false;
                }
            }
        }
        Ok((h, captured))
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, false)?.0)
    }

    /// Loss and accuracy over `data`, evaluated in fixed chunks whose
    /// partial sums are reduced in chunk order.
    pub fn evaluate(&self, data: &Dataset, chunk: usize) -> Result<Metrics> {
        self.evaluate_with(data, chunk, true)
    }

    /// As [`Model::evaluate`] but always sequential.
    pub fn evaluate_sequential(&self, data: &Dataset, chunk: usize) -> Result<Metrics> {
        self.evaluate_with(data, chunk, false)
    }

    fn evaluate_with(&self, data: &Dataset, chunk: usize, parallel: bool) -> Result<Metrics> {
        let n = data.len();
        let chunk = chunk.max(1);
        let chunks = n.div_ceil(chunk);
        let eval_chunk = |c: usize| -> Result<(f64, usize)> {
            let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(n)).collect();
            let (x, t) = data.batch(&idx)?;
            let out = self.predict(&x)?;
            Ok(match &t {
                Targets::Classes { labels, .. } => {
                    let k = out.shape()[1];
                    let loss: f64 = kernels::cross_entropy_rows(out.data(), k, labels).iter().sum();
                    let correct = out
                        .data()
                        .chunks(k)
                        .zip(labels)
                        .filter(|(row, &l)| kernels::argmax(row) == l)
                        .count();
                    (loss, correct)
                }
                Targets::Real(y) => {
                    let loss = out.data().iter().zip(y).map(|(p, t)| 0.5 * (p - t) * (p - t)).sum();
                    (loss, 0)
                }
            })
        };
        let parts = if parallel {
            par::map_indexed(chunks, eval_chunk)
        } else {
            par::map_indexed_seq(chunks, eval_chunk)
        };
        let (mut loss, mut correct) = (0.0, 0usize);
        for part in parts {
            let (l, c) = part?;
            loss += l;
            correct += c;
        }
        let denom = n.max(1) as f64;
        Ok(Metrics {
            loss: loss / denom,
            accuracy: data.labels().map(|_| correct as f64 / denom),
        })
    }

    /// Activations of every parametric layer on `data` (N × units each).
    pub fn activations(&self, data: &Dataset) -> Result<Vec<Tensor>> {
        Ok(self.forward(&data.inputs, true)?.1)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Model::from_bytes(&bytes)
    }

    /// Checkpoint layout: `SRK1`, u32 spec length, spec JSON, u64 seed, then
    /// per parametric layer the weights, bias and (if penalized) lambdas as
    /// little-endian f64; then u32 group-coefficient count and values; then
    /// one byte per layer flagging a mask followed by its keep bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = serde_json::to_vec(&self.spec).map_err(|e| Error::Contract(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&self.seed.to_le_bytes());
        let put = |out: &mut Vec<u8>, t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            put(&mut out, &p.weights);
            put(&mut out, &p.bias);
            if let Some(l) = &p.lambdas {
                put(&mut out, l);
            }
        }
        out.extend_from_slice(&(self.group_lambdas.len() as u32).to_le_bytes());
        for v in &self.group_lambdas {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            match &p.mask {
                Some(mask) => {
                    out.push(1);
                    out.extend(mask.iter().map(|&k| k as u8));
                }
                None => out.push(0),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "missing SRK1 magic".into(),
            });
        }
        let spec_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?).map_err(|e| Error::Format {
            offset: 8,
            message: format!("bad spec: {e}"),
        })?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let mut model = build_model(&spec, seed)?;
        for p in &mut model.params {
            r.fill(p.weights.data_mut())?;
            r.fill(p.bias.data_mut())?;
            if let Some(l) = p.lambdas.as_mut() {
                r.fill(l.data_mut())?;
            }
        }
        let groups = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        model.group_lambdas = vec![0.0; groups];
        r.fill(&mut model.group_lambdas)?;
        for p in &mut model.params {
            if r.take(1)?[0] == 1 {
                let n = p.weights.len();
                p.mask = Some(r.take(n)?.iter().map(|&b| b != 0).collect());
            }
        }
        Ok(model)
    }
}

fn per_unit_view(h: &Tensor) -> Result<Tensor> {
    let s = h.shape();
    match s.len() {
        2 => Ok(h.clone()),
        4 => {
            let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
            let data = h
                .data()
                .chunks(inner)
                .map(|plane| plane.iter().sum::<f64>() / inner as f64)
                .collect();
            Tensor::new(vec![n, c], data)
        }
        _ => Err(Error::Dimension(format!("cannot view {s:?} as samples × units"))),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated checkpoint, wanted {n} more bytes"),
        })?;
        self.pos = end;
        Ok(slice)
    }

    fn fill(&mut self, dst: &mut [f64]) -> Result<()> {
        let raw = self.take(dst.len() * 8)?;
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}
