//! Data loading, training and the artifacts of a run directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use halo_core::data::{corrupt_labels, gen_sparse_linear, load_mnist_dir, Dataset, Targets};
use halo_core::engine::Tensor;
use halo_core::models::{build_model, Model};
use halo_core::optim::{train, RunRecord};
use halo_core::{Error, Result};

use crate::config::{DataSource, RunConfig, ECHO_FILE};

pub const RECORD_FILE: &str = "run.jsonl";
pub const INIT_FILE: &str = "init.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const SNAPSHOT_FILE: &str = "snapshots.jsonl";
pub const ACTIVATION_FILE: &str = "activations.bin";
pub const TIMING_FILE: &str = "timings.csv";

const ACTIVATION_MAGIC: &[u8; 4] = b"ACT1";

pub struct Data {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Data {
    /// Held-out split when there is one, otherwise the training set.
    pub fn eval_set(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.data {
        DataSource::Synthetic {
            n,
            test_n,
            p,
            s,
            noise_sd,
            coef_scale,
            seed,
        } => {
            let all = gen_sparse_linear(n + test_n, *p, *s, *noise_sd, *coef_scale, *seed)?.dataset;
            if *test_n == 0 {
                return Ok(Data { train: all, test: None });
            }
            let (rows, y) = all.regression_view()?;
            let part = |range: std::ops::Range<usize>, split: &str| {
                let x: Vec<f64> = rows[range.clone()].iter().flatten().copied().collect();
                Dataset::new(
                    Tensor::new(vec![range.len(), *p], x)?,
                    Targets::Real(y[range].to_vec()),
                    split,
                    &all.provenance,
                )
            };
            Ok(Data {
                train: part(0..*n, "train")?,
                test: Some(part(*n..n + test_n, "test")?),
            })
        }
        DataSource::Mnist {
            dir,
            train_size,
            test_size,
            label_noise,
        } => {
            let (mut train, mut test) = load_mnist_dir(dir)?;
            if *train_size > 0 {
                train = train.head(*train_size)?;
            }
            if *test_size > 0 {
                test = test.head(*test_size)?;
            }
            if *label_noise > 0.0 {
                train = corrupt_labels(&train, *label_noise, 10, cfg.optim.seed)?;
            }
            Ok(Data { train, test: Some(test) })
        }
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub record: RunRecord,
}

/// Trains from the configuration and writes every run artifact into `out`.
pub fn train_run(cfg: &RunConfig, data: &Data, out: &Path) -> Result<TrainOutput> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(ECHO_FILE), cfg.echo())?;
    let initial = build_model(&cfg.model, cfg.optim.seed)?;
    let (model, record) = train(&initial, &data.train, data.test.as_ref(), &cfg.penalty, &cfg.optim)?;
    initial.save_checkpoint(&out.join(INIT_FILE))?;
    model.save_checkpoint(&out.join(MODEL_FILE))?;
    record.write_jsonl(&out.join(RECORD_FILE))?;
    if !record.snapshots.is_empty() {
        record.write_snapshots(&out.join(SNAPSHOT_FILE))?;
    }
    if cfg.probe_size > 0 {
        let probe = data.eval_set().head(cfg.probe_size.min(data.eval_set().len()))?;
        let features = model
            .activations(&probe)?
            .iter()
            .map(probe_features)
            .collect::<Result<Vec<_>>>()?;
        write_activations(&out.join(ACTIVATION_FILE), &features)?;
    }
    record.write_timings(&out.join(TIMING_FILE))?;
    Ok(TrainOutput {
        model,
        record,
    })
}

/// N × units view of a layer's activations; convolutional maps are averaged
/// over space per channel.
pub fn probe_features(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Ok(t.clone());
    }
    let (n, c, area) = (s[0], s[1], s[2] * s[3]);
    let means = t
        .data()
        .chunks(area.max(1))
        .map(|plane| plane.iter().sum::<f64>() / area.max(1) as f64)
        .collect();
    Tensor::new(vec![n, c], means)
}

/// Output directory: the command-line override, else the config's `out_dir`.
pub fn resolve_out(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("missing required config keys: out_dir".into()))
}

/// Magic, layer count, then per layer rows, columns and values, all little
/// endian.
pub fn write_activations(path: &Path, layers: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ACTIVATION_MAGIC)?;
    w.write_all(&(layers.len() as u64).to_le_bytes())?;
    for t in layers {
        let rows = t.shape()[0];
        let cols = t.len() / rows.max(1);
        w.write_all(&(rows as u64).to_le_bytes())?;
        w.write_all(&(cols as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes.get(pos..pos + n).ok_or_else(|| Error::Format {
            offset: pos as u64,
            message: "truncated activation file".into(),
        })?;
        pos += n;
        Ok(chunk)
    };
    if take(4)? != ACTIVATION_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not an activation file".into(),
        });
    }
    let word = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
    let count = word(take(8)?);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = word(take(8)?);
        let cols = word(take(8)?);
        let data = take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        layers.push(Tensor::new(vec![rows, cols], data)?);
    }
    Ok(layers)
}
