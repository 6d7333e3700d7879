//! Datasets: synthetic sparse regression with known support, IDX image
//! files, label corruption and mini-batching.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real(y) => Targets::Real(indices.iter().map(|&i| y[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// N × features (images are flattened row-major).
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: String,
    pub provenance: String,
    /// Labels before corruption, kept for gap analysis.
    pub clean_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, split: &str, provenance: &str) -> Result<Self> {
        let rows = inputs.shape().first().copied().unwrap_or(0);
        if rows != targets.len() {
            return Err(Error::Dimension(format!(
                "{rows} input rows but {} targets",
                targets.len()
            )));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self {
            inputs,
            targets,
            split: split.to_string(),
            provenance: provenance.to_string(),
            clean_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.inputs.len() / self.len().max(1)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Real(_) => None,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        Ok((self.inputs.gather_rows(indices)?, self.targets.gather(indices)))
    }

    /// The first `n` rows (or all of them when fewer exist).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, targets) = self.batch(&idx)?;
        let mut out = Dataset::new(inputs, targets, &self.split, &self.provenance)?;
        out.clean_labels = self
            .clean_labels
            .as_ref()
            .map(|c| idx.iter().map(|&i| c[i]).collect());
        Ok(out)
    }

    /// Design matrix as row-major rows and the real responses.
    pub fn regression_view(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let Targets::Real(y) = &self.targets else {
            return Err(Error::Contract("dataset has class labels, not responses".into()));
        };
        let p = self.num_features();
        let rows = self.inputs.data().chunks(p.max(1)).map(|r| r.to_vec()).collect();
        Ok((rows, y.clone()))
    }

    /// CSV dump: header `x0,…,x{p-1},y`, one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let p = self.num_features();
        let header: Vec<String> = (0..p).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, row) in self.inputs.data().chunks(p.max(1)).enumerate() {
            let target = match &self.targets {
                Targets::Classes { labels, .. } => labels[i].to_string(),
                Targets::Real(y) => format!("{:?}", y[i]),
            };
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{},{}", cells.join(","), target)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mini-batch index lists for one epoch; shuffled when `rng` is given.
pub fn epoch_batches(n: usize, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug)]
pub struct SparseLinear {
    pub dataset: Dataset,
    /// Sorted indices of the nonzero coefficients.
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
}

/// `y = X w + noise` with standard-normal `X`, `s` nonzero coefficients of
/// magnitude `coef_scale` and random signs.
pub fn gen_sparse_linear(
    n: usize,
    p: usize,
    s: usize,
    noise_sd: f64,
    coef_scale: f64,
    seed: u64,
) -> Result<SparseLinear> {
    if s > p {
        return Err(Error::Config(format!("support size {s} exceeds dimension {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let mut support = index::sample(&mut rng, p, s).into_vec();
    support.sort_unstable();
    let mut coefficients = vec![0.0; p];
    for &j in &support {
        coefficients[j] = if rng.gen::<bool>() { coef_scale } else { -coef_scale };
    }
    let y: Vec<f64> = x
        .chunks(p.max(1))
        .map(|row| {
            let signal: f64 = row.iter().zip(&coefficients).map(|(a, b)| a * b).sum();
            let eps: f64 = rng.sample(StandardNormal);
            signal + noise_sd * eps
        })
        .collect();
    let provenance = format!(
        "sparse_linear n={n} p={p} s={s} noise_sd={noise_sd} coef_scale={coef_scale} seed={seed}"
    );
    let dataset = Dataset::new(Tensor::new(vec![n, p], x)?, Targets::Real(y), "train", &provenance)?;
    Ok(SparseLinear {
        dataset,
        support,
        coefficients,
    })
}

/// Flips each label with probability `rho` to a uniformly chosen different
/// class. The original labels are kept in `clean_labels`.
pub fn corrupt_labels(dataset: &Dataset, rho: f64, num_classes: usize, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("corruption rate {rho} outside [0, 1]")));
    }
    if num_classes < 2 && rho > 0.0 {
        return Err(Error::Config("label corruption needs at least two classes".into()));
    }
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Contract("label corruption needs class labels".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = labels
        .iter()
        .map(|&label| {
            if rng.gen::<f64>() < rho {
                let r = rng.gen_range(0..num_classes - 1);
                if r >= label {
                    r + 1
                } else {
                    r
                }
            } else {
                label
            }
        })
        .collect();
    let mut out = Dataset::new(
        dataset.inputs.clone(),
        Targets::Classes {
            labels: noisy,
            num_classes,
        },
        &dataset.split,
        &format!("{} corrupt_labels rho={rho} seed={seed}", dataset.provenance),
    )?;
    out.clean_labels = Some(dataset.clean_labels.clone().unwrap_or_else(|| labels.to_vec()));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated image data: expected {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated label data: expected {count} bytes, found {}", body.len()),
        });
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes IDX bytes, gzip-compressed when the path ends in `.gz`.
pub fn write_idx_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes)?;
        w.flush()?;
    }
    Ok(())
}

pub fn save_idx(images_path: &Path, labels_path: &Path, images: &IdxImages, labels: &[u8]) -> Result<()> {
    write_idx_file(images_path, &encode_idx_images(images))?;
    write_idx_file(labels_path, &encode_idx_labels(labels))
}

/// Reads an IDX image/label pair (plain or gzip). Pixels are scaled to
/// `[0, 1]`; inputs are N × (rows·cols).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_all(images_path)?;
    let label_bytes = read_all(labels_path)?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != images.count {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "label count {} does not match image count {}",
                labels.len(),
                images.count
            ),
        });
    }
    let inputs = Tensor::new(
        vec![images.count, images.rows * images.cols],
        images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    Dataset::new(
        inputs,
        Targets::Classes {
            labels: labels.iter().map(|&l| l as usize).collect(),
            num_classes,
        },
        "",
        &images_path.display().to_string(),
    )
}

/// Loads `train-*` and `t10k-*` IDX pairs from a directory, preferring
/// gzipped files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let pick = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let mut train = load_idx(&pick("train-images-idx3-ubyte"), &pick("train-labels-idx1-ubyte"))?;
    let mut test = load_idx(&pick("t10k-images-idx3-ubyte"), &pick("t10k-labels-idx1-ubyte"))?;
    train.split = "train".into();
    test.split = "test".into();
    Ok((train, test))
}
