//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use halo_core::models::ModelSpec;
use halo_core::optim::OptimConfig;
use halo_core::penalties::{GroupMap, HKind, McpForm, PenaltyConfig, PenaltyKind};
use halo_core::{Error, Result};

/// Every accepted key with its default; `None` marks keys that are required
/// (possibly only in some configurations).
const KEYS: &[(&str, Option<&str>)] = &[
    ("model", None),
    ("hidden", Some("")),
    ("width", Some("1")),
    ("penalize_final", Some("true")),
    ("dataset", None),
    ("mnist_dir", Some("data/mnist-sample")),
    ("train_size", Some("0")),
    ("test_size", Some("0")),
    ("label_noise", Some("0")),
    ("n", Some("200")),
    ("test_n", Some("0")),
    ("p", Some("50")),
    ("s", Some("5")),
    ("noise_sd", Some("0.5")),
    ("coef_scale", Some("1")),
    ("data_seed", Some("0")),
    ("kind", None),
    ("xi", None),
    ("psi", None),
    ("xi_equals_psi", Some("false")),
    ("gamma", Some("3")),
    ("q", Some("1")),
    ("h_kind", Some("inv_pow")),
    ("k", Some("2")),
    ("mcp_form", Some("standard")),
    ("group_map", Some("layer")),
    ("lr0", Some("0.1")),
    ("momentum", Some("0.9")),
    ("weight_decay", Some("0")),
    ("schedule", Some("")),
    ("epochs", Some("1")),
    ("batch_size", Some("100")),
    ("seed", Some("0")),
    ("lambda_floor", Some("1e-8")),
    ("lambda_lr0", Some("")),
    ("lambda_momentum", Some("")),
    ("freeze_lambdas", Some("false")),
    ("report_threshold", Some("1e-3")),
    ("snapshot_every", Some("0")),
    ("max_steps", Some("")),
    ("eval_train", Some("true")),
    ("eval_chunk", Some("500")),
    ("probe_size", Some("0")),
    ("out_dir", None),
];

pub const ECHO_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        n: usize,
        test_n: usize,
        p: usize,
        s: usize,
        noise_sd: f64,
        coef_scale: f64,
        seed: u64,
    },
    Mnist {
        dir: PathBuf,
        train_size: usize,
        test_size: usize,
        label_noise: f64,
    },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub penalty: PenaltyConfig,
    pub optim: OptimConfig,
    /// Probe samples whose hidden activations are stored after training.
    pub probe_size: usize,
    pub out_dir: Option<PathBuf>,
    /// All keys except `out_dir`, defaults filled.
    pub resolved: BTreeMap<String, String>,
}

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let key = key.trim().to_string();
        if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {key:?} given twice", i + 1)));
        }
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_pairs(parse_pairs(&text)?)
    }

    pub fn from_pairs(mut pairs: BTreeMap<String, String>) -> Result<Self> {
        let unknown: Vec<&str> = pairs
            .keys()
            .filter(|k| !KEYS.iter().any(|(name, _)| name == k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }

        if parse_bool("xi_equals_psi", pairs.get("xi_equals_psi").map_or("false", String::as_str))? {
            match (pairs.get("xi").cloned(), pairs.get("psi").cloned()) {
                (Some(xi), Some(psi)) => {
                    if parse_f64("xi", &xi)? != parse_f64("psi", &psi)? {
                        return Err(Error::Config(format!(
                            "xi_equals_psi is set but xi = {xi} and psi = {psi} differ"
                        )));
                    }
                }
                (Some(xi), None) => {
                    pairs.insert("psi".into(), xi);
                }
                (None, Some(psi)) => {
                    pairs.insert("xi".into(), psi);
                }
                (None, None) => {}
            }
        }

        let mut missing = Vec::new();
        for key in ["model", "dataset", "kind"] {
            if !pairs.contains_key(key) {
                missing.push(key);
            }
        }
        if let Some(kind) = pairs.get("kind") {
            let kind: PenaltyKind = kind.parse()?;
            if kind != PenaltyKind::None && !pairs.contains_key("xi") {
                missing.push("xi");
            }
            if kind.uses_psi() && !pairs.contains_key("psi") {
                missing.push("psi");
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required config keys: {}", missing.join(", "))));
        }

        let out_dir = pairs.remove("out_dir").map(PathBuf::from);
        let mut resolved = BTreeMap::new();
        for (key, default) in KEYS {
            if *key == "out_dir" {
                continue;
            }
            let value = match (pairs.get(*key), default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.to_string(),
                // Conditionally required keys that this configuration ignores.
                (None, None) => "0".to_string(),
            };
            resolved.insert(key.to_string(), value);
        }
        let get = |k: &str| resolved[k].as_str();

        let penalty = PenaltyConfig {
            kind: get("kind").parse()?,
            xi: parse_f64("xi", get("xi"))?,
            psi: parse_f64("psi", get("psi"))?,
            gamma: parse_f64("gamma", get("gamma"))?,
            q: parse_f64("q", get("q"))?,
            h_kind: get("h_kind").parse::<HKind>()?,
            k: parse_f64("k", get("k"))?,
            mcp_form: get("mcp_form").parse::<McpForm>()?,
            group_map: get("group_map").parse::<GroupMap>()?,
        };
        penalty.validate()?;

        let optim = OptimConfig {
            lr0: parse_f64("lr0", get("lr0"))?,
            momentum: parse_f64("momentum", get("momentum"))?,
            weight_decay: parse_f64("weight_decay", get("weight_decay"))?,
            schedule: parse_schedule(get("schedule"))?,
            epochs: parse_usize("epochs", get("epochs"))?,
            batch_size: parse_usize("batch_size", get("batch_size"))?,
            seed: parse_u64("seed", get("seed"))?,
            lambda_floor: parse_f64("lambda_floor", get("lambda_floor"))?,
            lambda_lr0: optional(get("lambda_lr0"), |v| parse_f64("lambda_lr0", v))?,
            lambda_momentum: optional(get("lambda_momentum"), |v| parse_f64("lambda_momentum", v))?,
            freeze_lambdas: parse_bool("freeze_lambdas", get("freeze_lambdas"))?,
            report_threshold: parse_f64("report_threshold", get("report_threshold"))?,
            snapshot_every: parse_usize("snapshot_every", get("snapshot_every"))?,
            max_steps: optional(get("max_steps"), |v| parse_usize("max_steps", v))?,
            eval_train: parse_bool("eval_train", get("eval_train"))?,
            eval_chunk: parse_usize("eval_chunk", get("eval_chunk"))?,
        };
        optim.validate()?;

        let data = match get("dataset") {
            "synthetic" => DataSource::Synthetic {
                n: parse_usize("n", get("n"))?,
                test_n: parse_usize("test_n", get("test_n"))?,
                p: parse_usize("p", get("p"))?,
                s: parse_usize("s", get("s"))?,
                noise_sd: parse_f64("noise_sd", get("noise_sd"))?,
                coef_scale: parse_f64("coef_scale", get("coef_scale"))?,
                seed: parse_u64("data_seed", get("data_seed"))?,
            },
            "mnist" => DataSource::Mnist {
                dir: PathBuf::from(get("mnist_dir")),
                train_size: parse_usize("train_size", get("train_size"))?,
                test_size: parse_usize("test_size", get("test_size"))?,
                label_noise: parse_f64("label_noise", get("label_noise"))?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset {other:?}; expected synthetic or mnist"
                )))
            }
        };

        let mut model = match (get("model"), &data) {
            ("linear", DataSource::Synthetic { p, .. }) => ModelSpec::linear(*p),
            ("linear", _) => return Err(Error::Config("model linear needs dataset synthetic".into())),
            (_, DataSource::Synthetic { .. }) => {
                return Err(Error::Config("dataset synthetic needs model linear".into()))
            }
            ("mlp", _) => {
                let hidden = parse_list("hidden", get("hidden"), |v| parse_usize("hidden", v))?;
                ModelSpec::mlp("mlp", 784, &hidden, 10)
            }
            ("lenet_300_100", _) => ModelSpec::lenet_300_100(),
            ("lenet5_caffe", _) => ModelSpec::lenet5_caffe(parse_f64("width", get("width"))?),
            (other, _) => {
                return Err(Error::Config(format!(
                    "unknown model {other:?}; expected linear, mlp, lenet_300_100 or lenet5_caffe"
                )))
            }
        };
        model.penalize_final = parse_bool("penalize_final", get("penalize_final"))?;
        model.validate()?;

        Ok(Self {
            model,
            data,
            penalty,
            optim,
            probe_size: parse_usize("probe_size", get("probe_size"))?,
            out_dir,
            resolved,
        })
    }

    /// Sorted `key = value` lines; feeding them back reproduces the run.
    pub fn echo(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Copy with some keys replaced, re-validated.
    pub fn with_overrides(&self, overrides: &[(&str, String)]) -> Result<Self> {
        let mut pairs = self.resolved.clone();
        for (k, v) in overrides {
            pairs.insert(k.to_string(), v.clone());
        }
        if let Some(dir) = &self.out_dir {
            pairs.insert("out_dir".into(), dir.display().to_string());
        }
        Self::from_pairs(pairs)
    }
}

fn optional<T>(value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

pub fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

pub fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

pub fn parse_list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse(v.trim()))
        .collect::<Result<_>>()
        .map_err(|e| Error::Config(format!("{key}: {e}")))
}

/// `epoch:multiplier` pairs, e.g. `80:0.1,120:0.1`.
fn parse_schedule(value: &str) -> Result<Vec<(usize, f64)>> {
    parse_list("schedule", value, |item| {
        let (e, m) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected epoch:multiplier, got {item:?}")))?;
        Ok((parse_usize("schedule", e.trim())?, parse_f64("schedule", m.trim())?))
    })
}
