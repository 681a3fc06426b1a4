//! Run configuration: a JSON document plus `--key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Parity,
    Bars,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// IDX image file, required when `kind` is `idx`.
    pub path: Option<PathBuf>,
    /// Number of generated items for synthetic kinds; a cap for `idx`
    /// (0 keeps everything).
    pub count: usize,
    pub seq_len: usize,
    pub flip: f64,
    pub side: usize,
    pub bar_prob: f64,
    pub bits: u32,
    /// Pooling factor applied to IDX images before quantization
    /// (2 turns 28×28 into 14×14, 1 keeps full resolution).
    pub downsample: usize,
    /// Optional `[rows, cols]` raster shape for 1-D datasets.
    pub shape: Option<[usize; 2]>,
    pub fractions: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Parity,
            path: None,
            count: 2000,
            seq_len: 16,
            flip: 0.05,
            side: 8,
            bar_prob: 0.2,
            bits: 1,
            downsample: 2,
            shape: None,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed: 16,
            hidden: 64,
            layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterSpec {
    pub horizon: usize,
    pub last_token: bool,
    pub noise: bool,
    pub use_hidden: bool,
    /// Post-hoc KL steps with the model frozen, after joint training.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ForecasterSpec {
    fn default() -> Self {
        Self {
            horizon: 1,
            last_token: true,
            noise: false,
            use_hidden: true,
            steps: 1000,
            batch_size: 32,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Joint forecasting weight; 0 trains the model alone.
    pub forecast_weight: f64,
    pub eval_every: usize,
    pub eval_items: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-6,
            forecast_weight: 0.01,
            eval_every: 250,
            eval_items: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Any of `baseline`, `zeros`, `predict-last`, `fpi`, `learned`.
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    /// Batches drawn per seed; a row reports their mean.
    pub batches_per_seed: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            strategies: ["baseline", "zeros", "predict-last", "fpi", "learned"]
                .map(String::from)
                .to_vec(),
            seeds: (0..10).collect(),
            batch_sizes: vec![1],
            batches_per_seed: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapsSpec {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for MapsSpec {
    fn default() -> Self {
        Self {
            strategies: ["baseline", "zeros", "fpi"].map(String::from).to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    pub cases: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self { cases: 240 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data, initialization and training.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub forecaster: ForecasterSpec,
    pub train: TrainSpec,
    pub bench: BenchSpec,
    pub maps: MapsSpec,
    pub verify: VerifySpec,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            forecaster: ForecasterSpec::default(),
            train: TrainSpec::default(),
            bench: BenchSpec::default(),
            maps: MapsSpec::default(),
            verify: VerifySpec::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const STRATEGY_NAMES: [&str; 5] = ["baseline", "zeros", "predict-last", "fpi", "learned"];

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, UsageError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("--config: cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| UsageError(format!("--config: {e}")))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| UsageError(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let fail = |field: &str, why: &str| Err(UsageError(format!("--{field}: {why}")));
        if self.bench.seeds.is_empty() {
            return fail("bench.seeds", "must be nonempty");
        }
        for s in self.bench.strategies.iter().chain(&self.maps.strategies) {
            if !STRATEGY_NAMES.contains(&s.as_str()) {
                return fail("bench.strategies", &format!("unknown strategy {s:?}"));
            }
        }
        if self.bench.batch_sizes.is_empty() || self.bench.batch_sizes.contains(&0) {
            return fail("bench.batch_sizes", "must be nonempty and positive");
        }
        if self.bench.batches_per_seed == 0 {
            return fail("bench.batches_per_seed", "must be positive");
        }
        if self.dataset.kind == DatasetKind::Idx && self.dataset.path.is_none() {
            return fail("dataset.path", "required for idx datasets");
        }
        if !(1..=8).contains(&self.dataset.bits) {
            return fail("dataset.bits", "must be in 1..=8");
        }
        if self.forecaster.horizon == 0 {
            return fail("forecaster.horizon", "must be positive");
        }
        if self.train.batch_size == 0 || self.train.eval_every == 0 {
            return fail("train.batch_size", "batch_size and eval_every must be positive");
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return fail("train.lr", "must be positive");
        }
        if !(self.train.forecast_weight >= 0.0 && self.train.forecast_weight.is_finite()) {
            return fail("train.forecast_weight", "must be non-negative");
        }
        Ok(())
    }
}

/// Applies one `--a.b.c=value` override. Values parse as JSON when they
/// can and fall back to plain strings.
pub fn apply_override(root: &mut Value, arg: &str) -> Result<(), UsageError> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| UsageError(format!("expected --key=value, got {arg:?}")))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--{body}: expected --key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| UsageError(format!("--{key}: {part:?} is not a section")))?;
        if !obj.contains_key(*part) {
            return Err(UsageError(format!("--{key}: unknown field {part:?}")));
        }
        let slot = obj.get_mut(*part).expect("checked");
        if n + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}
