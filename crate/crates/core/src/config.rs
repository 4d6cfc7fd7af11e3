//! Sectioned JSON run configuration shared by every command.
//!
//! Every key has a default and unknown keys are rejected, so the effective
//! configuration (defaults merged in) can be embedded in each report and fed
//! back in to reproduce a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SubsampleMode;
use crate::forecaster::TsfeConfig;
use crate::invariance::InvarianceConfig;
use crate::proxy::ProxyConfig;
use crate::training::{RunSettings, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message} (key `{key}`, line {line}, column {column}, byte offset {offset})")]
    Parse {
        origin: String,
        key: String,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub lookback: usize,
    pub horizon: usize,
    /// Chronological train:val:test ratios.
    pub split: [f64; 3],
    /// Share of the target train windows used during adaptation.
    pub target_fraction: f64,
    pub subsample: SubsampleMode,
    /// Name of the timestamp column; `None` auto-detects `date`/`timestamp`.
    pub date_column: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            split: [6.0, 2.0, 2.0],
            target_fraction: 0.3,
            subsample: SubsampleMode::Prefix,
            date_column: None,
        }
    }
}

/// Forecaster hyperparameters; window geometry and channel count come from
/// the data section and the data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub k_trend: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TsfeConfig::new(1, 1, 1);
        Self {
            embed_dim: t.embed_dim,
            patch_len: t.patch_len,
            stride: t.stride,
            n_blocks: t.n_blocks,
            d_model: t.d_model,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            k_trend: t.k_trend,
            dropout: t.dropout,
            init_seed: t.init_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Batch size for evaluation and prediction passes.
    pub eval_batch_size: usize,
    /// Evaluate on the test split after training and store the metrics in the summary.
    pub evaluate_test: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            eval_batch_size: 64,
            evaluate_test: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub invariance: InvarianceConfig,
    pub proxy: ProxyConfig,
    pub train: TrainConfig,
    pub output: OutputSection,
}

/// Byte offset just past the 1-based `line`/`column` the parser stopped at.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column).min(text.len())
}

impl RunConfig {
    /// Parses and validates a config document. `origin` names it in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let (line, column) = (inner.line(), inner.column());
            ConfigError::Parse {
                origin: origin.to_string(),
                key,
                line,
                column,
                offset: byte_offset(text, line, column),
                message: inner.to_string(),
            }
        })?;
        de.end().map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            key: ".".into(),
            line: e.line(),
            column: e.column(),
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_pretty()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.lookback == 0 || d.horizon == 0 {
            return Err(ConfigError::Invalid("data.lookback and data.horizon must be >= 1".into()));
        }
        if d.split.iter().any(|r| !r.is_finite() || *r < 0.0) || d.split.iter().sum::<f64>() <= 0.0 {
            return Err(ConfigError::Invalid(format!("data.split {:?} must be non-negative with a positive sum", d.split)));
        }
        if !(d.target_fraction > 0.0 && d.target_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!("data.target_fraction {} outside (0, 1]", d.target_fraction)));
        }
        if self.output.eval_batch_size == 0 {
            return Err(ConfigError::Invalid("output.eval_batch_size must be >= 1".into()));
        }
        if !(self.invariance.mask_percentile > 0.0 && self.invariance.mask_percentile <= 100.0) {
            return Err(ConfigError::Invalid(format!(
                "invariance.mask_percentile {} outside (0, 100]",
                self.invariance.mask_percentile
            )));
        }
        self.proxy.denoiser().map_err(|e| ConfigError::Invalid(format!("proxy: {e}")))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        self.tsfe(1).validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        Ok(())
    }

    /// Forecaster configuration for data with `channels` channels.
    pub fn tsfe(&self, channels: usize) -> TsfeConfig {
        let m = &self.model;
        TsfeConfig {
            lookback: self.data.lookback,
            horizon: self.data.horizon,
            channels,
            embed_dim: m.embed_dim,
            patch_len: m.patch_len,
            stride: m.stride,
            n_blocks: m.n_blocks,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            k_trend: m.k_trend,
            dropout: m.dropout,
            init_seed: m.init_seed,
        }
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            train: self.train.clone(),
            invariance: self.invariance.clone(),
            proxy: self.proxy.clone(),
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.data.split;
        (a, b, c)
    }
}

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Value used in the reference experiments of the method.
    Reference,
    /// Chosen for this implementation.
    Project,
}

/// `(key, origin, description)` for every config key.
pub const CONFIG_KEYS: &[(&str, Origin, &str)] = &[
    ("data.lookback", Origin::Project, "look-back window length l"),
    ("data.horizon", Origin::Reference, "forecast horizon H (reference runs use 96, 192, 336)"),
    ("data.split", Origin::Reference, "chronological train:val:test ratios"),
    ("data.target_fraction", Origin::Reference, "share of target train windows seen during adaptation"),
    ("data.subsample", Origin::Project, "prefix | random choice of the kept target windows"),
    ("data.date_column", Origin::Project, "timestamp column name; null auto-detects date/timestamp"),
    ("model.embed_dim", Origin::Project, "embedding width E"),
    ("model.patch_len", Origin::Reference, "patch length P"),
    ("model.stride", Origin::Reference, "patch stride S"),
    ("model.n_blocks", Origin::Project, "encoder blocks per branch"),
    ("model.d_model", Origin::Project, "attention width"),
    ("model.n_heads", Origin::Project, "attention heads"),
    ("model.d_ff", Origin::Project, "feed-forward width"),
    ("model.k_trend", Origin::Project, "moving-average kernel (odd)"),
    ("model.dropout", Origin::Reference, "dropout inside the decomposition block"),
    ("model.init_seed", Origin::Project, "parameter initialization seed"),
    ("invariance.mask_percentile", Origin::Project, "percentile of the gradient-difference ranking used as mask threshold"),
    ("invariance.k_cut", Origin::Project, "DFT cut-off for frequency targets; null means max(1, H/40)"),
    ("invariance.grad_align_mode", Origin::Project, "first_order | second_order update for the gradient alignment loss"),
    ("proxy.correction_strength", Origin::Project, "alpha in [0, 1]: share of the source-target residual removed from the proxy"),
    ("proxy.temperature", Origin::Project, "tau of the confidence exp(-e/tau)"),
    ("proxy.confidence_scales_kd", Origin::Project, "multiply the distillation weight by the confidence"),
    ("proxy.kd_flow_through", Origin::Project, "let gradient reach the target term inside the pseudo-label"),
    ("train.lambda_inv", Origin::Project, "weight of the invariant forecasting loss"),
    ("train.lambda_pred", Origin::Project, "weight of the prediction-consistency loss"),
    ("train.lambda_rep", Origin::Reference, "weight of the representation loss"),
    ("train.lambda_grad", Origin::Reference, "weight of the gradient alignment loss"),
    ("train.lambda_kd", Origin::Reference, "weight of the distillation loss"),
    ("train.lr", Origin::Reference, "Adam learning rate"),
    ("train.epochs", Origin::Project, "maximum passes over the training windows"),
    ("train.max_steps", Origin::Project, "optional cap on optimizer steps"),
    ("train.batch_size", Origin::Project, "mini-batch size"),
    ("train.seed", Origin::Project, "seed for shuffling and dropout"),
    ("train.beta1", Origin::Project, "Adam beta1"),
    ("train.beta2", Origin::Project, "Adam beta2"),
    ("train.adam_eps", Origin::Project, "Adam epsilon"),
    ("train.patience", Origin::Project, "early-stopping patience in epochs; 0 disables"),
    ("train.shuffle", Origin::Project, "shuffle windows every epoch"),
    ("train.strict_unsupervised", Origin::Project, "adapt without target labels"),
    ("output.eval_batch_size", Origin::Project, "batch size of evaluation passes"),
    ("output.evaluate_test", Origin::Project, "store test metrics in the summary"),
];

/// Help text listing every key with its default and origin.
pub fn config_help() -> String {
    let defaults = RunConfig::default().to_value();
    let mut out = String::from("Config keys (JSON sections; every key optional):\n");
    for (key, origin, description) in CONFIG_KEYS {
        let mut v = &defaults;
        for part in key.split('.') {
            v = &v[part];
        }
        let tag = match origin {
            Origin::Reference => "reference value",
            Origin::Project => "project default",
        };
        out.push_str(&format!("  {key} = {v}  [{tag}]\n      {description}\n"));
    }
    out
}
