//! Dual-branch patch-attention forecaster.
//!
//! Input `[B, l, C]` is embedded per timestep to `[B, l, E]`, split into
//! seasonal and trend parts by the moving-average block, and each part is
//! forecast by its own TSFE branch (patching, pre-norm self-attention blocks,
//! flatten, linear head). The forecast is the sum of the two branch outputs.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Var};
use crate::decomposition::{self, DecompError};
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{EncoderBlock, LayerNorm, Linear, SelfAttention};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decomposition(#[from] DecompError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {source}")]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, ForecastError>;

fn default_embed_dim() -> usize {
    16
}
fn default_patch_len() -> usize {
    16
}
fn default_stride() -> usize {
    8
}
fn default_n_blocks() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_n_heads() -> usize {
    4
}
fn default_d_ff() -> usize {
    128
}
fn default_k_trend() -> usize {
    decomposition::DEFAULT_K_TREND
}
fn default_dropout() -> f64 {
    0.1
}

/// Architecture and shape of a [`DualBranchForecaster`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsfeConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_patch_len")]
    pub patch_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    /// Moving-average kernel of the decomposition block (odd).
    #[serde(default = "default_k_trend")]
    pub k_trend: usize,
    /// Dropout applied to the embedding inside the decomposition block.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub init_seed: u64,
}

impl TsfeConfig {
    pub fn new(lookback: usize, horizon: usize, channels: usize) -> Self {
        Self {
            lookback,
            horizon,
            channels,
            embed_dim: default_embed_dim(),
            patch_len: default_patch_len(),
            stride: default_stride(),
            n_blocks: default_n_blocks(),
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            d_ff: default_d_ff(),
            k_trend: default_k_trend(),
            dropout: default_dropout(),
            init_seed: 0,
        }
    }

    /// Number of patch tokens, `(l - P) / S + 1`.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForecastError::InvalidConfig(m));
        if [self.lookback, self.horizon, self.channels, self.embed_dim, self.d_model, self.n_heads, self.d_ff].contains(&0) {
            return bad("lookback, horizon, channels, embed_dim, d_model, n_heads and d_ff must be >= 1".into());
        }
        if self.patch_len == 0 || self.stride == 0 || self.stride > self.patch_len {
            return bad(format!("need 1 <= stride ({}) <= patch_len ({})", self.stride, self.patch_len));
        }
        if self.lookback < self.patch_len {
            return bad(format!("lookback {} shorter than patch_len {}", self.lookback, self.patch_len));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.k_trend == 0 || self.k_trend % 2 == 0 || self.k_trend > self.lookback {
            return bad(format!("k_trend {} must be odd and in [1, lookback]", self.k_trend));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// One of the two forecasting branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Trend,
    Seasonal,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Trend => "trend.",
            Branch::Seasonal => "seasonal.",
        }
    }
}

/// Output of one branch on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Flattened token features before the head, `[B, N * d_model]`.
    pub latent: Var,
    /// Forecast `[B, H, C]`.
    pub forecast: Var,
}

/// A single TSFE branch.
#[derive(Clone, Debug)]
pub struct Tsfe {
    patch_proj: Linear,
    position: ParamId,
    blocks: Vec<EncoderBlock>,
    head: Linear,
    patch_len: usize,
    stride: usize,
    tokens: usize,
    d_model: usize,
    horizon: usize,
    channels: usize,
}

impl Tsfe {
    fn new(store: &mut ParamStore, name: &str, cfg: &TsfeConfig, rng: &mut ChaCha8Rng) -> Self {
        let tokens = cfg.num_patches();
        let d = cfg.d_model;
        Self {
            patch_proj: Linear::new(store, &format!("{name}.patch_proj"), cfg.patch_len * cfg.embed_dim, d, rng),
            position: store.add(format!("{name}.position"), Tensor::randn(&[tokens, d], 0.02, rng)),
            blocks: (0..cfg.n_blocks)
                .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), d, cfg.n_heads, cfg.d_ff, rng))
                .collect(),
            head: Linear::new(store, &format!("{name}.head"), tokens * d, cfg.horizon * cfg.channels, rng),
            patch_len: cfg.patch_len,
            stride: cfg.stride,
            tokens,
            d_model: d,
            horizon: cfg.horizon,
            channels: cfg.channels,
        }
    }

    /// `[B, l, E]` component features to a `[B, H, C]` forecast.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<BranchOutput> {
        let b = g.value(x)?.shape()[0];
        let patches = g.patch(x, self.patch_len, self.stride)?;
        let h = self.patch_proj.forward(g, p, patches)?;
        let mut h = g.add_broadcast(h, p.var(self.position))?;
        for block in &self.blocks {
            h = block.forward(g, p, h)?;
        }
        let latent = g.reshape(h, &[b, self.tokens * self.d_model])?;
        let out = self.head.forward(g, p, latent)?;
        let forecast = g.reshape(out, &[b, self.horizon, self.channels])?;
        Ok(BranchOutput { latent, forecast })
    }
}

/// Everything recorded by an evaluation-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub embedding: Var,
    pub seasonal: Var,
    pub trend: Var,
    pub trend_out: BranchOutput,
    pub seasonal_out: BranchOutput,
    /// `trend_out.forecast + seasonal_out.forecast`.
    pub forecast: Var,
}

/// Shared embedding, decomposition block and the two TSFE branches.
#[derive(Clone, Debug)]
pub struct DualBranchForecaster {
    config: TsfeConfig,
    params: ParamStore,
    embed: Linear,
    trend: Tsfe,
    seasonal: Tsfe,
}

impl DualBranchForecaster {
    pub fn new(config: TsfeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let embed = Linear::new(&mut params, "embed", config.channels, config.embed_dim, &mut rng);
        let trend = Tsfe::new(&mut params, "trend", &config, &mut rng);
        let seasonal = Tsfe::new(&mut params, "seasonal", &config, &mut rng);
        Ok(Self {
            config,
            params,
            embed,
            trend,
            seasonal,
        })
    }

    pub fn config(&self) -> &TsfeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embed_layer(&self) -> &Linear {
        &self.embed
    }

    pub fn branch(&self, branch: Branch) -> &Tsfe {
        match branch {
            Branch::Trend => &self.trend,
            Branch::Seasonal => &self.seasonal,
        }
    }

    /// Parameter ids of one branch, in store order.
    pub fn branch_params(&self, branch: Branch) -> Vec<ParamId> {
        self.params.ids_with_prefix(branch.prefix())
    }

    /// Makes every parameter bit-equal to `source`'s.
    pub fn copy_from(&mut self, source: &DualBranchForecaster) -> Result<()> {
        if self.config != source.config {
            return Err(ForecastError::Incompatible("architectures differ".into()));
        }
        Ok(self.params.copy_values_from(&source.params)?)
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [_, l, c] if *l == self.config.lookback && *c == self.config.channels => Ok(()),
            other => Err(ForecastError::Tensor(TensorError::ShapeMismatch {
                op: "forecast",
                lhs: other.to_vec(),
                rhs: vec![0, self.config.lookback, self.config.channels],
            })),
        }
    }

    /// Records the input and its embedding `[B, l, E]`.
    pub fn embed_var(&self, g: &mut Graph, p: &Binding, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let xv = g.constant(x.clone());
        Ok(self.embed.forward(g, p, xv)?)
    }

    pub fn branch_var(&self, g: &mut Graph, p: &Binding, branch: Branch, input: Var) -> Result<BranchOutput> {
        self.branch(branch).forward(g, p, input)
    }

    /// Deterministic forward without dropout.
    pub fn forward_eval(&self, g: &mut Graph, p: &Binding, x: &Tensor) -> Result<Forward> {
        let embedding = self.embed_var(g, p, x)?;
        let (seasonal, trend) = decomposition::decompose_var(g, embedding, self.config.k_trend)?;
        let trend_out = self.trend.forward(g, p, trend)?;
        let seasonal_out = self.seasonal.forward(g, p, seasonal)?;
        let forecast = g.add(trend_out.forecast, seasonal_out.forecast)?;
        Ok(Forward {
            embedding,
            seasonal,
            trend,
            trend_out,
            seasonal_out,
            forecast,
        })
    }

    /// Evaluation-mode forecast `[B, H, C]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = self.forward_eval(&mut g, &p, x)?;
        Ok(g.value(f.forecast)?.clone())
    }

    /// Branch latents `(trend, seasonal)` in evaluation mode.
    pub fn latents(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = self.forward_eval(&mut g, &p, x)?;
        Ok((g.value(f.trend_out.latent)?.clone(), g.value(f.seasonal_out.latent)?.clone()))
    }
}

/// `mse(z_trend + z_seasonal, y)`.
pub fn forecasting_loss(g: &mut Graph, z_trend: Var, z_seasonal: Var, y: Var) -> std::result::Result<Var, TensorError> {
    let z = g.add(z_trend, z_seasonal)?;
    g.mse(z, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn metrics(pred: &Tensor, truth: &Tensor) -> std::result::Result<Metrics, TensorError> {
    pred.expect_same_shape(truth, "metrics")?;
    if pred.numel() == 0 {
        return Err(TensorError::InvalidArgument {
            op: "metrics",
            reason: "empty input".into(),
        });
    }
    let n = pred.numel() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(Metrics { mse: se / n, mae: ae / n })
}

/// Running sums for metrics accumulated over several batches.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    squared: f64,
    absolute: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> std::result::Result<(), TensorError> {
        pred.expect_same_shape(truth, "metrics")?;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            self.squared += (p - t) * (p - t);
            self.absolute += (p - t).abs();
        }
        self.count += pred.numel();
        Ok(())
    }

    pub fn finish(&self) -> std::result::Result<Metrics, TensorError> {
        if self.count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "metrics",
                reason: "empty input".into(),
            });
        }
        let n = self.count as f64;
        Ok(Metrics {
            mse: self.squared / n,
            mae: self.absolute / n,
        })
    }
}
