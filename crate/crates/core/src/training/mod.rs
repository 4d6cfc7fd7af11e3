//! Objective, source pretraining and source-free target adaptation.

mod optim;
mod report;
mod step;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SeriesDataset;
use crate::forecaster::{DualBranchForecaster, ForecastError, Metrics, MetricsAccumulator};
use crate::invariance::InvarianceConfig;
use crate::proxy::{confidence, proxy_error, Proxy, ProxyConfig, ProxyError};
use crate::rng::{rng_from, sub_seed};
use crate::tensor::TensorError;

pub use optim::Adam;
pub use report::{StepRecord, TrainReport, TrainSummary};
pub use step::{build_objective, kd_loss, objective_step, KdInputs, ObjectiveGraph, StepLosses, StepOutcome, StopGradients};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("training diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        report: Box<TrainReport>,
    },
    #[error("source and target architectures differ")]
    ArchitectureMismatch,
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Forecast(e.into())
    }
}

impl From<crate::decomposition::DecompError> for TrainError {
    fn from(e: crate::decomposition::DecompError) -> Self {
        TrainError::Forecast(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_one() -> f64 {
    1.0
}
fn default_lambda_rep() -> f64 {
    0.125
}
fn default_lambda_grad() -> f64 {
    0.5
}
fn default_lambda_kd() -> f64 {
    0.001
}
fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_patience() -> usize {
    3
}
fn default_true() -> bool {
    true
}

/// Loss weights, optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_one")]
    pub lambda_inv: f64,
    #[serde(default = "default_one")]
    pub lambda_pred: f64,
    #[serde(default = "default_lambda_rep")]
    pub lambda_rep: f64,
    #[serde(default = "default_lambda_grad")]
    pub lambda_grad: f64,
    #[serde(default = "default_lambda_kd")]
    pub lambda_kd: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Maximum number of passes over the training windows.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Adaptation without target labels: drops the forecasting and invariant losses.
    #[serde(default)]
    pub strict_unsupervised: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_inv", self.lambda_inv),
            ("lambda_pred", self.lambda_pred),
            ("lambda_rep", self.lambda_rep),
            ("lambda_grad", self.lambda_grad),
            ("lambda_kd", self.lambda_kd),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("{name} = {v} must be >= 0")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::InvalidConfig("need 0 <= beta1, beta2 < 1 and adam_eps > 0".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            inv: self.lambda_inv,
            pred: self.lambda_pred,
            rep: self.lambda_rep,
            grad: self.lambda_grad,
            kd: self.lambda_kd,
        }
    }
}

/// Weights of the regularizers relative to the forecasting loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub inv: f64,
    pub pred: f64,
    pub rep: f64,
    pub grad: f64,
    pub kd: f64,
}

/// `L + l_inv L_inv + l_pred L_pred + l_rep L_rep + l_grad L_grad + l_kd L_kd`.
pub fn total_loss(c: &StepLosses, w: &LossWeights) -> f64 {
    c.forecast + w.inv * c.invariant + w.pred * c.pred + w.rep * c.rep + w.grad * c.grad + w.kd * c.kd
}

/// Everything a training loop needs besides the data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub invariance: InvarianceConfig,
    pub proxy: ProxyConfig,
}

/// Denormalized test metrics of `model` on every window of `dataset`.
pub fn evaluate(model: &DualBranchForecaster, dataset: &SeriesDataset, batch_size: usize) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    let positions: Vec<usize> = (0..dataset.len()).collect();
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk);
        let pred = model.predict(&batch.x)?;
        acc.add(&dataset.denormalize(&pred, chunk), &dataset.denormalize(&batch.y, chunk))?;
    }
    Ok(acc.finish()?)
}

/// MSE in normalized units, used for early stopping.
pub fn validation_mse(model: &DualBranchForecaster, dataset: &SeriesDataset, batch_size: usize) -> Result<f64> {
    let mut acc = MetricsAccumulator::default();
    for batch in dataset.sequential_batches(batch_size) {
        acc.add(&model.predict(&batch.x)?, &batch.y)?;
    }
    Ok(acc.finish()?.mse)
}

/// Proxy side of an adaptation run.
struct Distillation<'a> {
    source: &'a DualBranchForecaster,
    proxy: &'a dyn Proxy,
    config: &'a ProxyConfig,
}

fn run(
    model: &mut DualBranchForecaster,
    train: &SeriesDataset,
    val: Option<&SeriesDataset>,
    settings: &RunSettings,
    distill: Option<Distillation<'_>>,
    phase: &str,
) -> Result<TrainReport> {
    let cfg = &settings.train;
    cfg.validate()?;
    if !(settings.invariance.mask_percentile > 0.0 && settings.invariance.mask_percentile <= 100.0) {
        return Err(TrainError::InvalidConfig(format!(
            "mask_percentile {} outside (0, 100]",
            settings.invariance.mask_percentile
        )));
    }
    if let Some(d) = &distill {
        d.config.denoiser()?;
    }
    let mut report = TrainReport::new(phase, cfg.seed);
    let weights = cfg.weights();
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut best: Option<(f64, usize, Vec<crate::tensor::Tensor>)> = None;
    let mut stale = 0;
    let mut step = 0usize;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    if let Some(d) = &distill {
        // diagnostics before any update: the target starts as a copy of the source
        let probe = train.batch(&(0..train.len().min(cfg.batch_size)).collect::<Vec<_>>());
        let e0 = proxy_error(&d.source.predict(&probe.x)?, &model.predict(&probe.x)?)?;
        report.summary.initial_proxy_error = e0;
        report.summary.initial_confidence = confidence(e0, d.config.temperature)?;
    }

    for epoch in 0..cfg.epochs {
        if step >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng_from(sub_seed(cfg.seed, 1 << 32 | epoch as u64)));
        }
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let batch = train.batch(chunk);
            let kd = match &distill {
                Some(d) => Some(KdInputs {
                    z_source: d.source.predict(&batch.x)?,
                    z_proxy: d.proxy.predict(&batch)?,
                    config: d.config.clone(),
                }),
                None => None,
            };
            let step_seed = sub_seed(cfg.seed, step as u64);
            let outcome = objective_step(model, &batch, &settings.invariance, &weights, cfg.strict_unsupervised, kd.as_ref(), step_seed);
            let outcome = match outcome {
                Ok(o) => o,
                Err(TrainError::Forecast(ForecastError::Tensor(TensorError::NonFinite { op }))) => {
                    return Err(TrainError::Divergence {
                        step,
                        reason: format!("non-finite value in {op}"),
                        report: Box::new(report),
                    })
                }
                Err(e) => return Err(e),
            };
            let record = StepRecord::from_outcome(step, &outcome, &weights);
            if !record.total.is_finite() {
                return Err(TrainError::Divergence {
                    step,
                    reason: "non-finite loss".into(),
                    report: Box::new(report),
                });
            }
            debug!("{phase} step {step}: L_all = {:.6}", record.total);
            report.records.push(record);
            if let Err(e) = opt.step(model.params_mut()) {
                return Err(TrainError::Divergence {
                    step,
                    reason: e.to_string(),
                    report: Box::new(report),
                });
            }
            step += 1;
        }
        report.summary.epochs = epoch + 1;
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let mse = validation_mse(model, val, cfg.batch_size)?;
            report.summary.val_mse.push(mse);
            info!("{phase} epoch {epoch}: val mse {mse:.6}");
            if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
                best = Some((mse, epoch, model.params().iter().map(|p| p.value.clone()).collect()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    info!("{phase}: early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((mse, epoch, values)) = best {
        for (p, v) in model.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
        report.summary.best_epoch = Some(epoch);
        report.summary.best_val_mse = Some(mse);
    }
    model.params_mut().zero_grad();
    report.summary.steps = step;
    Ok(report)
}

/// Trains the source model with the forecasting and invariance losses.
pub fn pretrain_source(model: &mut DualBranchForecaster, train: &SeriesDataset, val: Option<&SeriesDataset>, settings: &RunSettings) -> Result<TrainReport> {
    run(model, train, val, settings, None, "pretrain")
}

/// Adapts a copy of the frozen `source` to the target windows, distilling
/// denoised proxy predictions. Returns the adapted target model.
pub fn adapt_target(
    source: &DualBranchForecaster,
    proxy: &dyn Proxy,
    train: &SeriesDataset,
    val: Option<&SeriesDataset>,
    settings: &RunSettings,
) -> Result<(DualBranchForecaster, TrainReport)> {
    let mut frozen = source.clone();
    frozen.freeze();
    let mut target = source.clone();
    target.params_mut().set_frozen(false);
    if target.config() != frozen.config() {
        return Err(TrainError::ArchitectureMismatch);
    }
    let distill = Distillation {
        source: &frozen,
        proxy,
        config: &settings.proxy,
    };
    let report = run(&mut target, train, val, settings, Some(distill), "adapt")?;
    Ok((target, report))
}

#[cfg(test)]
mod tests;
