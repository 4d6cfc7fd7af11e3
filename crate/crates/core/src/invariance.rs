//! Invariant disentangled feature learning.
//!
//! Representation level: input gradients of each branch under two stochastic
//! decompositions are compared, and embedding coordinates whose gradient moves
//! the most are masked out before the branches see them again. Frequency
//! level: the invariant forecast is split in the DFT domain into seasonal and
//! trend targets that supervise both branches. Gradient level: the parameter
//! gradients of each branch under the two decompositions are pulled together.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, Var};
use crate::decomposition::{self, ComponentPair};
use crate::forecaster::{Branch, BranchOutput, DualBranchForecaster, ForecastError};
use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, ForecastError>;

fn default_mask_percentile() -> f64 {
    50.0
}

/// Settings of the invariance regularizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceConfig {
    /// Percentile (0, 100] of the gradient-difference ranking used as mask threshold.
    #[serde(default = "default_mask_percentile")]
    pub mask_percentile: f64,
    /// DFT cut-off for the frequency targets; `None` means `max(1, H / 40)`.
    #[serde(default)]
    pub k_cut: Option<usize>,
    #[serde(default)]
    pub grad_align_mode: GradAlignMode,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            mask_percentile: default_mask_percentile(),
            k_cut: None,
            grad_align_mode: GradAlignMode::default(),
        }
    }
}

/// Binary mask over the embedding plus the threshold that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceMask {
    pub mask: Tensor,
    /// Nearest-rank `alpha`-percentile of the descending-sorted `|g_a - g_b|`.
    pub threshold: f64,
    pub alpha_pct: f64,
    /// `|g_a - g_b|` is identically zero.
    pub degenerate: bool,
}

impl InvarianceMask {
    /// Mask applied to features: the literal mask, or all ones when the
    /// gradient difference is identically zero.
    pub fn feature_mask(&self) -> Tensor {
        if self.degenerate {
            warn!("input-gradient difference is identically zero; using an all-ones invariance mask");
            Tensor::ones(self.mask.shape())
        } else {
            self.mask.clone()
        }
    }

    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.mask.data().iter().filter(|v| **v == 0.0).count();
        zeros as f64 / self.mask.numel().max(1) as f64
    }
}

/// Zeroes every coordinate whose `|g_a - g_b|` is at least the nearest-rank
/// `alpha_pct` percentile of the differences sorted in descending order
/// (index `ceil(alpha_pct / 100 * n) - 1`).
pub fn build_mask(g_a: &Tensor, g_b: &Tensor, alpha_pct: f64) -> std::result::Result<InvarianceMask, TensorError> {
    if !(alpha_pct > 0.0 && alpha_pct <= 100.0) {
        return Err(TensorError::InvalidArgument {
            op: "build_mask",
            reason: format!("percentile {alpha_pct} outside (0, 100]"),
        });
    }
    let diff = g_a.zip_map(g_b, "build_mask", |a, b| (a - b).abs())?;
    let n = diff.numel();
    if n == 0 {
        return Err(TensorError::InvalidArgument {
            op: "build_mask",
            reason: "empty gradients".into(),
        });
    }
    let mut sorted = diff.data().to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let rank = ((alpha_pct / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let threshold = sorted[rank - 1];
    let mask = diff.map(|d| if d >= threshold { 0.0 } else { 1.0 });
    Ok(InvarianceMask {
        mask,
        threshold,
        alpha_pct,
        degenerate: sorted[0] == 0.0,
    })
}

/// `(x * m_seasonal, x * m_trend)` with the masks as constants.
pub fn invariant_features(g: &mut Graph, embedding: Var, seasonal_mask: &Tensor, trend_mask: &Tensor) -> std::result::Result<(Var, Var), TensorError> {
    let s = g.mask_mul(embedding, seasonal_mask)?;
    let t = g.mask_mul(embedding, trend_mask)?;
    Ok((s, t))
}

/// Forecasting loss on the invariant-feature predictions.
pub fn invariant_loss(g: &mut Graph, z_trend_inv: Var, z_seasonal_inv: Var, y: Var) -> std::result::Result<Var, TensorError> {
    crate::forecaster::forecasting_loss(g, z_trend_inv, z_seasonal_inv, y)
}

/// Seasonal and trend targets from the invariant forecast, split in the DFT
/// domain along the horizon axis. Returned as graph constants.
pub fn frequency_targets(g: &mut Graph, z_trend_inv: Var, z_seasonal_inv: Var, k_cut: usize) -> Result<(Var, Var)> {
    let sum = g.value(z_trend_inv)?.add(g.value(z_seasonal_inv)?)?;
    let ComponentPair { seasonal, trend } = decomposition::fourier_split(&sum, k_cut)?;
    Ok((g.constant(seasonal), g.constant(trend)))
}

/// The four prediction-consistency terms, kept separate so each can be
/// differentiated on its own.
#[derive(Clone, Copy, Debug)]
pub struct PredTerms {
    pub seasonal: [Var; 2],
    pub trend: [Var; 2],
    pub total: Var,
}

/// `sum_i mse(z_seasonal[i], s') + sum_i mse(z_trend[i], t')`.
pub fn pred_consistency_loss(
    g: &mut Graph,
    z_seasonal: [Var; 2],
    z_trend: [Var; 2],
    seasonal_target: Var,
    trend_target: Var,
) -> std::result::Result<PredTerms, TensorError> {
    let seasonal = [g.mse(z_seasonal[0], seasonal_target)?, g.mse(z_seasonal[1], seasonal_target)?];
    let trend = [g.mse(z_trend[0], trend_target)?, g.mse(z_trend[1], trend_target)?];
    let a = g.add(seasonal[0], seasonal[1])?;
    let b = g.add(trend[0], trend[1])?;
    let total = g.add(a, b)?;
    Ok(PredTerms { seasonal, trend, total })
}

/// `mse(z_trend_inv, t') + mse(z_seasonal_inv, s')`.
pub fn representation_loss(
    g: &mut Graph,
    z_trend_inv: Var,
    z_seasonal_inv: Var,
    seasonal_target: Var,
    trend_target: Var,
) -> std::result::Result<Var, TensorError> {
    let a = g.mse(z_trend_inv, trend_target)?;
    let b = g.mse(z_seasonal_inv, seasonal_target)?;
    g.add(a, b)
}

/// How the gradient-alignment loss reaches the parameter update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradAlignMode {
    /// Damp coordinates where the two variant gradients disagree in sign.
    #[default]
    FirstOrder,
    /// Exact gradient through Hessian-vector products of the variant losses.
    SecondOrder,
}

/// Per-branch parameter-gradient vectors of the two variants.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantGradients {
    pub seasonal: [Vec<f64>; 2],
    pub trend: [Vec<f64>; 2],
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl VariantGradients {
    /// Parameter gradients of each prediction-consistency term w.r.t. its own branch.
    pub fn compute(g: &Graph, model: &DualBranchForecaster, binding: &Binding, terms: &PredTerms) -> Result<Self> {
        let store = model.params();
        let sea_ids = model.branch_params(Branch::Seasonal);
        let tre_ids = model.branch_params(Branch::Trend);
        let grad = |loss: Var, ids: &[crate::autodiff::ParamId]| -> Result<Vec<f64>> {
            let grads = g.backward(loss)?;
            Ok(store.gradient_vector(binding, &grads, ids))
        };
        Ok(Self {
            seasonal: [grad(terms.seasonal[0], &sea_ids)?, grad(terms.seasonal[1], &sea_ids)?],
            trend: [grad(terms.trend[0], &tre_ids)?, grad(terms.trend[1], &tre_ids)?],
        })
    }

    /// `|G_sea^1 - G_sea^2| + |G_tre^1 - G_tre^2|` (Euclidean).
    pub fn alignment_loss(&self) -> f64 {
        distance(&self.seasonal[0], &self.seasonal[1]) + distance(&self.trend[0], &self.trend[1])
    }

    pub fn seasonal_distance(&self) -> f64 {
        distance(&self.seasonal[0], &self.seasonal[1])
    }

    pub fn trend_distance(&self) -> f64 {
        distance(&self.trend[0], &self.trend[1])
    }

    /// First-order update direction for one branch: on coordinates where the
    /// two variant gradients have opposite signs, `-(G_a + G_b) / 2`; zero
    /// elsewhere. Adding `weight` times this to the parameter gradient damps
    /// the components the two decompositions disagree on.
    pub fn surrogate(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| if x * y < 0.0 { -(x + y) / 2.0 } else { 0.0 })
            .collect()
    }
}

/// Representation distances for trend- and seasonal-like input perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Change of the seasonal-branch latent under the trend perturbation.
    pub seasonal_shift: f64,
    /// Change of the trend-branch latent under the seasonal perturbation.
    pub trend_shift: f64,
}

/// Mean over the batch of the per-sample L2 distance between latents.
fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.shape()[0];
    let width = a.numel() / rows.max(1);
    let total: f64 = a
        .data()
        .chunks(width)
        .zip(b.data().chunks(width))
        .map(|(x, y)| distance(x, y))
        .sum();
    total / rows as f64
}

/// Evaluation-mode probe: `|phi_sea(x + eps*dt) - phi_sea(x)|` and
/// `|phi_tre(x + eps*ds) - phi_tre(x)|`, where `phi` is a branch latent and
/// `dt`, `ds` are `[l, C]` perturbations added to every sample.
pub fn invariance_probe(model: &DualBranchForecaster, x: &Tensor, trend_shift: &Tensor, seasonal_shift: &Tensor, eps: f64) -> Result<ProbeResult> {
    let perturb = |d: &Tensor| -> Result<Tensor> {
        let per_sample = x.numel() / x.shape()[0].max(1);
        if d.numel() != per_sample {
            return Err(TensorError::ShapeMismatch {
                op: "invariance_probe",
                lhs: x.shape()[1..].to_vec(),
                rhs: d.shape().to_vec(),
            }
            .into());
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(per_sample) {
            for (v, dv) in row.iter_mut().zip(d.data()) {
                *v += eps * dv;
            }
        }
        Ok(out)
    };
    let (base_t, base_s) = model.latents(x)?;
    let (_, moved_s) = model.latents(&perturb(trend_shift)?)?;
    let (moved_t, _) = model.latents(&perturb(seasonal_shift)?)?;
    Ok(ProbeResult {
        seasonal_shift: mean_row_distance(&base_s, &moved_s),
        trend_shift: mean_row_distance(&base_t, &moved_t),
    })
}

/// Default probe perturbations for look-back `l` and `channels`: a unit ramp
/// `t / (l - 1)` and a sinusoid of period `min(24, l)`.
pub fn default_probe_shifts(lookback: usize, channels: usize) -> (Tensor, Tensor) {
    let period = 24.min(lookback).max(2) as f64;
    let denom = (lookback.max(2) - 1) as f64;
    let mut ramp = Vec::with_capacity(lookback * channels);
    let mut wave = Vec::with_capacity(lookback * channels);
    for t in 0..lookback {
        for _ in 0..channels {
            ramp.push(t as f64 / denom);
            wave.push((2.0 * std::f64::consts::PI * t as f64 / period).sin());
        }
    }
    (
        Tensor::new(vec![lookback, channels], ramp).expect("sizes agree"),
        Tensor::new(vec![lookback, channels], wave).expect("sizes agree"),
    )
}

/// Input gradients `d sum(z) / d x` of each branch output w.r.t. the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGradients {
    pub seasonal: [Tensor; 2],
    pub trend: [Tensor; 2],
}

impl BranchGradients {
    pub fn compute(g: &mut Graph, embedding: Var, seasonal: [BranchOutput; 2], trend: [BranchOutput; 2]) -> Result<Self> {
        let mut grad = |out: BranchOutput| -> Result<Tensor> {
            let total = g.sum(out.forecast)?;
            let grads = g.backward(total)?;
            let shape = g.value(embedding)?.shape().to_vec();
            Ok(grads.get(embedding).unwrap_or_else(|| Tensor::zeros(&shape)))
        };
        Ok(Self {
            seasonal: [grad(seasonal[0])?, grad(seasonal[1])?],
            trend: [grad(trend[0])?, grad(trend[1])?],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn nearest_rank_example() {
        let m = build_mask(&t(&[4., 3., 2., 1.]), &t(&[0., 0., 0., 0.]), 50.0).unwrap();
        assert_eq!(m.threshold, 3.0);
        assert_eq!(m.mask.data(), &[0., 0., 1., 1.]);
        assert!(!m.degenerate);
    }

    #[test]
    fn equal_gradients_give_literal_zero_mask() {
        let g = t(&[0.3, -1.0, 2.0]);
        let m = build_mask(&g, &g, 50.0).unwrap();
        assert_eq!(m.threshold, 0.0);
        assert!(m.mask.data().iter().all(|v| *v == 0.0));
        assert!(m.degenerate);
        assert!(m.feature_mask().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn full_percentile_zeroes_everything() {
        let m = build_mask(&t(&[1., 5., 2.]), &t(&[0., 1., 0.5]), 100.0).unwrap();
        assert_eq!(m.threshold, 1.0);
        assert!(m.mask.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_rejects_bad_arguments() {
        assert!(build_mask(&t(&[1.]), &t(&[1., 2.]), 50.0).is_err());
        assert!(build_mask(&t(&[1.]), &t(&[2.]), 0.0).is_err());
        assert!(build_mask(&t(&[1.]), &t(&[2.]), 100.5).is_err());
    }

    #[test]
    fn masking_features() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let ones = Tensor::ones(&[1, 2, 2]);
        let zeros = Tensor::zeros(&[1, 2, 2]);
        let mixed = Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let (s, tr) = invariant_features(&mut g, x, &ones, &zeros).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[1., 2., 3., 4.]);
        assert!(g.value(tr).unwrap().data().iter().all(|v| *v == 0.0));
        let (s, _) = invariant_features(&mut g, x, &mixed, &ones).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[1., 0., 0., 4.]);
    }

    #[test]
    fn surrogate_acts_only_on_sign_conflicts() {
        let s = VariantGradients::surrogate(&[1.0, -2.0, 3.0, 0.0], &[3.0, 4.0, -1.0, 5.0]);
        assert_eq!(s, vec![0.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn alignment_distance_for_one_parameter() {
        let v = VariantGradients {
            seasonal: [vec![0.75], vec![-0.5]],
            trend: [vec![2.0], vec![2.0]],
        };
        assert_eq!(v.alignment_loss(), 1.25);
        assert_eq!(v.trend_distance(), 0.0);
    }

    #[test]
    fn probe_shifts_shapes() {
        let (ramp, wave) = default_probe_shifts(96, 2);
        assert_eq!(ramp.shape(), &[96, 2]);
        assert_eq!(ramp.data()[0], 0.0);
        assert_eq!(ramp.data()[95 * 2], 1.0);
        assert!(wave.data()[0].abs() < 1e-15);
    }
}
