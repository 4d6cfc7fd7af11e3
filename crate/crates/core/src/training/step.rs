use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamId, Var};
use crate::data::Batch;
use crate::decomposition::{default_k_cut, stochastic_decompose_var};
use crate::forecaster::{forecasting_loss, Branch, DualBranchForecaster};
use crate::invariance::{
    build_mask, frequency_targets, invariant_features, invariant_loss, pred_consistency_loss, representation_loss, BranchGradients,
    GradAlignMode, InvarianceConfig, PredTerms, VariantGradients,
};
use crate::proxy::{confidence, proxy_error, ProxyConfig};
use crate::tensor::{Tensor, TensorError};

use super::{LossWeights, Result};

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub forecast: f64,
    pub invariant: f64,
    pub pred: f64,
    pub rep: f64,
    pub grad: f64,
    pub kd: f64,
}

/// Frozen-model outputs for the distillation term.
#[derive(Clone, Debug)]
pub struct KdInputs {
    pub z_source: Tensor,
    pub z_proxy: Tensor,
    pub config: ProxyConfig,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: StepLosses,
    /// Weight the distillation term actually carried this step.
    pub kd_weight: f64,
    pub proxy_error: f64,
    pub confidence: f64,
    pub seasonal_mask_zeros: f64,
    pub trend_mask_zeros: f64,
}

/// Distillation loss `mean(r^2)` with
/// `r = (z_proxy - z_t) - alpha * (z_s - z_t')`, i.e. the MSE between the
/// denoised proxy prediction and the live target prediction `z_t`.
///
/// `z_t'` is a stop-gradient copy of `z_t` unless `flow_through` is set. The
/// grouping makes the residual exactly zero when the proxy replays `z_s` and
/// `alpha = 1`.
pub fn kd_loss(g: &mut Graph, z_target: Var, z_source: &Tensor, z_proxy: &Tensor, alpha: f64, flow_through: bool) -> std::result::Result<Var, TensorError> {
    let anchor = if flow_through { z_target } else { g.detach(z_target)? };
    kd_with_anchor(g, z_target, anchor, z_source, z_proxy, alpha)
}

fn kd_with_anchor(g: &mut Graph, z_target: Var, anchor: Var, z_source: &Tensor, z_proxy: &Tensor, alpha: f64) -> std::result::Result<Var, TensorError> {
    let zp = g.constant(z_proxy.clone());
    let zs = g.constant(z_source.clone());
    let gap = g.sub(zp, z_target)?;
    let resid = g.sub(zs, anchor)?;
    let correction = g.scale(resid, alpha)?;
    let r = g.sub(gap, correction)?;
    let r2 = g.square(r)?;
    g.mean(r2)
}

/// Values that enter the objective as constants: the two feature masks and
/// the frequency targets `s'`, `t'`.
#[derive(Clone, Debug, PartialEq)]
pub struct StopGradients {
    pub seasonal_mask: Tensor,
    pub trend_mask: Tensor,
    pub s_target: Tensor,
    pub t_target: Tensor,
    /// Detached target prediction inside the distillation pseudo-label.
    pub kd_anchor: Option<Tensor>,
}

/// The differentiable part of one step's objective.
///
/// `objective` is the weighted sum of every term except `L_grad`, whose value
/// is a function of the (constant) variant gradients and is handled by the
/// update rule instead. `None` when every weight is zero.
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub binding: Binding,
    pub objective: Option<Var>,
    pub losses: StepLosses,
    pub stop: StopGradients,
    pub kd_weight: f64,
    pub proxy_error: f64,
    pub confidence: f64,
    pub seasonal_mask_zeros: f64,
    pub trend_mask_zeros: f64,
    pred: PredTerms,
    targets: (Var, Var),
}

/// Builds the step graph. With `frozen`, the masks and frequency targets are
/// taken from it instead of being derived from the current parameters.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    model: &DualBranchForecaster,
    batch: &Batch,
    inv: &InvarianceConfig,
    weights: &LossWeights,
    unsupervised: bool,
    kd: Option<&KdInputs>,
    seed: u64,
    frozen: Option<&StopGradients>,
) -> Result<ObjectiveGraph> {
    let cfg = model.config().clone();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let embedding = model.embed_var(&mut g, &p, &batch.x)?;
    let passes = stochastic_decompose_var(&mut g, embedding, cfg.k_trend, cfg.dropout, seed)?;
    let trend_out = [
        model.branch_var(&mut g, &p, Branch::Trend, passes[0].1)?,
        model.branch_var(&mut g, &p, Branch::Trend, passes[1].1)?,
    ];
    let seasonal_out = [
        model.branch_var(&mut g, &p, Branch::Seasonal, passes[0].0)?,
        model.branch_var(&mut g, &p, Branch::Seasonal, passes[1].0)?,
    ];

    // representation level
    let (sea_mask, tre_mask, sea_zeros, tre_zeros) = match frozen {
        Some(f) => (f.seasonal_mask.clone(), f.trend_mask.clone(), zero_fraction(&f.seasonal_mask), zero_fraction(&f.trend_mask)),
        None => {
            let input_grads = BranchGradients::compute(&mut g, embedding, seasonal_out, trend_out)?;
            let sea = build_mask(&input_grads.seasonal[0], &input_grads.seasonal[1], inv.mask_percentile)?;
            let tre = build_mask(&input_grads.trend[0], &input_grads.trend[1], inv.mask_percentile)?;
            (sea.feature_mask(), tre.feature_mask(), sea.zero_fraction(), tre.zero_fraction())
        }
    };
    let (s_inv, t_inv) = invariant_features(&mut g, embedding, &sea_mask, &tre_mask)?;
    let z_tre_inv = model.branch_var(&mut g, &p, Branch::Trend, t_inv)?.forecast;
    let z_sea_inv = model.branch_var(&mut g, &p, Branch::Seasonal, s_inv)?.forecast;

    // frequency level
    let (s_target, t_target) = match frozen {
        Some(f) => (g.constant(f.s_target.clone()), g.constant(f.t_target.clone())),
        None => {
            let k_cut = inv.k_cut.unwrap_or_else(|| default_k_cut(cfg.horizon));
            frequency_targets(&mut g, z_tre_inv, z_sea_inv, k_cut)?
        }
    };
    let z_sea = [seasonal_out[0].forecast, seasonal_out[1].forecast];
    let z_tre = [trend_out[0].forecast, trend_out[1].forecast];
    let pred = pred_consistency_loss(&mut g, z_sea, z_tre, s_target, t_target)?;
    let rep = representation_loss(&mut g, z_tre_inv, z_sea_inv, s_target, t_target)?;

    let mut terms: Vec<(Var, f64)> = vec![(pred.total, weights.pred), (rep, weights.rep)];
    let mut losses = StepLosses {
        pred: g.value(pred.total)?.item(),
        rep: g.value(rep)?.item(),
        ..StepLosses::default()
    };
    if !unsupervised {
        let y = g.constant(batch.y.clone());
        let forecast = forecasting_loss(&mut g, z_tre[0], z_sea[0], y)?;
        let invariant = invariant_loss(&mut g, z_tre_inv, z_sea_inv, y)?;
        losses.forecast = g.value(forecast)?.item();
        losses.invariant = g.value(invariant)?.item();
        terms.push((forecast, 1.0));
        terms.push((invariant, weights.inv));
    }

    let mut kd_weight = 0.0;
    let mut kd_anchor = None;
    let (mut e_t, mut c_t) = (0.0, 1.0);
    if let Some(kd) = kd {
        let live = model.forward_eval(&mut g, &p, &batch.x)?.forecast;
        e_t = proxy_error(&kd.z_source, g.value(live)?)?;
        c_t = confidence(e_t, kd.config.temperature)?;
        let anchor = if kd.config.kd_flow_through {
            live
        } else {
            let a = match frozen.and_then(|f| f.kd_anchor.as_ref()) {
                Some(t) => g.constant(t.clone()),
                None => g.detach(live)?,
            };
            kd_anchor = Some(g.value(a)?.clone());
            a
        };
        let kd_var = kd_with_anchor(&mut g, live, anchor, &kd.z_source, &kd.z_proxy, kd.config.correction_strength)?;
        losses.kd = g.value(kd_var)?.item();
        kd_weight = if kd.config.confidence_scales_kd { weights.kd * c_t } else { weights.kd };
        terms.push((kd_var, kd_weight));
    }

    let mut objective: Option<Var> = None;
    for (v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = g.scale(v, w)?;
        objective = Some(match objective {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }

    let stop = StopGradients {
        seasonal_mask: sea_mask,
        trend_mask: tre_mask,
        s_target: g.value(s_target)?.clone(),
        t_target: g.value(t_target)?.clone(),
        kd_anchor,
    };
    Ok(ObjectiveGraph {
        graph: g,
        binding: p,
        objective,
        losses,
        stop,
        kd_weight,
        proxy_error: e_t,
        confidence: c_t,
        seasonal_mask_zeros: sea_zeros,
        trend_mask_zeros: tre_zeros,
        pred,
        targets: (s_target, t_target),
    })
}

impl ObjectiveGraph {
    /// The four per-variant parameter gradients of the prediction terms.
    pub fn variant_gradients(&self, model: &DualBranchForecaster) -> Result<VariantGradients> {
        Ok(VariantGradients::compute(&self.graph, model, &self.binding, &self.pred)?)
    }
}

fn zero_fraction(mask: &Tensor) -> f64 {
    if mask.numel() == 0 {
        return 0.0;
    }
    mask.data().iter().filter(|v| **v == 0.0).count() as f64 / mask.numel() as f64
}

/// Builds the full objective for one batch and leaves its gradient in the
/// model's parameter slots (previous slots are cleared). Does not update.
pub fn objective_step(
    model: &mut DualBranchForecaster,
    batch: &Batch,
    inv: &InvarianceConfig,
    weights: &LossWeights,
    unsupervised: bool,
    kd: Option<&KdInputs>,
    seed: u64,
) -> Result<StepOutcome> {
    let built = build_objective(model, batch, inv, weights, unsupervised, kd, seed, None)?;
    let g = &built.graph;

    // gradient level
    let variants = built.variant_gradients(model)?;
    let mut losses = built.losses;
    losses.grad = variants.alignment_loss();

    let store = model.params_mut();
    store.zero_grad();
    if let Some(obj) = built.objective {
        let grads = g.backward(obj)?;
        store.accumulate(&built.binding, &grads);
    }

    if weights.grad > 0.0 {
        match inv.grad_align_mode {
            GradAlignMode::FirstOrder => {
                for (branch, pair) in [(Branch::Seasonal, &variants.seasonal), (Branch::Trend, &variants.trend)] {
                    let ids = model.branch_params(branch);
                    let direction: Vec<f64> = VariantGradients::surrogate(&pair[0], &pair[1])
                        .into_iter()
                        .map(|v| v * weights.grad)
                        .collect();
                    model.params_mut().add_to_grads(&ids, &direction);
                }
            }
            GradAlignMode::SecondOrder => {
                let exact = alignment_gradient(model, batch, &variants, built.targets, g, seed)?;
                let ids: Vec<ParamId> = model.params().ids().collect();
                let scaled: Vec<f64> = exact.into_iter().map(|v| v * weights.grad).collect();
                model.params_mut().add_to_grads(&ids, &scaled);
            }
        }
    }

    Ok(StepOutcome {
        losses,
        kd_weight: built.kd_weight,
        proxy_error: built.proxy_error,
        confidence: built.confidence,
        seasonal_mask_zeros: built.seasonal_mask_zeros,
        trend_mask_zeros: built.trend_mask_zeros,
    })
}

/// Gradient of `|G_a - G_b|` per branch w.r.t. every parameter, through
/// central-difference Hessian-vector products of the variant losses.
fn alignment_gradient(
    model: &DualBranchForecaster,
    batch: &Batch,
    variants: &VariantGradients,
    targets: (Var, Var),
    g: &Graph,
    seed: u64,
) -> Result<Vec<f64>> {
    let s_target = g.value(targets.0)?.clone();
    let t_target = g.value(targets.1)?.clone();
    let all_ids: Vec<ParamId> = model.params().ids().collect();
    let total = model.params().num_scalars();
    let mut out = vec![0.0; total];
    for (branch, pair, target) in [
        (Branch::Seasonal, &variants.seasonal, &s_target),
        (Branch::Trend, &variants.trend, &t_target),
    ] {
        let diff: Vec<f64> = pair[0].iter().zip(&pair[1]).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        // unit direction in full parameter space, nonzero on this branch only
        let branch_ids = model.branch_params(branch);
        let mut direction = vec![0.0; total];
        let mut offset = 0;
        let mut cursor = 0;
        for &id in &all_ids {
            let n = model.params().get(id).value.numel();
            if branch_ids.contains(&id) {
                for k in 0..n {
                    direction[offset + k] = diff[cursor + k] / norm;
                }
                cursor += n;
            }
            offset += n;
        }
        let radius = 1e-4;
        let plus = variant_difference_gradient(model, batch, branch, target, seed, &direction, radius)?;
        let minus = variant_difference_gradient(model, batch, branch, target, seed, &direction, -radius)?;
        for (o, (a, b)) in out.iter_mut().zip(plus.iter().zip(&minus)) {
            *o += (a - b) / (2.0 * radius);
        }
    }
    Ok(out)
}

/// Full parameter gradient of `l_1 - l_2` (the branch's two variant losses)
/// at parameters shifted by `radius * direction`.
fn variant_difference_gradient(
    model: &DualBranchForecaster,
    batch: &Batch,
    branch: Branch,
    target: &Tensor,
    seed: u64,
    direction: &[f64],
    radius: f64,
) -> Result<Vec<f64>> {
    let mut shifted = model.clone();
    let mut offset = 0;
    for p in shifted.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += radius * direction[offset];
            offset += 1;
        }
    }
    let cfg = shifted.config().clone();
    let mut g = Graph::new();
    let p = shifted.params().bind(&mut g);
    let embedding = shifted.embed_var(&mut g, &p, &batch.x)?;
    let passes = stochastic_decompose_var(&mut g, embedding, cfg.k_trend, cfg.dropout, seed)?;
    let target = g.constant(target.clone());
    let mut losses = Vec::with_capacity(2);
    for (seasonal, trend) in passes {
        let input = if branch == Branch::Seasonal { seasonal } else { trend };
        let z = shifted.branch_var(&mut g, &p, branch, input)?.forecast;
        losses.push(g.mse(z, target)?);
    }
    let diff = g.sub(losses[0], losses[1])?;
    let grads = g.backward(diff)?;
    let ids: Vec<ParamId> = shifted.params().ids().collect();
    Ok(shifted.params().gradient_vector(&p, &grads, &ids))
}
