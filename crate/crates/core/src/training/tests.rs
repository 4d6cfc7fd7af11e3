use super::*;
use crate::autodiff::{relative_error, Graph};
use crate::data::{prepare_domain, synth_generate, DomainData, SynthSpec};
use crate::forecaster::TsfeConfig;
use crate::invariance::{GradAlignMode, InvarianceConfig};
use crate::proxy::{FileProxy, ModelProxy, ProxyConfig};
use crate::tensor::Tensor;

fn tiny_config(seed: u64) -> TsfeConfig {
    TsfeConfig {
        embed_dim: 4,
        patch_len: 4,
        stride: 2,
        n_blocks: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        k_trend: 5,
        init_seed: seed,
        ..TsfeConfig::new(16, 4, 2)
    }
}

fn tiny_domain(slope: f64, seed: u64) -> DomainData {
    let series = synth_generate(&SynthSpec {
        length: 160,
        channels: 2,
        slopes: vec![slope, -slope],
        period: 8.0,
        amplitude: 1.0,
        noise_std: 0.05,
        seed,
    })
    .unwrap();
    prepare_domain(&series, 16, 4, (6.0, 2.0, 2.0), None).unwrap()
}

fn quick_settings(steps: usize) -> RunSettings {
    let mut s = RunSettings::default();
    s.train.lr = 1e-3;
    s.train.batch_size = 8;
    s.train.epochs = 100;
    s.train.max_steps = Some(steps);
    s.train.patience = 0;
    s
}

fn unit_losses() -> StepLosses {
    StepLosses {
        forecast: 1.0,
        invariant: 1.0,
        pred: 1.0,
        rep: 1.0,
        grad: 1.0,
        kd: 1.0,
    }
}

#[test]
fn total_loss_examples() {
    let zero = LossWeights {
        inv: 0.0,
        pred: 0.0,
        rep: 0.0,
        grad: 0.0,
        kd: 0.0,
    };
    let c = StepLosses {
        forecast: 0.7,
        ..unit_losses()
    };
    assert_eq!(total_loss(&c, &zero), 0.7);
    let ones = LossWeights {
        inv: 1.0,
        pred: 1.0,
        rep: 1.0,
        grad: 1.0,
        kd: 1.0,
    };
    assert_eq!(total_loss(&unit_losses(), &ones), 6.0);
    let defaults = TrainConfig::default().weights();
    assert!((total_loss(&unit_losses(), &defaults) - 3.626).abs() < 1e-12);
}

#[test]
fn default_hyperparameters() {
    let c = TrainConfig::default();
    assert_eq!((c.lambda_rep, c.lambda_grad, c.lambda_kd, c.lr), (0.125, 0.5, 0.001, 1e-4));
    assert_eq!((c.lambda_inv, c.lambda_pred, c.batch_size, c.patience), (1.0, 1.0, 32, 3));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lambda_kdd": 1}"#).is_err());
    let bad = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        lambda_rep: -1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn kd_loss_examples() {
    let mut g = Graph::new();
    let zt = g.variable(Tensor::from_vec(vec![0.3, -1.2]));
    let same = g.value(zt).unwrap().clone();
    let l = kd_loss(&mut g, zt, &same, &same, 0.5, false).unwrap();
    assert_eq!(g.value(l).unwrap().item(), 0.0);

    let mut g = Graph::new();
    let zt = g.variable(Tensor::from_vec(vec![0.0]));
    let l = kd_loss(&mut g, zt, &Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![1.0]), 0.5, false).unwrap();
    assert_eq!(g.value(l).unwrap().item(), 1.0);
}

#[test]
fn kd_gradient_is_pseudo_label_unless_flow_through() {
    // z_t = 0, z_s = 1, z_p = 2, alpha = 0.5: r = 2 - 0.5 = 1.5
    for (flow, expected) in [(false, -3.0), (true, -1.5)] {
        let mut g = Graph::new();
        let zt = g.variable(Tensor::from_vec(vec![0.0]));
        let l = kd_loss(&mut g, zt, &Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![2.0]), 0.5, flow).unwrap();
        assert_eq!(g.value(l).unwrap().item(), 2.25);
        let grad = g.backward(l).unwrap().get(zt).unwrap().item();
        assert!((grad - expected).abs() < 1e-12, "flow {flow}: {grad}");
    }
}

#[test]
fn kd_only_step_moves_only_the_target() {
    let data = tiny_domain(0.02, 1);
    let source = {
        let mut m = DualBranchForecaster::new(tiny_config(3)).unwrap();
        m.freeze();
        m
    };
    let proxy = ModelProxy::new(DualBranchForecaster::new(tiny_config(4)).unwrap());
    let source_before = source.params().flat_values();
    let proxy_before = proxy.model().params().flat_values();

    let mut target = source.clone();
    target.params_mut().set_frozen(false);
    let batch = data.train.batch(&[0, 1, 2, 3]);
    let kd = KdInputs {
        z_source: source.predict(&batch.x).unwrap(),
        z_proxy: proxy.predict(&batch).unwrap(),
        config: ProxyConfig::default(),
    };
    let weights = LossWeights {
        inv: 0.0,
        pred: 0.0,
        rep: 0.0,
        grad: 0.0,
        kd: 1.0,
    };
    let target_before = target.params().flat_values();
    objective_step(&mut target, &batch, &InvarianceConfig::default(), &weights, true, Some(&kd), 5).unwrap();
    Adam::new(1e-3, 0.9, 0.999, 1e-8).step(target.params_mut()).unwrap();

    assert_eq!(source.params().flat_values(), source_before);
    assert_eq!(proxy.model().params().flat_values(), proxy_before);
    let after = target.params().flat_values();
    assert!(after.iter().zip(&target_before).any(|(a, b)| a != b));
}

#[test]
fn zero_epochs_keeps_initialization() {
    let data = tiny_domain(0.0, 2);
    let mut model = DualBranchForecaster::new(tiny_config(1)).unwrap();
    let init = model.params().flat_values();
    let mut settings = quick_settings(10);
    settings.train.epochs = 0;
    let report = pretrain_source(&mut model, &data.train, Some(&data.val), &settings).unwrap();
    assert_eq!(model.params().flat_values(), init);
    assert_eq!(report.summary.steps, 0);
    assert!(report.records.is_empty());
}

#[test]
fn same_seed_same_model() {
    let data = tiny_domain(0.01, 3);
    let settings = quick_settings(4);
    let run = || {
        let mut model = DualBranchForecaster::new(tiny_config(1)).unwrap();
        let report = pretrain_source(&mut model, &data.train, Some(&data.val), &settings).unwrap();
        (model.params().flat_values(), report.records)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn adapting_for_zero_steps_copies_the_source() {
    let data = tiny_domain(0.03, 4);
    let source = DualBranchForecaster::new(tiny_config(2)).unwrap();
    let proxy = ModelProxy::new(DualBranchForecaster::new(tiny_config(5)).unwrap());
    let mut settings = quick_settings(0);
    settings.train.epochs = 0;
    let (target, report) = adapt_target(&source, &proxy, &data.train, None, &settings).unwrap();
    assert_eq!(target.params().flat_values(), source.params().flat_values());
    assert_eq!(report.summary.initial_proxy_error, 0.0);
    assert_eq!(report.summary.initial_confidence, 1.0);
    assert!(!target.is_frozen());
}

#[test]
fn adaptation_report_tracks_drift_and_accounting() {
    let data = tiny_domain(0.03, 5);
    let mut source = DualBranchForecaster::new(tiny_config(2)).unwrap();
    pretrain_source(&mut source, &data.train, None, &quick_settings(3)).unwrap();
    let proxy = ModelProxy::new(DualBranchForecaster::new(tiny_config(6)).unwrap());
    let mut settings = quick_settings(6);
    settings.proxy.confidence_scales_kd = true;
    let (_, report) = adapt_target(&source, &proxy, &data.train, Some(&data.val), &settings).unwrap();
    assert_eq!(report.records.len(), 6);
    assert_eq!(report.records[0].e_t, 0.0);
    assert!(report.records.iter().any(|r| r.e_t > 0.0));
    let w = settings.train.weights();
    for r in &report.records {
        let kd_w = w.kd * r.c_t;
        let expected = r.forecast + w.inv * r.invariant + w.pred * r.pred + w.rep * r.rep + w.grad * r.grad + kd_w * r.kd;
        assert!((r.total - expected).abs() <= 1e-9);
        assert!((r.c_t - (-r.e_t).exp()).abs() < 1e-15);
    }
}

#[test]
fn replayed_source_with_full_correction_gives_zero_kd() {
    let data = tiny_domain(0.03, 6);
    let mut source = DualBranchForecaster::new(tiny_config(2)).unwrap();
    pretrain_source(&mut source, &data.train, None, &quick_settings(2)).unwrap();
    let all: Vec<usize> = (0..data.train.len()).collect();
    let batch = data.train.batch(&all);
    let mut replay = FileProxy::new(4, 2);
    replay.insert_batch(&batch, &source.predict(&batch.x).unwrap()).unwrap();
    let mut settings = quick_settings(8);
    settings.proxy.correction_strength = 1.0;
    let (_, report) = adapt_target(&source, &replay, &data.train, None, &settings).unwrap();
    assert_eq!(report.records.len(), 8);
    assert!(report.records.iter().all(|r| r.kd == 0.0));
}

#[test]
fn mismatched_architecture_is_rejected() {
    let data = tiny_domain(0.0, 7);
    let model = DualBranchForecaster::new(tiny_config(0)).unwrap();
    let mut other = DualBranchForecaster::new(TsfeConfig { d_model: 12, ..tiny_config(0) }).unwrap();
    assert!(matches!(other.copy_from(&model), Err(crate::forecaster::ForecastError::Incompatible(_))));
    let proxy = ModelProxy::new(model.clone());
    let mut settings = quick_settings(1);
    settings.train.lr = -1.0;
    assert!(matches!(
        adapt_target(&model, &proxy, &data.train, None, &settings),
        Err(TrainError::InvalidConfig(_))
    ));
}

/// Central differences of the differentiable objective with every
/// stop-gradient value held at its base value.
fn objective_fd_error(unsupervised: bool, kd: bool) -> f64 {
    let data = tiny_domain(0.05, 8);
    let model = DualBranchForecaster::new(tiny_config(9)).unwrap();
    let batch = data.train.batch(&[3, 11]);
    let inv = InvarianceConfig::default();
    let weights = TrainConfig::default().weights();
    let kd_inputs = kd.then(|| KdInputs {
        z_source: DualBranchForecaster::new(tiny_config(10)).unwrap().predict(&batch.x).unwrap(),
        z_proxy: DualBranchForecaster::new(tiny_config(11)).unwrap().predict(&batch.x).unwrap(),
        config: ProxyConfig::default(),
    });
    let seed = 42;
    let base = build_objective(&model, &batch, &inv, &weights, unsupervised, kd_inputs.as_ref(), seed, None).unwrap();
    let grads = base.graph.backward(base.objective.unwrap()).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    let analytic = model.params().gradient_vector(&base.binding, &grads, &ids);

    let value = |m: &DualBranchForecaster| {
        let o = build_objective(m, &batch, &inv, &weights, unsupervised, kd_inputs.as_ref(), seed, Some(&base.stop)).unwrap();
        o.graph.value(o.objective.unwrap()).unwrap().item()
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    // every 7th scalar keeps the unit test quick; the acceptance suite checks all
    for i in (0..analytic.len()).step_by(7) {
        let mut up = model.clone();
        let mut down = model.clone();
        nudge(&mut up, i, eps);
        nudge(&mut down, i, -eps);
        worst = worst.max(relative_error(analytic[i], (value(&up) - value(&down)) / (2.0 * eps)));
    }
    worst
}

fn nudge(model: &mut DualBranchForecaster, index: usize, delta: f64) {
    let mut offset = 0;
    for p in model.params_mut().iter_mut() {
        let n = p.value.numel();
        if index < offset + n {
            p.value.data_mut()[index - offset] += delta;
            return;
        }
        offset += n;
    }
    panic!("index {index} out of range");
}

#[test]
fn objective_gradient_matches_finite_differences() {
    for (unsupervised, kd) in [(false, false), (false, true), (true, true)] {
        let err = objective_fd_error(unsupervised, kd);
        assert!(err < 1e-3, "unsupervised {unsupervised}, kd {kd}: {err}");
    }
}

#[test]
fn second_order_alignment_matches_directional_difference() {
    let data = tiny_domain(0.05, 9);
    let mut model = DualBranchForecaster::new(tiny_config(12)).unwrap();
    let batch = data.train.batch(&[0, 5, 9]);
    let inv = InvarianceConfig {
        grad_align_mode: GradAlignMode::SecondOrder,
        ..InvarianceConfig::default()
    };
    let only_grad = LossWeights {
        inv: 0.0,
        pred: 0.0,
        rep: 0.0,
        grad: 1.0,
        kd: 0.0,
    };
    let seed = 7;
    let base = build_objective(&model, &batch, &inv, &only_grad, true, None, seed, None).unwrap();
    let stop = base.stop.clone();
    objective_step(&mut model, &batch, &inv, &only_grad, true, None, seed).unwrap();
    let exact: Vec<f64> = model.params().iter().flat_map(|p| p.grad.as_ref().map_or_else(|| vec![0.0; p.value.numel()], |g| g.data().to_vec())).collect();
    let norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    let direction: Vec<f64> = exact.iter().map(|v| v / norm).collect();

    let align = |m: &DualBranchForecaster| {
        let o = build_objective(m, &batch, &inv, &only_grad, true, None, seed, Some(&stop)).unwrap();
        o.variant_gradients(m).unwrap().alignment_loss()
    };
    let shifted = |h: f64| {
        let mut m = model.clone();
        let mut offset = 0;
        for p in m.params_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += h * direction[offset];
                offset += 1;
            }
        }
        m
    };
    let h = 1e-5;
    let numeric = (align(&shifted(h)) - align(&shifted(-h))) / (2.0 * h);
    assert!(relative_error(norm, numeric) < 1e-3, "analytic {norm}, numeric {numeric}");
}

#[test]
fn first_order_surrogate_only_touches_branch_parameters() {
    let data = tiny_domain(0.05, 10);
    let mut model = DualBranchForecaster::new(tiny_config(13)).unwrap();
    let batch = data.train.batch(&[1, 2, 3, 4]);
    let only_grad = LossWeights {
        inv: 0.0,
        pred: 0.0,
        rep: 0.0,
        grad: 1.0,
        kd: 0.0,
    };
    let outcome = objective_step(&mut model, &batch, &InvarianceConfig::default(), &only_grad, true, None, 3).unwrap();
    assert!(outcome.losses.grad > 0.0);
    let embed = model.embed_layer();
    for id in [embed.weight, embed.bias] {
        assert!(model.params().get(id).grad.as_ref().is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
    }
}

#[test]
fn zero_dropout_gives_zero_alignment_loss() {
    let data = tiny_domain(0.05, 11);
    let mut model = DualBranchForecaster::new(TsfeConfig {
        dropout: 0.0,
        ..tiny_config(14)
    })
    .unwrap();
    let batch = data.train.batch(&[0, 1]);
    let w = TrainConfig::default().weights();
    let outcome = objective_step(&mut model, &batch, &InvarianceConfig::default(), &w, false, None, 1).unwrap();
    assert_eq!(outcome.losses.grad, 0.0);
    // identical variants give identical input gradients, so the literal mask is all zeros
    assert_eq!(outcome.seasonal_mask_zeros, 1.0);
    assert_eq!(outcome.trend_mask_zeros, 1.0);
}

#[test]
fn divergence_is_reported() {
    let data = tiny_domain(0.0, 12);
    let mut model = DualBranchForecaster::new(tiny_config(15)).unwrap();
    let bias = model.embed_layer().bias;
    model.params_mut().get_mut(bias).value.data_mut()[0] = f64::NAN;
    match pretrain_source(&mut model, &data.train, None, &quick_settings(3)) {
        Err(TrainError::Divergence { step, report, .. }) => {
            assert_eq!(step, 0);
            assert!(report.records.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn report_round_trips_through_jsonl() {
    let data = tiny_domain(0.01, 13);
    let mut model = DualBranchForecaster::new(tiny_config(16)).unwrap();
    let report = pretrain_source(&mut model, &data.train, None, &quick_settings(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.jsonl");
    report.write_jsonl(&path).unwrap();
    let back = TrainReport::read_jsonl(&path).unwrap();
    assert_eq!(back, report.records);
    let text = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut expected = StepRecord::COLUMNS.to_vec();
    expected.sort_unstable();
    let mut keys_sorted = keys.clone();
    keys_sorted.sort_unstable();
    assert_eq!(keys_sorted, expected);
}
