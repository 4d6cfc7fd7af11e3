use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsadapt::autodiff::Graph;
use tsadapt::decomposition::{decompose_var, stochastic_decompose_var};
use tsadapt::forecaster::{Branch, DualBranchForecaster, TsfeConfig};
use tsadapt::invariance::*;
use tsadapt::Tensor;

fn tiny_model(seed: u64) -> DualBranchForecaster {
    DualBranchForecaster::new(TsfeConfig {
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
    })
    .unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero iff fewer than `rank` differences are strictly larger.
fn counting_oracle(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    let n = d.len();
    let rank = ((alpha / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    d.iter()
        .map(|v| {
            let larger = d.iter().filter(|w| *w > v).count();
            if larger < rank {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

fn gradient_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..120).prop_flat_map(|n| {
        // small integer grid produces ties
        let value = prop_oneof![(-4i32..4).prop_map(|v| v as f64 * 0.25), -10.0..10.0f64];
        (prop::collection::vec(value.clone(), n), prop::collection::vec(value, n))
    })
}

proptest! {
    #[test]
    fn mask_matches_counting_oracle((a, b) in gradient_values(), alpha in prop_oneof![Just(10.0), Just(50.0), Just(90.0), 0.5..100.0f64]) {
        let ta = Tensor::from_vec(a.clone());
        let tb = Tensor::from_vec(b.clone());
        let mask = build_mask(&ta, &tb, alpha).unwrap();
        prop_assert_eq!(mask.mask.data(), &counting_oracle(&a, &b, alpha)[..]);
        let swapped = build_mask(&tb, &ta, alpha).unwrap();
        prop_assert_eq!(swapped.mask.data(), mask.mask.data());
    }

    #[test]
    fn deeper_rank_never_zeroes_more((a, b) in gradient_values(), lo in 1.0..100.0f64, hi in 1.0..100.0f64) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let ta = Tensor::from_vec(a);
        let tb = Tensor::from_vec(b);
        let small = build_mask(&ta, &tb, lo).unwrap();
        let large = build_mask(&ta, &tb, hi).unwrap();
        prop_assert!(small.threshold >= large.threshold);
        prop_assert!(small.zero_fraction() <= large.zero_fraction());
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let model = tiny_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let embedding = random_tensor(&[2, 16, 4], &mut rng);
    let (k, p, seed) = (5, 0.1, 17);

    let mut g = Graph::new();
    let binding = model.params().bind(&mut g);
    let e = g.variable(embedding.clone());
    let passes = stochastic_decompose_var(&mut g, e, k, p, seed).unwrap();
    let sea = [0, 1].map(|i| model.branch_var(&mut g, &binding, Branch::Seasonal, passes[i].0).unwrap());
    let tre = [0, 1].map(|i| model.branch_var(&mut g, &binding, Branch::Trend, passes[i].1).unwrap());
    let grads = BranchGradients::compute(&mut g, e, sea, tre).unwrap();

    let output_sum = |x: &Tensor, branch: Branch, pass: usize| -> f64 {
        let mut g = Graph::new();
        let binding = model.params().bind(&mut g);
        let e = g.constant(x.clone());
        let passes = stochastic_decompose_var(&mut g, e, k, p, seed).unwrap();
        let input = if branch == Branch::Seasonal { passes[pass].0 } else { passes[pass].1 };
        let out = model.branch_var(&mut g, &binding, branch, input).unwrap();
        g.value(out.forecast).unwrap().data().iter().sum()
    };
    let eps = 1e-6;
    for (branch, analytic) in [(Branch::Seasonal, &grads.seasonal), (Branch::Trend, &grads.trend)] {
        for pass in 0..2 {
            for i in 0..embedding.numel() {
                let mut up = embedding.clone();
                up.data_mut()[i] += eps;
                let mut down = embedding.clone();
                down.data_mut()[i] -= eps;
                let numeric = (output_sum(&up, branch, pass) - output_sum(&down, branch, pass)) / (2.0 * eps);
                let a = analytic[pass].data()[i];
                assert!((a - numeric).abs() / numeric.abs().max(1.0) < 1e-4, "{branch:?} pass {pass} index {i}: {a} vs {numeric}");
            }
        }
    }
    // the two dropout passes differ, so the gradients do too
    assert_ne!(grads.seasonal[0], grads.seasonal[1]);
}

#[test]
fn pred_and_rep_losses_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = [3, 5, 2];
    let mut g = Graph::new();
    let tensors: Vec<Tensor> = (0..8).map(|_| random_tensor(&shape, &mut rng)).collect();
    let vars: Vec<_> = tensors.iter().map(|t| g.constant(t.clone())).collect();
    let (s_t, t_t) = (vars[6], vars[7]);
    let pred = pred_consistency_loss(&mut g, [vars[0], vars[1]], [vars[2], vars[3]], s_t, t_t).unwrap();
    let rep = representation_loss(&mut g, vars[4], vars[5], s_t, t_t).unwrap();

    let mse = |a: &Tensor, b: &Tensor| {
        let mut acc = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        acc / a.numel() as f64
    };
    let expected_pred = mse(&tensors[0], &tensors[6]) + mse(&tensors[1], &tensors[6]) + mse(&tensors[2], &tensors[7]) + mse(&tensors[3], &tensors[7]);
    let expected_rep = mse(&tensors[4], &tensors[7]) + mse(&tensors[5], &tensors[6]);
    assert!((g.value(pred.total).unwrap().item() - expected_pred).abs() < 1e-12);
    assert!((g.value(rep).unwrap().item() - expected_rep).abs() < 1e-12);
    assert!((g.value(pred.seasonal[1]).unwrap().item() - mse(&tensors[1], &tensors[6])).abs() < 1e-12);
}

#[test]
fn doubling_residuals_quadruples_pred_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let target = random_tensor(&[2, 4, 1], &mut rng);
    let preds: Vec<Tensor> = (0..4).map(|_| random_tensor(&[2, 4, 1], &mut rng)).collect();
    let loss = |scale: f64| {
        let mut g = Graph::new();
        let t = g.constant(target.clone());
        let p: Vec<_> = preds
            .iter()
            .map(|x| {
                let moved = x.zip_map(&target, "test", |a, b| b + scale * (a - b)).unwrap();
                g.constant(moved)
            })
            .collect();
        let terms = pred_consistency_loss(&mut g, [p[0], p[1]], [p[2], p[3]], t, t).unwrap();
        g.value(terms.total).unwrap().item()
    };
    assert!((loss(2.0) - 4.0 * loss(1.0)).abs() < 1e-12);
    assert_eq!(loss(0.0), 0.0);
}

#[test]
fn untouched_trend_inputs_give_zero_trend_distance() {
    let model = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[2, 16, 4], &mut rng);
    let noise = random_tensor(&[2, 16, 4], &mut rng);

    let mut g = Graph::new();
    let binding = model.params().bind(&mut g);
    let xv = g.constant(x.clone());
    let (s, t) = decompose_var(&mut g, xv, 5).unwrap();
    let nv = g.constant(noise);
    let scaled = g.scale(nv, 0.1).unwrap();
    let s_noisy = g.add(s, scaled).unwrap();
    let z_sea = [s, s_noisy].map(|input| model.branch_var(&mut g, &binding, Branch::Seasonal, input).unwrap().forecast);
    let z_tre = [t, t].map(|input| model.branch_var(&mut g, &binding, Branch::Trend, input).unwrap().forecast);
    let target = g.constant(Tensor::zeros(&[2, 4, 2]));
    let terms = pred_consistency_loss(&mut g, z_sea, z_tre, target, target).unwrap();
    let v = VariantGradients::compute(&g, &model, &binding, &terms).unwrap();
    assert_eq!(v.trend_distance(), 0.0);
    assert!(v.seasonal_distance() > 0.0);
    assert_eq!(v.alignment_loss(), v.seasonal_distance());
}

#[test]
fn probe_trivial_cases() {
    let model = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&[4, 16, 2], &mut rng);
    let (dt, ds) = default_probe_shifts(16, 2);
    let zero = invariance_probe(&model, &x, &dt, &ds, 0.0).unwrap();
    assert_eq!((zero.seasonal_shift, zero.trend_shift), (0.0, 0.0));
    let no_trend = invariance_probe(&model, &x, &Tensor::zeros(&[16, 2]), &ds, 0.1).unwrap();
    assert_eq!(no_trend.seasonal_shift, 0.0);
    assert!(no_trend.trend_shift > 0.0);
    assert!(invariance_probe(&model, &x, &Tensor::zeros(&[15, 2]), &ds, 0.1).is_err());
}
