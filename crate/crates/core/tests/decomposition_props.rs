use std::f64::consts::PI;

use proptest::prelude::*;
use tsadapt::decomposition::{decompose, dft_forward, dft_inverse, fourier_split};
use tsadapt::Tensor;

/// O(L^2) reference DFT, half spectrum as (re, im) pairs.
fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let l = x.len();
    (0..=l / 2)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                let a = -2.0 * PI * (k * t) as f64 / l as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn column(values: Vec<f64>) -> Tensor {
    let l = values.len();
    Tensor::new(vec![1, l, 1], values).unwrap()
}

#[test]
fn random_length_17_matches_naive_oracle() {
    let x: Vec<f64> = (0..17).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 3.0).collect();
    let spec = dft_forward(&x).unwrap();
    for (c, (re, im)) in spec.coefficients().iter().zip(naive_dft(&x)) {
        assert!((c.re - re).abs() < 1e-9 && (c.im - im).abs() < 1e-9);
    }
    let back = dft_inverse(&spec).unwrap();
    for (a, b) in back.iter().zip(&x) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn known_bins_split_cleanly() {
    let l = 32;
    let x: Vec<f64> = (0..l).map(|t| 3.0 + (2.0 * PI * 5.0 * t as f64 / l as f64).cos()).collect();
    let p = fourier_split(&column(x.clone()), 2).unwrap();
    for t in 0..l {
        assert!((p.trend.data()[t] - 3.0).abs() < 1e-9);
        assert!((p.seasonal.data()[t] - (x[t] - 3.0)).abs() < 1e-9);
    }
}

#[test]
fn zero_cut_on_zero_mean_keeps_everything_seasonal() {
    let x: Vec<f64> = vec![1.0, -2.0, 0.5, 0.5, -1.0, 1.0];
    let p = fourier_split(&column(x.clone()), 0).unwrap();
    for t in 0..x.len() {
        assert!(p.trend.data()[t].abs() < 1e-12);
        assert!((p.seasonal.data()[t] - x[t]).abs() < 1e-12);
    }
}

fn series_strategy() -> impl Strategy<Value = Vec<f64>> {
    (2usize..48).prop_flat_map(|l| prop::collection::vec(-10.0f64..10.0, l))
}

proptest! {
    #[test]
    fn fourier_split_is_linear(
        (x, y, k_frac) in series_strategy().prop_flat_map(|x| {
            let l = x.len();
            (Just(x), prop::collection::vec(-10.0f64..10.0, l), 0.0f64..=1.0)
        }),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let l = x.len();
        let k = ((l / 2) as f64 * k_frac).round() as usize;
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let px = fourier_split(&column(x), k).unwrap();
        let py = fourier_split(&column(y), k).unwrap();
        let pm = fourier_split(&column(mix), k).unwrap();
        for t in 0..l {
            let want_t = a * px.trend.data()[t] + b * py.trend.data()[t];
            let want_s = a * px.seasonal.data()[t] + b * py.seasonal.data()[t];
            prop_assert!((pm.trend.data()[t] - want_t).abs() < 1e-9);
            prop_assert!((pm.seasonal.data()[t] - want_s).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_shift_only_moves_trend(x in series_strategy(), shift in -5.0f64..5.0, k_frac in 0.0f64..=1.0) {
        let l = x.len();
        let k = ((l / 2) as f64 * k_frac).round() as usize;
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let p = fourier_split(&column(x), k).unwrap();
        let q = fourier_split(&column(shifted), k).unwrap();
        for t in 0..l {
            prop_assert!((q.seasonal.data()[t] - p.seasonal.data()[t]).abs() < 1e-9);
            prop_assert!((q.trend.data()[t] - p.trend.data()[t] - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_average_seasonal_is_input_minus_trend(x in series_strategy(), k_half in 0usize..12) {
        let l = x.len();
        let k = (2 * k_half + 1).min(if l % 2 == 1 { l } else { l - 1 });
        let p = decompose(&column(x.clone()), k).unwrap();
        for t in 0..l {
            prop_assert_eq!(p.seasonal.data()[t], x[t] - p.trend.data()[t]);
        }
    }
}
