//! Season/trend decomposition.
//!
//! Two routes: a replicate-padded moving average in the time domain
//! (`trend = AvgPool(x)`, `seasonal = x - trend`), with an optional stochastic
//! variant that applies seeded dropout to the input before pooling; and a
//! frequency-domain split that keeps DFT bins `0..=k_cut` as trend and
//! `k_cut+1..=L/2` as seasonal.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::rng::sub_seed;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum DecompError {
    #[error("trend kernel {0} must be odd")]
    EvenKernel(usize),
    #[error("trend kernel {kernel} outside [1, {len}]")]
    KernelOutOfRange { kernel: usize, len: usize },
    #[error("series of length {0} is too short for a DFT (need >= 2)")]
    TooShort(usize),
    #[error("cut-off index {k_cut} outside [0, {max}]")]
    CutOutOfRange { k_cut: usize, max: usize },
    #[error("expected a [B, L, C] tensor, got {0:?}")]
    BadShape(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DecompError>;

/// Additive split of a `[B, L, C]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentPair {
    pub seasonal: Tensor,
    pub trend: Tensor,
}

/// Default moving-average kernel.
pub const DEFAULT_K_TREND: usize = 25;

/// Default DFT cut-off for a length-`len` axis: `max(1, len / 40)`, capped at `len / 2`.
pub fn default_k_cut(len: usize) -> usize {
    (len / 40).max(1).min(len / 2)
}

fn check_kernel(kernel: usize, len: usize) -> Result<()> {
    if kernel == 0 || kernel > len {
        return Err(DecompError::KernelOutOfRange { kernel, len });
    }
    if kernel % 2 == 0 {
        return Err(DecompError::EvenKernel(kernel));
    }
    Ok(())
}

fn series_len(shape: &[usize]) -> Result<usize> {
    match shape {
        [_, l, _] => Ok(*l),
        other => Err(DecompError::BadShape(other.to_vec())),
    }
}

/// Moving-average decomposition recorded on a graph; returns `(seasonal, trend)`.
pub fn decompose_var(g: &mut Graph, x: Var, k_trend: usize) -> Result<(Var, Var)> {
    check_kernel(k_trend, series_len(g.value(x)?.shape())?)?;
    let trend = g.avg_pool1d(x, k_trend)?;
    let seasonal = g.sub(x, trend)?;
    Ok((seasonal, trend))
}

/// Two dropout-perturbed decompositions of the same input, with sub-seeds
/// derived from `seed`. Returns `[(seasonal, trend); 2]`.
pub fn stochastic_decompose_var(g: &mut Graph, x: Var, k_trend: usize, dropout_p: f64, seed: u64) -> Result<[(Var, Var); 2]> {
    let mut passes = [(x, x); 2];
    for (i, pass) in passes.iter_mut().enumerate() {
        let dropped = g.dropout(x, dropout_p, sub_seed(seed, i as u64 + 1))?;
        *pass = decompose_var(g, dropped, k_trend)?;
    }
    Ok(passes)
}

/// Moving-average decomposition of a `[B, L, C]` tensor.
///
/// `seasonal` is computed as `series - trend`, so that identity holds bit for
/// bit; `seasonal + trend` recovers the input up to the rounding of that final
/// addition.
pub fn decompose(series: &Tensor, k_trend: usize) -> Result<ComponentPair> {
    let mut g = Graph::new();
    let x = g.constant(series.clone());
    let (s, t) = decompose_var(&mut g, x, k_trend)?;
    Ok(ComponentPair {
        seasonal: g.value(s)?.clone(),
        trend: g.value(t)?.clone(),
    })
}

/// Both passes of the stochastic decomposition, as plain tensors.
pub fn stochastic_decompose(series: &Tensor, k_trend: usize, dropout_p: f64, seed: u64) -> Result<(ComponentPair, ComponentPair)> {
    let mut g = Graph::new();
    let x = g.constant(series.clone());
    let [(s1, t1), (s2, t2)] = stochastic_decompose_var(&mut g, x, k_trend, dropout_p, seed)?;
    let pair = |s, t| -> Result<ComponentPair> {
        Ok(ComponentPair {
            seasonal: g.value(s)?.clone(),
            trend: g.value(t)?.clone(),
        })
    };
    Ok((pair(s1, t1)?, pair(s2, t2)?))
}

/// Half spectrum `X[0..=L/2]` of a real sequence of length `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    coefficients: Vec<Complex64>,
    len: usize,
}

impl Spectrum {
    pub fn new(coefficients: Vec<Complex64>, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(DecompError::TooShort(len));
        }
        if coefficients.len() != len / 2 + 1 {
            return Err(DecompError::CutOutOfRange {
                k_cut: coefficients.len(),
                max: len / 2 + 1,
            });
        }
        Ok(Self { coefficients, len })
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Copy keeping only bins in `keep`, zeroing the rest.
    pub fn masked(&self, keep: impl Fn(usize) -> bool) -> Spectrum {
        Spectrum {
            coefficients: self
                .coefficients
                .iter()
                .enumerate()
                .map(|(k, &c)| if keep(k) { c } else { Complex64::new(0.0, 0.0) })
                .collect(),
            len: self.len,
        }
    }
}

/// Real-input DFT planner for a fixed length.
pub struct RealDft {
    len: usize,
    forward: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inverse: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RealDft {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(DecompError::TooShort(len));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    /// `X[k] = sum_t x[t] exp(-2 pi i k t / L)` for `k = 0..=L/2`.
    pub fn forward(&self, x: &[f64]) -> Result<Spectrum> {
        if x.len() != self.len {
            return Err(DecompError::BadShape(vec![x.len()]));
        }
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.len / 2 + 1);
        buf[0].im = 0.0;
        if self.len % 2 == 0 {
            buf[self.len / 2].im = 0.0;
        }
        Ok(Spectrum {
            coefficients: buf,
            len: self.len,
        })
    }

    /// Inverse DFT of a half spectrum, mirrored so the output is real.
    pub fn inverse(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        if spectrum.len != self.len {
            return Err(DecompError::BadShape(vec![spectrum.len]));
        }
        let half = &spectrum.coefficients;
        let mut buf: Vec<Complex64> = (0..self.len)
            .map(|k| if k <= self.len / 2 { half[k] } else { half[self.len - k].conj() })
            .collect();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        Ok(buf.iter().map(|c| c.re * scale).collect())
    }
}

pub fn dft_forward(channel: &[f64]) -> Result<Spectrum> {
    RealDft::new(channel.len())?.forward(channel)
}

pub fn dft_inverse(spectrum: &Spectrum) -> Result<Vec<f64>> {
    RealDft::new(spectrum.len)?.inverse(spectrum)
}

/// Frequency-domain split of a `[B, L, E]` tensor along axis 1.
///
/// Bins `0..=k_cut` form the trend, `k_cut+1..=L/2` the seasonal part. The two
/// bin sets partition the half spectrum, so `trend + seasonal` reconstructs
/// the input up to FFT round-off.
pub fn fourier_split(series: &Tensor, k_cut: usize) -> Result<ComponentPair> {
    let &[b, l, e] = series.shape() else {
        return Err(DecompError::BadShape(series.shape().to_vec()));
    };
    if k_cut > l / 2 {
        return Err(DecompError::CutOutOfRange { k_cut, max: l / 2 });
    }
    let dft = RealDft::new(l)?;
    let mut trend = Tensor::zeros(series.shape());
    let mut seasonal = Tensor::zeros(series.shape());
    let data = series.data();
    let mut column = vec![0.0; l];
    for bi in 0..b {
        for ei in 0..e {
            let at = |t: usize| (bi * l + t) * e + ei;
            for (t, c) in column.iter_mut().enumerate() {
                *c = data[at(t)];
            }
            let spec = dft.forward(&column)?;
            let low = dft.inverse(&spec.masked(|k| k <= k_cut))?;
            let high = dft.inverse(&spec.masked(|k| k > k_cut))?;
            for t in 0..l {
                trend.data_mut()[at(t)] = low[t];
                seasonal.data_mut()[at(t)] = high[t];
            }
        }
    }
    Ok(ComponentPair { seasonal, trend })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn constant_series_has_no_season() {
        let p = decompose(&series(&[5., 5., 5., 5.]), 3).unwrap();
        assert_eq!(p.trend.data(), &[5., 5., 5., 5.]);
        assert_eq!(p.seasonal.data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn alternating_series_against_hand_average() {
        let x = [0., 1., 0., 1., 0., 1.];
        let p = decompose(&series(&x), 3).unwrap();
        // replicate padding: [0 | 0 1 0 1 0 1 | 1]
        let want = [1. / 3., 1. / 3., 2. / 3., 1. / 3., 2. / 3., 2. / 3.];
        for (t, w) in p.trend.data().iter().zip(want) {
            assert!((t - w).abs() < 1e-15);
        }
        for i in 0..6 {
            assert_eq!(p.seasonal.data()[i] + p.trend.data()[i], x[i]);
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = [0.3, -1.0, 2.5];
        let p = decompose(&series(&x), 1).unwrap();
        assert_eq!(p.trend.data(), &x);
        assert!(p.seasonal.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kernel_validation() {
        let s = series(&[1., 2., 3., 4.]);
        assert_eq!(decompose(&s, 2), Err(DecompError::EvenKernel(2)));
        assert!(matches!(decompose(&s, 5), Err(DecompError::KernelOutOfRange { .. })));
        assert!(matches!(decompose(&s, 0), Err(DecompError::KernelOutOfRange { .. })));
    }

    #[test]
    fn zero_dropout_passes_match_plain() {
        let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.4).sin()).collect();
        let s = series(&x);
        let (a, b) = stochastic_decompose(&s, 5, 0.0, 3).unwrap();
        let plain = decompose(&s, 5).unwrap();
        assert_eq!(a, plain);
        assert_eq!(b, plain);
    }

    #[test]
    fn dropout_passes_are_seeded_and_distinct() {
        let x: Vec<f64> = (0..96).map(|t| 1.0 + (t as f64 * 0.3).sin()).collect();
        let s = series(&x);
        let first = stochastic_decompose(&s, 25, 0.1, 42).unwrap();
        let again = stochastic_decompose(&s, 25, 0.1, 42).unwrap();
        assert_eq!(first, again);
        assert_ne!(first.0, first.1);
    }

    #[test]
    fn cosine_lands_in_bin_one() {
        let spec = dft_forward(&[1., 0., -1., 0.]).unwrap();
        let want = [0., 2., 0.];
        for (c, w) in spec.coefficients().iter().zip(want) {
            assert!((c.re - w).abs() < 1e-12 && c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let spec = dft_forward(&[2.5; 7]).unwrap();
        assert!((spec.coefficients()[0].re - 17.5).abs() < 1e-12);
        for c in &spec.coefficients()[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn short_input_rejected() {
        assert_eq!(dft_forward(&[1.0]), Err(DecompError::TooShort(1)));
    }

    #[test]
    fn fourier_split_extremes() {
        let x: Vec<f64> = (0..16).map(|t| (t as f64 * 0.9).sin() + 0.25).collect();
        let s = series(&x);
        let all_low = fourier_split(&s, 8).unwrap();
        assert!(all_low.trend.max_abs_diff(&s).unwrap() < 1e-12);
        assert!(all_low.seasonal.data().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(fourier_split(&s, 9), Err(DecompError::CutOutOfRange { .. })));
    }

    #[test]
    fn default_cut() {
        assert_eq!(default_k_cut(24), 1);
        assert_eq!(default_k_cut(96), 2);
        assert_eq!(default_k_cut(2), 1);
    }
}
