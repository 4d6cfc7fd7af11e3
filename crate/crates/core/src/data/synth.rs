use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, RawSeries, Result};

/// Linear trend + sinusoidal season + Gaussian noise.
///
/// `values[t, c] = slope_c * t + amplitude * sin(2 pi t / period) + N(0, noise_std^2)`.
/// Domains that share `period`/`amplitude` but differ in slopes give a
/// controlled trend shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    /// One slope per channel, or a single slope shared by all channels.
    pub slopes: Vec<f64>,
    pub period: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<RawSeries> {
    if spec.length == 0 || spec.channels == 0 {
        return Err(DataError::InvalidSynth("length and channels must be >= 1".into()));
    }
    if !(spec.period >= 2.0) {
        return Err(DataError::InvalidSynth(format!("period {} < 2", spec.period)));
    }
    if !(spec.noise_std >= 0.0) || !spec.noise_std.is_finite() {
        return Err(DataError::InvalidSynth(format!("noise_std {}", spec.noise_std)));
    }
    let slope = |c: usize| -> Result<f64> {
        match spec.slopes.len() {
            1 => Ok(spec.slopes[0]),
            n if n == spec.channels => Ok(spec.slopes[c]),
            n => Err(DataError::InvalidSynth(format!("{n} slopes for {} channels", spec.channels))),
        }
    };
    let slopes: Vec<f64> = (0..spec.channels).map(slope).collect::<Result<_>>()?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| DataError::InvalidSynth(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.length * spec.channels);
    for t in 0..spec.length {
        let season = spec.amplitude * (2.0 * PI * t as f64 / spec.period).sin();
        for s in &slopes {
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values.push(s * t as f64 + season + eps);
        }
    }
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(values, names, None)
}
