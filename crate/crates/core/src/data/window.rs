use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, RawSeries, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Fits mean/std on `range` rows of `series`. Constant channels get std 1.
    pub fn fit(series: &RawSeries, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > series.len() {
            return Err(DataError::Invalid(format!("cannot fit normalization on rows {range:?}")));
        }
        let n = range.len() as f64;
        let c = series.channels();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let m = range.clone().map(|r| series.get(r, ch)).sum::<f64>() / n;
            let var = range.clone().map(|r| (series.get(r, ch) - m).powi(2)).sum::<f64>() / n;
            mean[ch] = m;
            std[ch] = if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                log::warn!(
                    "channel '{}' is constant on the training split; using std = 1",
                    series.channel_names()[ch]
                );
                1.0
            };
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    /// Maps a normalized tensor whose last axis is the channel axis back to
    /// original units.
    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        let c = self.channels();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.denormalize(*v, i % c);
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Segment {
    values: Vec<f64>,
    rows: usize,
    origin: usize,
    norm: Normalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct WindowRef {
    segment: usize,
    start: usize,
}

/// Look-back / horizon windows over one or more normalized segments.
///
/// Window `i` of a single-segment dataset starts at row `origin + i` of the
/// source series. Every window lies entirely inside its segment.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    lookback: usize,
    horizon: usize,
    channels: usize,
    role: Role,
    segments: Vec<Segment>,
    windows: Vec<WindowRef>,
    ids: Vec<usize>,
}

/// A mini-batch: `x [B, l, C]`, `y [B, H, C]` and the dataset-local window ids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds stride-1 windows inside `range`, normalized by `norm`.
pub fn make_windows(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    range: Range<usize>,
    norm: &Normalization,
    role: Role,
) -> Result<SeriesDataset> {
    if lookback == 0 || horizon == 0 {
        return Err(DataError::Invalid("lookback and horizon must be >= 1".into()));
    }
    if range.end > series.len() {
        return Err(DataError::Invalid(format!("range {range:?} exceeds series length {}", series.len())));
    }
    if norm.channels() != series.channels() {
        return Err(DataError::Invalid("normalization channel count mismatch".into()));
    }
    let len = range.len();
    if len < lookback + horizon {
        return Err(DataError::RangeTooShort { len, lookback, horizon });
    }
    let c = series.channels();
    let mut values = Vec::with_capacity(len * c);
    for r in range.clone() {
        for ch in 0..c {
            values.push(norm.normalize(series.get(r, ch), ch));
        }
    }
    let count = len - lookback - horizon + 1;
    Ok(SeriesDataset {
        lookback,
        horizon,
        channels: c,
        role,
        segments: vec![Segment {
            values,
            rows: len,
            origin: range.start,
            norm: norm.clone(),
        }],
        windows: (0..count).map(|start| WindowRef { segment: 0, start }).collect(),
        ids: (0..count).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleMode {
    /// Chronologically first windows.
    #[default]
    Prefix,
    /// Seeded random subset, kept in chronological order.
    Random,
}

/// Keeps `ceil(fraction * n)` training windows.
pub fn subsample_target(dataset: &SeriesDataset, fraction: f64, mode: SubsampleMode, seed: u64) -> Result<SeriesDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = dataset.len();
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let keep = keep.min(n);
    let mut chosen: Vec<usize> = match mode {
        SubsampleMode::Prefix => (0..keep).collect(),
        SubsampleMode::Random => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            all.truncate(keep);
            all
        }
    };
    chosen.sort_unstable();
    let mut out = dataset.clone();
    out.windows = chosen.iter().map(|&i| dataset.windows[i]).collect();
    out.ids = chosen.iter().map(|&i| dataset.ids[i]).collect();
    Ok(out)
}

impl SeriesDataset {
    /// Merges datasets with equal window geometry; each keeps its own normalization.
    pub fn pooled(parts: &[SeriesDataset]) -> Result<SeriesDataset> {
        let first = parts.first().ok_or_else(|| DataError::Invalid("nothing to pool".into()))?;
        let mut out = SeriesDataset {
            lookback: first.lookback,
            horizon: first.horizon,
            channels: first.channels,
            role: first.role,
            segments: Vec::new(),
            windows: Vec::new(),
            ids: Vec::new(),
        };
        for part in parts {
            if (part.lookback, part.horizon, part.channels) != (out.lookback, out.horizon, out.channels) {
                return Err(DataError::Invalid("pooled datasets must share lookback, horizon and channels".into()));
            }
            let offset = out.segments.len();
            out.segments.extend(part.segments.iter().cloned());
            out.windows.extend(part.windows.iter().map(|w| WindowRef {
                segment: w.segment + offset,
                start: w.start,
            }));
        }
        out.ids = (0..out.windows.len()).collect();
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Normalization of the first segment (the only one unless pooled).
    pub fn normalization(&self) -> &Normalization {
        &self.segments[0].norm
    }

    /// Window id of position `i` (its index before any subsampling).
    pub fn id(&self, i: usize) -> usize {
        self.ids[i]
    }

    /// Absolute source row where window `i`'s look-back starts.
    pub fn source_row(&self, i: usize) -> usize {
        let w = self.windows[i];
        self.segments[w.segment].origin + w.start
    }

    fn copy_rows(&self, w: WindowRef, offset: usize, rows: usize, out: &mut Vec<f64>) {
        let seg = &self.segments[w.segment];
        debug_assert!(w.start + offset + rows <= seg.rows);
        let c = self.channels;
        let begin = (w.start + offset) * c;
        out.extend_from_slice(&seg.values[begin..begin + rows * c]);
    }

    /// Normalized `(x [l, C], y [H, C])` of window `i`.
    pub fn window(&self, i: usize) -> (Tensor, Tensor) {
        let b = self.batch(&[i]);
        let (l, h, c) = (self.lookback, self.horizon, self.channels);
        (
            b.x.reshape(&[l, c]).expect("window shape"),
            b.y.reshape(&[h, c]).expect("window shape"),
        )
    }

    /// Stacks windows at positions `positions` into a batch.
    pub fn batch(&self, positions: &[usize]) -> Batch {
        let (l, h, c) = (self.lookback, self.horizon, self.channels);
        let mut xs = Vec::with_capacity(positions.len() * l * c);
        let mut ys = Vec::with_capacity(positions.len() * h * c);
        for &p in positions {
            let w = self.windows[p];
            self.copy_rows(w, 0, l, &mut xs);
            self.copy_rows(w, l, h, &mut ys);
        }
        let b = positions.len();
        Batch {
            x: Tensor::new(vec![b, l, c], xs).expect("batch shape"),
            y: Tensor::new(vec![b, h, c], ys).expect("batch shape"),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }

    /// Consecutive batches over all windows in order.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let positions: Vec<usize> = (0..self.len()).collect();
        positions
            .chunks(batch_size.max(1))
            .map(|chunk| self.batch(chunk))
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Maps a normalized `[B, H, C]` prediction for the windows at
    /// `positions` back to original units.
    pub fn denormalize(&self, pred: &Tensor, positions: &[usize]) -> Tensor {
        let per = self.horizon * self.channels;
        let mut out = pred.clone();
        for (chunk, &p) in out.data_mut().chunks_mut(per).zip(positions) {
            let norm = &self.segments[self.windows[p].segment].norm;
            for (i, v) in chunk.iter_mut().enumerate() {
                *v = norm.denormalize(*v, i % self.channels);
            }
        }
        out
    }
}
