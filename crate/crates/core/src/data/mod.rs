//! Time-series ingestion, windowing, splitting and synthetic domains.

mod csv_io;
mod synth;
mod window;

use std::ops::Range;
use std::path::PathBuf;

use thiserror::Error;

pub use csv_io::{load_csv, write_csv};
pub use synth::{synth_generate, SynthSpec};
pub use window::{make_windows, subsample_target, Batch, Normalization, Role, SeriesDataset, SubsampleMode};

/// Train/val/test windows of one domain, all normalized by the train split.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
    pub normalization: Normalization,
}

/// Splits `series` chronologically, fits normalization on the train range and
/// windows every role. `fraction` (if any) subsamples the train windows only.
pub fn prepare_domain(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    ratios: (f64, f64, f64),
    fraction: Option<(f64, SubsampleMode, u64)>,
) -> Result<DomainData> {
    let [train_r, val_r, test_r] = split(series.len(), ratios)?;
    let normalization = Normalization::fit(series, train_r.clone())?;
    let mut train = make_windows(series, lookback, horizon, train_r, &normalization, Role::Train)?;
    if let Some((frac, mode, seed)) = fraction {
        train = subsample_target(&train, frac, mode, seed)?;
    }
    Ok(DomainData {
        train,
        val: make_windows(series, lookback, horizon, val_r, &normalization, Role::Val)?,
        test: make_windows(series, lookback, horizon, test_r, &normalization, Role::Test)?,
        normalization,
    })
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}: file is empty or has no data rows")]
    Empty(PathBuf),
    #[error("{0}: missing header row (first row is numeric)")]
    MissingHeader(PathBuf),
    #[error("{path}: row {row}, column {column} ('{name}'): non-numeric value '{value}'")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: usize,
        name: String,
        value: String,
    },
    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    Ragged {
        path: PathBuf,
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("date column '{0}' not found in header")]
    UnknownColumn(String),
    #[error("range too short: {len} rows for lookback {lookback} + horizon {horizon}")]
    RangeTooShort { len: usize, lookback: usize, horizon: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("target fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynth(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Multivariate series `[L_total x C]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    rows: usize,
    channel_names: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, channel_names: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 {
            return Err(DataError::Invalid("series needs at least one channel".into()));
        }
        if values.is_empty() || values.len() % c != 0 {
            return Err(DataError::Invalid(format!("{} values for {c} channels", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("series contains non-finite values".into()));
        }
        let rows = values.len() / c;
        if let Some(ts) = &timestamps {
            if ts.len() != rows {
                return Err(DataError::Invalid(format!("{} timestamps for {rows} rows", ts.len())));
            }
        }
        Ok(Self {
            values,
            rows,
            channel_names,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels() + channel]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.channels();
        &self.values[row * c..(row + 1) * c]
    }

    /// Values of one channel in time order.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, channel)).collect()
    }
}

/// Chronological train/val/test ranges from split ratios.
///
/// Boundaries are floored; the remainder goes to the test range.
pub fn split(total_len: usize, ratios: (f64, f64, f64)) -> Result<[Range<usize>; 3]> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(DataError::InvalidSplit(format!("ratios {a}:{b}:{c}")));
    }
    let total = a + b + c;
    if total <= 0.0 {
        return Err(DataError::InvalidSplit("ratios sum to zero".into()));
    }
    // nudge before flooring so 0.7 * 100 lands on 70, not 69
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let train_end = floor(total_len as f64 * a / total).min(total_len);
    let val_end = (train_end + floor(total_len as f64 * b / total)).min(total_len);
    let ranges = [0..train_end, train_end..val_end, val_end..total_len];
    if let Some(i) = ranges.iter().position(|r| r.is_empty()) {
        let role = ["train", "val", "test"][i];
        return Err(DataError::InvalidSplit(format!(
            "{role} split is empty for length {total_len} and ratios {a}:{b}:{c}"
        )));
    }
    Ok(ranges)
}
