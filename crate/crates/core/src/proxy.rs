//! Frozen proxy forecasters and proxy denoising.
//!
//! The proxy's systematic bias is estimated by the signed disagreement between
//! the frozen source model and the adapting target model, and a fraction
//! `alpha` of it is subtracted from the proxy output.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Batch;
use crate::forecaster::{DualBranchForecaster, ForecastError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error("correction strength {0} outside [0, 1]")]
    InvalidStrength(f64),
    #[error("temperature {0} must be > 0")]
    InvalidTemperature(f64),
    #[error("proxy error {0} must be finite and >= 0")]
    InvalidError(f64),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("file proxy has no prediction for window {0}")]
    MissingWindow(usize),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, ProxyError>;

fn default_strength() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    1.0
}

/// Settings of proxy denoising and distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    /// Fraction `alpha` in [0, 1] of the source-target residual removed from the proxy output.
    #[serde(default = "default_strength")]
    pub correction_strength: f64,
    /// Temperature `tau` of the confidence `exp(-e / tau)`.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Multiply the distillation weight by the per-step confidence.
    #[serde(default)]
    pub confidence_scales_kd: bool,
    /// Let gradient flow through the target term inside the denoised label.
    #[serde(default)]
    pub kd_flow_through: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            correction_strength: default_strength(),
            temperature: default_temperature(),
            confidence_scales_kd: false,
            kd_flow_through: false,
        }
    }
}

impl ProxyConfig {
    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(self.correction_strength, self.temperature)
    }
}

/// A frozen forecaster queried for pseudo-labels.
pub trait Proxy {
    /// Forecast `[B, H, C]` for the batch. Repeated calls are bit-identical.
    fn predict(&self, batch: &Batch) -> Result<Tensor>;
}

/// A frozen [`DualBranchForecaster`] used as proxy.
#[derive(Clone, Debug)]
pub struct ModelProxy {
    model: DualBranchForecaster,
}

impl ModelProxy {
    pub fn new(mut model: DualBranchForecaster) -> Self {
        model.freeze();
        Self { model }
    }

    pub fn model(&self) -> &DualBranchForecaster {
        &self.model
    }
}

impl Proxy for ModelProxy {
    fn predict(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.model.predict(&batch.x)?)
    }
}

/// Precomputed predictions keyed by window id.
///
/// CSV layout: header `window,v0,v1,...,v{H*C-1}`, one row per window, values
/// in row-major `[H, C]` order and in normalized units.
#[derive(Clone, Debug)]
pub struct FileProxy {
    horizon: usize,
    channels: usize,
    rows: HashMap<usize, Vec<f64>>,
}

impl FileProxy {
    pub fn new(horizon: usize, channels: usize) -> Self {
        Self {
            horizon,
            channels,
            rows: HashMap::new(),
        }
    }

    pub fn insert(&mut self, window: usize, prediction: &[f64]) -> Result<()> {
        if prediction.len() != self.horizon * self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "file_proxy",
                lhs: vec![prediction.len()],
                rhs: vec![self.horizon, self.channels],
            }
            .into());
        }
        self.rows.insert(window, prediction.to_vec());
        Ok(())
    }

    /// Stores each row of a `[B, H, C]` prediction under the batch's window ids.
    pub fn insert_batch(&mut self, batch: &Batch, prediction: &Tensor) -> Result<()> {
        let width = self.horizon * self.channels;
        if prediction.numel() != batch.ids.len() * width {
            return Err(TensorError::ShapeMismatch {
                op: "file_proxy",
                lhs: prediction.shape().to_vec(),
                rhs: vec![batch.ids.len(), self.horizon, self.channels],
            }
            .into());
        }
        for (id, row) in batch.ids.iter().zip(prediction.data().chunks(width)) {
            self.insert(*id, row)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: impl AsRef<Path>, horizon: usize, channels: usize) -> Result<Self> {
        let path = path.as_ref();
        let file_err = |message: String| ProxyError::File {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| file_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| file_err(e.to_string()))?.clone();
        let width = horizon * channels;
        if headers.len() != width + 1 || &headers[0] != "window" {
            return Err(file_err(format!(
                "expected header 'window' plus {width} value columns, found {} columns",
                headers.len()
            )));
        }
        let mut proxy = Self::new(horizon, channels);
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| file_err(e.to_string()))?;
            let row = i + 1;
            let id: usize = record[0]
                .parse()
                .map_err(|_| file_err(format!("row {row}: bad window id '{}'", &record[0])))?;
            let values = record
                .iter()
                .skip(1)
                .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| file_err(format!("row {row}: non-numeric prediction value")))?;
            if values.len() != width {
                return Err(file_err(format!("row {row}: {} values, expected {width}", values.len())));
            }
            if proxy.rows.insert(id, values).is_some() {
                return Err(file_err(format!("row {row}: duplicate window {id}")));
            }
        }
        Ok(proxy)
    }

    /// Writes rows sorted by window id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file_err = |e: csv::Error| ProxyError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(file_err)?;
        let mut header = vec!["window".to_string()];
        header.extend((0..self.horizon * self.channels).map(|i| format!("v{i}")));
        w.write_record(&header).map_err(file_err)?;
        let mut ids: Vec<&usize> = self.rows.keys().collect();
        ids.sort();
        for id in ids {
            let mut rec = vec![id.to_string()];
            rec.extend(self.rows[id].iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(file_err)?;
        }
        w.flush().map_err(|e| ProxyError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl Proxy for FileProxy {
    fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut data = Vec::with_capacity(batch.ids.len() * self.horizon * self.channels);
        for id in &batch.ids {
            data.extend_from_slice(self.rows.get(id).ok_or(ProxyError::MissingWindow(*id))?);
        }
        Ok(Tensor::new(vec![batch.ids.len(), self.horizon, self.channels], data)?)
    }
}

/// Signed residual `z_s - z_t`.
pub fn residual(z_source: &Tensor, z_target: &Tensor) -> Result<Tensor> {
    Ok(z_source.sub(z_target)?)
}

fn check_strength(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(ProxyError::InvalidStrength(alpha))
    }
}

/// `z_proxy - alpha * (z_s - z_t)`.
pub fn denoise(z_proxy: &Tensor, z_source: &Tensor, z_target: &Tensor, alpha: f64) -> Result<Tensor> {
    check_strength(alpha)?;
    let r = residual(z_source, z_target)?;
    Ok(z_proxy.zip_map(&r, "denoise", |p, e| p - alpha * e)?)
}

/// Mean over samples of the L2 norm of each flattened `z_s - z_t` row.
pub fn proxy_error(z_source: &Tensor, z_target: &Tensor) -> Result<f64> {
    let r = residual(z_source, z_target)?;
    let rows = *r.shape().first().ok_or(ProxyError::EmptyBatch)?;
    if rows == 0 || r.numel() == 0 {
        return Err(ProxyError::EmptyBatch);
    }
    let width = r.numel() / rows;
    let total: f64 = r.data().chunks(width).map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    Ok(total / rows as f64)
}

/// `exp(-e / tau)`, clamped below at the smallest positive normal `f64`.
pub fn confidence(error: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ProxyError::InvalidTemperature(temperature));
    }
    if !(error >= 0.0) {
        return Err(ProxyError::InvalidError(error));
    }
    Ok((-error / temperature).exp().max(f64::MIN_POSITIVE))
}

/// Correction strength and temperature for the denoising step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Denoiser {
    alpha: f64,
    temperature: f64,
}

impl Denoiser {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        check_strength(alpha)?;
        confidence(0.0, temperature)?;
        Ok(Self { alpha, temperature })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// The three models of an adaptation run plus the denoiser settings.
pub struct ProxyBundle<'a> {
    pub source: &'a DualBranchForecaster,
    pub target: DualBranchForecaster,
    pub proxy: &'a dyn Proxy,
    pub denoiser: Denoiser,
}

impl<'a> ProxyBundle<'a> {
    /// Starts the target as a bit-exact copy of the frozen source.
    pub fn new(source: &'a DualBranchForecaster, proxy: &'a dyn Proxy, denoiser: Denoiser) -> Result<Self> {
        let mut target = source.clone();
        target.params_mut().set_frozen(false);
        Ok(Self {
            source,
            target,
            proxy,
            denoiser,
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
    fn residual_examples() {
        assert_eq!(residual(&t(&[1.0]), &t(&[0.5])).unwrap().data(), &[0.5]);
        assert!(residual(&t(&[2.0, 3.0]), &t(&[2.0, 3.0])).unwrap().data().iter().all(|v| *v == 0.0));
        let a = t(&[1.0, -2.5]);
        let b = t(&[0.25, 4.0]);
        assert_eq!(residual(&b, &a).unwrap(), residual(&a, &b).unwrap().scale(-1.0));
    }

    #[test]
    fn denoise_examples() {
        let zp = t(&[2.0]);
        assert_eq!(denoise(&zp, &t(&[1.0]), &t(&[0.5]), 1.0).unwrap().data(), &[1.5]);
        assert_eq!(denoise(&zp, &t(&[9.0]), &t(&[-3.0]), 0.0).unwrap(), zp);
        for alpha in [0.0, 0.3, 1.0] {
            assert_eq!(denoise(&zp, &t(&[0.7]), &t(&[0.7]), alpha).unwrap(), zp);
        }
        assert!(matches!(denoise(&zp, &zp, &zp, 1.5), Err(ProxyError::InvalidStrength(_))));
        assert!(denoise(&zp, &t(&[1.0, 2.0]), &zp, 0.5).is_err());
    }

    #[test]
    fn proxy_error_examples() {
        let zero = Tensor::zeros(&[1, 2]);
        let r = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(proxy_error(&r, &zero).unwrap(), 5.0);
        let two = Tensor::new(vec![2, 1], vec![1.0, -3.0]).unwrap();
        assert_eq!(proxy_error(&two, &Tensor::zeros(&[2, 1])).unwrap(), 2.0);
        assert_eq!(proxy_error(&two, &two).unwrap(), 0.0);
        assert!(proxy_error(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(0.0, 1.0).unwrap(), 1.0);
        assert!((confidence(2.0, 2.0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        let tiny = confidence(1e9, 1.0).unwrap();
        assert!(tiny > 0.0 && tiny == f64::MIN_POSITIVE);
        assert!(confidence(1.0, 0.0).is_err());
        assert!(confidence(-1.0, 1.0).is_err());
    }

    #[test]
    fn file_proxy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.csv");
        let mut p = FileProxy::new(2, 1);
        p.insert(3, &[0.1, -2.0]).unwrap();
        p.insert(0, &[1.0, 1.0 / 3.0]).unwrap();
        p.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("window,v0,v1\n0,"));
        let back = FileProxy::load(&path, 2, 1).unwrap();
        let batch = Batch {
            x: Tensor::zeros(&[2, 1, 1]),
            y: Tensor::zeros(&[2, 2, 1]),
            ids: vec![3, 0],
        };
        let z = back.predict(&batch).unwrap();
        assert_eq!(z.data(), &[0.1, -2.0, 1.0, 1.0 / 3.0]);
        let missing = Batch { ids: vec![7], ..batch };
        assert!(matches!(back.predict(&missing), Err(ProxyError::MissingWindow(7))));
        assert!(FileProxy::load(&path, 3, 1).is_err());
    }
}
