use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualBranchForecaster, ForecastError, Result, TsfeConfig};

pub const CHECKPOINT_FORMAT: &str = "tsadapt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized form: `{format, version, config, params: [{name, shape, data}]}`.
///
/// Floats are written in shortest round-trip form, so save/load/save is
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TsfeConfig,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &DualBranchForecaster) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<DualBranchForecaster> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ForecastError::Incompatible(format!("unknown format '{}'", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(ForecastError::Incompatible(format!("unsupported version {}", self.version)));
        }
        let mut model = DualBranchForecaster::new(self.config)?;
        if model.params().len() != self.params.len() {
            return Err(ForecastError::Incompatible(format!(
                "{} parameter arrays, architecture has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (p, saved) in model.params_mut().iter_mut().zip(self.params) {
            if p.name != saved.name || p.value.shape() != saved.shape.as_slice() {
                return Err(ForecastError::Incompatible(format!(
                    "parameter {} {:?} vs saved {} {:?}",
                    p.name,
                    p.value.shape(),
                    saved.name,
                    saved.shape
                )));
            }
            p.value = crate::Tensor::new(saved.shape, saved.data)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint values are finite")
    }
}

pub fn save_checkpoint(model: &DualBranchForecaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::from_model(model).to_bytes()).map_err(|source| ForecastError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DualBranchForecaster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ForecastError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|source| ForecastError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    ckpt.into_model()
}
