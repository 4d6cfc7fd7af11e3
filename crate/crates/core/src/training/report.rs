use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::forecaster::Metrics;

use super::{total_loss, LossWeights, StepOutcome};

/// One optimizer step. Serialized field names match the report CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L")]
    pub forecast: f64,
    #[serde(rename = "L_inv")]
    pub invariant: f64,
    #[serde(rename = "L_pred")]
    pub pred: f64,
    #[serde(rename = "L_rep")]
    pub rep: f64,
    #[serde(rename = "L_grad")]
    pub grad: f64,
    #[serde(rename = "L_kd")]
    pub kd: f64,
    #[serde(rename = "L_all")]
    pub total: f64,
    pub e_t: f64,
    #[serde(rename = "C_t")]
    pub c_t: f64,
}

impl StepRecord {
    pub const COLUMNS: [&'static str; 10] = ["step", "L", "L_inv", "L_pred", "L_rep", "L_grad", "L_kd", "L_all", "e_t", "C_t"];

    pub fn from_outcome(step: usize, outcome: &StepOutcome, weights: &LossWeights) -> Self {
        let effective = LossWeights {
            kd: outcome.kd_weight,
            ..*weights
        };
        let l = &outcome.losses;
        Self {
            step,
            forecast: l.forecast,
            invariant: l.invariant,
            pred: l.pred,
            rep: l.rep,
            grad: l.grad,
            kd: l.kd,
            total: total_loss(l, &effective),
            e_t: outcome.proxy_error,
            c_t: outcome.confidence,
        }
    }

    pub fn values(&self) -> [f64; 9] {
        [
            self.forecast,
            self.invariant,
            self.pred,
            self.rep,
            self.grad,
            self.kd,
            self.total,
            self.e_t,
            self.c_t,
        ]
    }
}

/// Run-level results. Contains no wall-clock data, so identical runs give
/// byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub phase: String,
    pub seed: u64,
    pub steps: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    /// Normalized validation MSE after each epoch.
    pub val_mse: Vec<f64>,
    pub initial_proxy_error: f64,
    pub initial_confidence: f64,
    pub test: Option<Metrics>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub summary: TrainSummary,
}

impl TrainReport {
    pub fn new(phase: &str, seed: u64) -> Self {
        Self {
            records: Vec::new(),
            summary: TrainSummary {
                phase: phase.into(),
                seed,
                steps: 0,
                epochs: 0,
                best_epoch: None,
                best_val_mse: None,
                val_mse: Vec::new(),
                initial_proxy_error: 0.0,
                initial_confidence: 1.0,
                test: None,
                config: serde_json::Value::Null,
            },
        }
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.summary)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> std::io::Result<Vec<StepRecord>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
            })
            .collect()
    }
}
