use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::KDLossTerms;

/// Summary of one training run.
///
/// Everything except `wall_clock_secs` is a deterministic function of the
/// configuration, seed and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub pipeline: String,
    pub config_hash: String,
    pub seed: u64,
    /// Resolved configuration of the run.
    pub config: serde_json::Value,
    /// Mean batch loss per iteration.
    pub loss_curve: Vec<f64>,
    /// Per-iteration distillation terms (distillation pipelines only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kd_terms: Vec<KDLossTerms>,
    pub wall_clock_secs: f64,
    pub checkpoint_id: Option<String>,
    pub metrics_id: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(pipeline: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            config_hash: crate::checkpoint::config_hash(&config),
            seed,
            config,
            loss_curve: Vec::new(),
            kd_terms: Vec::new(),
            wall_clock_secs: 0.0,
            checkpoint_id: None,
            metrics_id: None,
            notes: BTreeMap::new(),
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().copied()
    }

    /// Trailing moving average with the given window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        smooth(&self.loss_curve, window)
    }

    /// Loss curve as `iter,loss` CSV.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iter,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{i},{l:.12e}\n"));
        }
        out
    }

    /// Writes `record.json` and `loss.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join("record.json");
        let text = serde_json::to_string_pretty(self).expect("record serialises");
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
        let path = dir.join("loss.csv");
        fs::write(&path, self.loss_csv()).map_err(|e| CoreError::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
    }
}

/// Trailing moving average; the first `window - 1` entries average what is
/// available.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
