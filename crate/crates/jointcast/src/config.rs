//! Run configuration: model dimensions, training hyperparameters, paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Hidden feature width.
    #[serde(rename = "D")]
    pub d: usize,
    /// Attention heads.
    #[serde(rename = "H")]
    pub h: usize,
    /// Mixture components (joint futures).
    #[serde(rename = "K")]
    pub k: usize,
    /// Encoder attention blocks per family.
    #[serde(rename = "L_enc")]
    pub l_enc: usize,
    /// Decoder attention blocks per recurrent step.
    #[serde(rename = "L_dec")]
    pub l_dec: usize,
    /// Proposal recurrence count; each step emits `chunk_steps` positions.
    pub recurrent_steps: usize,
    pub chunk_steps: usize,
    /// History steps.
    #[serde(rename = "T")]
    pub t: usize,
    /// Prediction horizon steps.
    #[serde(rename = "T_prime")]
    pub t_prime: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Map-to-map neighbors.
    pub map_knn: usize,
    /// Agent-map / social / mode-map attention radius, meters.
    pub neighbor_radius: f64,
    /// Nearest-neighbor fallback size when a radius query is empty.
    pub knn_fallback: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub train_path: String,
    pub val_path: String,
    pub checkpoint_path: String,
    pub log_path: String,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 128,
            h: 8,
            k: 6,
            l_enc: 2,
            l_dec: 2,
            recurrent_steps: 3,
            chunk_steps: 20,
            t: 50,
            t_prime: 60,
            epochs: 50,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.1,
            dropout: 0.1,
            seed: 0,
            map_knn: 8,
            neighbor_radius: 50.0,
            knn_fallback: 8,
            num_train: 200,
            num_val: 50,
            train_path: "data/train.jsonl".into(),
            val_path: "data/val.jsonl".into(),
            checkpoint_path: "out/model.ckpt".into(),
            log_path: "out/train_log.csv".into(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks the invariants and syncs the generator's step counts to T/T'.
    pub fn validated(mut self) -> Result<Self> {
        if self.d == 0 || self.h == 0 || self.d % self.h != 0 {
            return Err(Error::Config(format!(
                "D={} must be a positive multiple of H={}",
                self.d, self.h
            )));
        }
        if self.recurrent_steps * self.chunk_steps != self.t_prime {
            return Err(Error::Config(format!(
                "recurrent_steps*chunk_steps = {}*{} must equal T_prime={}",
                self.recurrent_steps, self.chunk_steps, self.t_prime
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.t < 2 {
            return Err(Error::Config("T must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout={} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be > 0 and weight_decay >= 0".into(),
            ));
        }
        if self.neighbor_radius <= 0.0 || self.knn_fallback == 0 || self.map_knn == 0 {
            return Err(Error::Config(
                "neighbor_radius, knn_fallback, and map_knn must be positive".into(),
            ));
        }
        self.generator.history_steps = self.t;
        self.generator.horizon_steps = self.t_prime;
        self.generator.validate()?;
        Ok(self)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("config {}: {e}", path.display()),
        })?;
        cfg.validated()
    }
}
