use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    /// Smallest decrease of the validation loss that counts as improvement.
    pub min_delta: f64,
    pub min_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub k_folds: usize,
    /// Fraction of each fold's training trials held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-3,
            label_smoothing: 0.1,
            batch_size: 32,
            max_epochs: 150,
            early_stop_patience: 15,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
            min_delta: 1e-4,
            min_learning_rate: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            k_folds: 5,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return fail(format!("scheduler_factor must lie in (0, 1), got {}", self.scheduler_factor));
        }
        if self.k_folds < 2 {
            return fail(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 || self.scheduler_patience == 0 {
            return fail("batch_size, max_epochs and both patiences must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.min_learning_rate >= 0.0 && self.min_delta >= 0.0) {
            return fail("learning rates, weight decay and min_delta must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return fail("AdamW betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        Ok(())
    }
}
