//! Validation-loss driven learning-rate reduction and early stopping.

use serde::Serialize;

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without an improvement of at least `min_delta`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReduceOnPlateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64, min_lr: f64) -> Self {
        Self { lr, factor, patience, min_delta, min_lr, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    pub is_best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: None, bad_epochs: 0, epoch: 0 }
    }

    pub fn step(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        let is_best = val_loss < self.best - self.min_delta;
        if is_best {
            self.best = val_loss;
            self.best_epoch = Some(self.epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision { stop: self.bad_epochs >= self.patience, is_best }
    }

    /// 1-based epoch of the best loss so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_halves_on_fourth_flat_epoch() {
        let mut s = ReduceOnPlateau::new(1e-3, 0.5, 3, 1e-4, 1e-6);
        let lrs: Vec<f64> = (0..5).map(|_| s.step(1.0)).collect();
        // epoch 1 sets the reference; epochs 2-4 are the plateau
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4]);
    }

    #[test]
    fn plateau_respects_floor_and_ignores_improvement() {
        let mut s = ReduceOnPlateau::new(1e-3, 0.5, 1, 1e-4, 1e-6);
        for _ in 0..100 {
            assert!(s.step(1.0) >= 1e-6);
        }
        assert_eq!(s.lr, 1e-6);
        let mut s = ReduceOnPlateau::new(1e-3, 0.5, 2, 1e-4, 1e-6);
        for i in 0..50 {
            assert_eq!(s.step(10.0 - i as f64 * 0.1), 1e-3);
        }
    }

    #[test]
    fn early_stop_traces() {
        let mut s = EarlyStopping::new(3, 1e-4);
        let d: Vec<StopDecision> = (0..4).map(|_| s.step(1.0)).collect();
        assert!(d[0].is_best && !d[0].stop);
        assert!(!d[1].stop && !d[2].stop && d[3].stop);
        assert_eq!(s.best_epoch(), Some(1));

        let mut s = EarlyStopping::new(2, 1e-4);
        for i in 0..30 {
            let d = s.step(5.0 - i as f64 * 0.01);
            assert!(d.is_best && !d.stop);
        }
    }
}
