use serde::{Deserialize, Serialize};

/// Linear warmup to `base_lr` over `warmup_epochs`, constant afterwards.
pub fn warmup_lr(epoch: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        return base_lr;
    }
    base_lr * ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience counter on the best validation loss seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    /// Returns whether `val_loss` is a new best, and the decision.
    pub fn update(&mut self, val_loss: f64) -> (bool, StopDecision) {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.stalled = 0;
        } else {
            self.stalled += 1;
        }
        let decision = if self.stalled >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }

    /// Forgets the best loss and the stall count.
    pub fn reset(&mut self) {
        self.best = f64::INFINITY;
        self.stalled = 0;
    }
}
