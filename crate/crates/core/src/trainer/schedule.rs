/// Learning-rate decay on validation loss and early stopping on validation
/// SumR. Improvement means strictly better than the best seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay_patience: usize,
    pub decay_factor: f64,
    pub stop_patience: usize,
    pub best_loss: Option<f64>,
    /// Non-improving epochs since the last loss improvement or decay.
    pub stale_loss_epochs: usize,
    pub best_sumr: Option<f64>,
    pub stale_sumr_epochs: usize,
}

/// Outcome of one epoch's observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleDecision {
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub decayed: bool,
    /// SumR reached a new best; the epoch's model is the one to keep.
    pub new_best: bool,
    pub stop: bool,
}

impl LrSchedule {
    pub fn new(lr: f64, decay_patience: usize, decay_factor: f64, stop_patience: usize) -> Self {
        LrSchedule {
            lr,
            decay_patience,
            decay_factor,
            stop_patience,
            best_loss: None,
            stale_loss_epochs: 0,
            best_sumr: None,
            stale_sumr_epochs: 0,
        }
    }

    /// Records the validation results of epoch `epoch` (1-based).
    pub fn observe(&mut self, val_loss: f64, val_sumr: f64, epoch: usize, max_epochs: usize) -> ScheduleDecision {
        if self.best_loss.map_or(true, |b| val_loss < b) {
            self.best_loss = Some(val_loss);
            self.stale_loss_epochs = 0;
        } else {
            self.stale_loss_epochs += 1;
        }
        let decayed = self.stale_loss_epochs >= self.decay_patience;
        if decayed {
            self.lr *= self.decay_factor;
            self.stale_loss_epochs = 0;
        }
        let new_best = self.best_sumr.map_or(true, |b| val_sumr > b);
        if new_best {
            self.best_sumr = Some(val_sumr);
            self.stale_sumr_epochs = 0;
        } else {
            self.stale_sumr_epochs += 1;
        }
        ScheduleDecision {
            lr: self.lr,
            decayed,
            new_best,
            stop: self.exhausted() || epoch >= max_epochs,
        }
    }

    /// Whether validation SumR has stalled for the full patience.
    pub fn exhausted(&self) -> bool {
        self.stale_sumr_epochs >= self.stop_patience
    }
}
