//! Mini-batching, the optimization loop, learning-rate schedule, early
//! stopping and checkpoints.

mod checkpoint;
mod dataset;
mod fit;
mod optim;
mod schedule;

pub use checkpoint::{f64_from_meta, f64_to_meta, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, PARAM_PREFIX};
pub use dataset::{make_batches, Batch, BatchInputs, Caption, TrainingDataset};
pub use fit::{batch_loss, evaluate_dataset, train_step, EpochRecord, Trainer};
pub use optim::Adam;
pub use schedule::{LrSchedule, ScheduleDecision};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stale validation-loss epochs before the learning rate is decayed.
    pub lr_decay_patience: usize,
    pub lr_decay_factor: f64,
    /// Stale validation-SumR epochs before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            lr_decay_patience: 3,
            lr_decay_factor: 0.5,
            early_stop_patience: 10,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.lr_decay_patience == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("patience values and max_epochs must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("lr_decay_factor must be in (0, 1]"));
        }
        Ok(())
    }
}
