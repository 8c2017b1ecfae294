//! Weak-label training: loss, Adam, the epoch loop and checkpoints.

mod adam;
mod checkpoint;
mod loss;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, INIT_SCHEME};
pub use loss::{compute_loss, mil_pool, LossWeights};
pub use trainer::{epoch_order, examples_from_records, TrainingExample, Trainer};

use crate::data::{DataError, FormatError};
use crate::model::ConfigError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss on video {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// True for failures caused by NaN or infinite values.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss(_) | TrainError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_weights: LossWeights,
    /// Seeds both initialization and the per-epoch shuffle.
    pub seed: u64,
    /// Checkpoint interval in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            loss_weights: LossWeights::default(),
            seed: 7,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(ConfigError(format!("eps must be positive, got {}", self.eps)));
        }
        let w = self.loss_weights;
        if [w.av, w.audio, w.visual].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(ConfigError("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}
