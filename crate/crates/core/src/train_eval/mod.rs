//! Training loop, evaluation harness and the ablation runner.
//!
//! Training and evaluation run in `f64`. Per-sample work (augmentation,
//! forward pass, matching, backward pass, decoding) may run on the rayon
//! pool; results are always reduced in sample order, so the numbers do not
//! depend on the thread count.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::geometry::GeometryError;
use crate::hand_model::HandModelError;
use crate::matching::{LossWeights, MatchingError};
use crate::model::ModelError;
use crate::nn::NnError;

mod ablate;
mod eval;
mod train;

pub use ablate::{ablate, AblationConfig, AblationRow, AblationTable, AblationVariant, SideErrors};
pub use eval::{
    evaluate, predict, score, EvalOptions, EvalReport, FramePrediction, FrameRecord, PredictedHand,
};
pub use train::{dataset_loss, gt_hands, sample_loss, train, EpochRecord, LogRecord, StepRecord, TrainLog, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("rescaling requested without scale statistics")]
    MissingScaleStats,
    #[error("{0}")]
    Data(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    HandModel(#[from] HandModelError),
    #[error(transparent)]
    Dataset(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate of every non-backbone parameter.
    pub lr_transformer: f64,
    /// Learning rate of parameters under `backbone.`.
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    /// First epoch (0-based) trained at the dropped rates.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub loss: LossWeights,
    /// Seeds model initialization, shuffling and augmentation.
    pub seed: u64,
    /// Process samples sequentially on the calling thread.
    pub deterministic: bool,
    /// Random horizontal flips during training.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            total_epochs: 30,
            lr_drop_epoch: 20,
            lr_drop_factor: 10.0,
            loss: LossWeights::default(),
            seed: 0,
            deterministic: true,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.lr_transformer) || !positive(self.lr_backbone) {
            return err("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return err("batch_size and total_epochs must be positive");
        }
        if self.lr_drop_epoch >= self.total_epochs {
            return err("lr_drop_epoch must be less than total_epochs");
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return err("lr_drop_factor must be at least 1");
        }
        let w = &self.loss;
        if !(w.cls >= 0.0 && w.l1 >= 0.0 && w.no_object >= 0.0) {
            return err("loss weights must be non-negative");
        }
        Ok(())
    }

    /// `(lr_transformer, lr_backbone)` in effect during `epoch`.
    pub fn lrs_at(&self, epoch: usize) -> (f64, f64) {
        if epoch < self.lr_drop_epoch {
            (self.lr_transformer, self.lr_backbone)
        } else {
            (self.lr_transformer / self.lr_drop_factor, self.lr_backbone / self.lr_drop_factor)
        }
    }
}
