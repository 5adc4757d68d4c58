//! Losses, schedules, optimizer, training loops, sliding-window inference and
//! evaluation metrics.

pub mod fit;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod schedule;

use serde::{Deserialize, Serialize};

use crate::backbone::Freeze;
use crate::data::AugmentPreset;
use crate::error::{Error, Result};

pub use fit::{finetune, pretrain, Init};
pub use infer::{sliding_window_infer, window_grid, window_starts, VolumePredictor};
pub use loss::{
    ce_label_smooth, ce_label_smooth_grad, dice_loss, dice_loss_grad, dice_loss_with, segmentation_loss, LossWeights,
    DICE_SMOOTH,
};
pub use metrics::{
    auc, classification_metrics, dice_coefficient, evaluate_classification, evaluate_segmentation, largest_component,
    ClassificationMetrics, SegEvalOptions, SegmentationMetrics,
};
pub use optim::{Sgd, SgdConfig};
pub use schedule::{lr_at, ScheduleKind, ScheduleSpec};

/// Everything that governs a training run. The schedule advances once per epoch,
/// so step milestones are epoch numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub loss_weights: LossWeights,
    /// Governs shuffling and augmentation.
    pub seed: u64,
    pub freeze: Freeze,
    pub augment: AugmentPreset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            schedule: ScheduleKind::Cosine,
            lr: 0.05,
            epochs: 10,
            batch_size: 16,
            label_smoothing: 0.0,
            loss_weights: LossWeights::LIDC,
            seed: 0,
            freeze: Freeze::None,
            augment: AugmentPreset::None,
        }
    }
}

impl TrainConfig {
    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule.clone(),
            base_lr: self.lr,
            total_steps: self.epochs.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_spec().validate()?;
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.sgd.momentum < 0.0 || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config("momentum and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Step-decay milestones at the same relative positions as the 24-epoch
/// detection recipe (after epochs 16 and 22).
pub fn step_milestones(epochs: usize) -> Vec<usize> {
    vec![(epochs * 16).div_ceil(24), (epochs * 22).div_ceil(24)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}
