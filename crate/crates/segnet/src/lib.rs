//! CPU 3D U-Net for four-class vessel-wall segmentation: model, Dice plus
//! cross-entropy loss, patch sampling, augmentation and SGD training.

pub mod augment;
pub mod checkpoint;
mod direct;
mod layers;
pub mod loss;
pub mod model;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use augment::{augment, flip_axis, AugmentationConfig, SpatialTransform};
pub use checkpoint::Checkpoint;
pub use loss::{dice_ce_loss, LossOutput, DICE_EPS};
pub use model::{build_model, ForwardCache, KernelKind, NormKind, UNet3D, UNet3DConfig};
pub use sampling::{sample_patch, Patch, TrainingCase};
pub use schedule::poly_lr;
pub use tensor::Tensor;
pub use train::{lr_schedule, train, train_with, EpochReport, StepStats, Trainer, TrainingConfig};

use cosmosseg_core::Shape3;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegNetError {
    #[error("patch {patch} is not divisible by {factor} on every axis")]
    IncompatiblePatch { patch: Shape3, factor: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} input channels, found {found}")]
    InputChannels { expected: usize, found: usize },
    #[error("checkpoint holds {found} weights, network needs {expected}")]
    WeightCount { expected: usize, found: usize },
    #[error("epoch {epoch} outside [0, {total}]")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("every voxel is ignored")]
    AllIgnored,
    #[error("scores, targets and ignore mask have inconsistent lengths")]
    LossShape,
    #[error("target class {value} outside 0..{classes}")]
    InvalidTarget { value: u8, classes: usize },
    #[error("case {0:?} has no usable (non-ignored) voxels")]
    NoUsableVoxels(String),
    #[error("image shape {0} differs from label shape {1}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite ({loss})")]
    DivergedLoss { loss: f64 },
    #[error("loss became non-finite ({loss}) in epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

impl PartialEq for SegNetError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}
