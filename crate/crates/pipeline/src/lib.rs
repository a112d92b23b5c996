//! Label-propagation pipeline for carotid vessel-wall segmentation.
//!
//! Sparse slice annotations are interpolated into 3D labels, a single-side
//! network (model A) is trained on them, its whole-scan predictions are
//! corrected by the interpolated labels inside the annotated ranges, and a
//! second network (model B) is retrained on the resulting pseudo labels.
//! Model B then drives sliding-window inference and per-slice diagnosis.

pub mod config;
pub mod dataset;
pub mod evalharness;
pub mod inference;
pub mod workflow;

pub use config::{ModelKind, PipelineConfig, PipelineSettings, Profile};
pub use evalharness::{run_crossval, CrossvalReport};
pub use inference::{
    diagnose_slices, generate_pseudo_labels, predict_labels, sliding_window_predict, SliceDiagnosisReport, SliceStatus,
    SlidingWindowConfig,
};
pub use workflow::{parse_stages, run_pipeline, Stage};

use cosmosseg_core::dataio::DataIoError;
use cosmosseg_core::labelcraft::LabelError;
use cosmosseg_core::metrics::MetricsError;
use cosmosseg_core::phantom::PhantomError;
use cosmosseg_core::VolumeError;
use cosmosseg_segnet::SegNetError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("window of {window} voxels exceeds the padded extent {extent}")]
    WindowLargerThanPaddedVolume { window: usize, extent: usize },
    #[error("fold {0} has no held-out or no training cases")]
    MissingFold(u8),
    #[error("{cases} cases cannot fill {k} folds")]
    TooFewCases { cases: usize, k: usize },
    #[error("stage {stage} needs {missing}, which does not exist; run the earlier stages first")]
    MissingPrerequisite { stage: String, missing: PathBuf },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("work directory is locked by another run ({0}); remove the file if no run is active")]
    Locked(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}: {1}")]
    Csv(PathBuf, String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    DataIo(DataIoError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    SegNet(#[from] SegNetError),
}

impl From<DataIoError> for PipelineError {
    fn from(e: DataIoError) -> Self {
        match e {
            DataIoError::TooFewCases { cases, k } => Self::TooFewCases { cases, k },
            e => Self::DataIo(e),
        }
    }
}

impl PipelineError {
    /// Process exit status: 2 usage or configuration, 3 missing prerequisite, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::TooFewCases { .. } | Self::Locked(_) => 2,
            Self::MissingPrerequisite { .. } => 3,
            Self::SegNet(SegNetError::InvalidConfig(_) | SegNetError::IncompatiblePatch { .. }) => 2,
            _ => 1,
        }
    }
}
