//! On-disk formats: NIfTI volumes, annotation JSON and the case catalog.

mod annotations;
mod catalog;
mod nifti;

pub use annotations::{
    load_annotations, on_segment, orient, parse_annotations, save_annotations, AnnotationEntry, Contour, Point2,
    SliceStatus, SparseAnnotationSet,
};
pub use catalog::{assign_folds, load_catalog, save_catalog, CaseRecord, Catalog};
pub use nifti::{load_labels, load_volume, save_labels, save_volume};

use crate::volume::{Side, VolumeError};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("file not found: {0}")]
    FileMissing(PathBuf),
    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),
    #[error("volume contains {count} non-finite voxels")]
    NonFiniteVoxels { count: usize },
    #[error("voxel {index} holds {value}, not a class id")]
    InvalidLabel { index: usize, value: f64 },
    #[error("cannot write {path}: {source}")]
    WriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation schema violation: {0}")]
    SchemaViolation(String),
    #[error("slice {slice} on side {side} is annotated more than once")]
    DuplicateSlice { side: Side, slice: usize },
    #[error("{contour} contour on side {side}, slice {slice} has {points} points; at least 3 required")]
    DegenerateContour {
        side: Side,
        slice: usize,
        contour: &'static str,
        points: usize,
    },
    #[error("{contour} contour on side {side}, slice {slice} intersects itself")]
    SelfIntersectingContour {
        side: Side,
        slice: usize,
        contour: &'static str,
    },
    #[error("{cases} cases cannot fill {k} folds")]
    TooFewCases { cases: usize, k: usize },
    #[error("catalog: {0}")]
    Catalog(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}
