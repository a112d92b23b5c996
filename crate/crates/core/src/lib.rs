//! Data model and label-handling building blocks for 3D carotid vessel-wall
//! segmentation trained from sparse slice annotations.
//!
//! Volumes are always indexed `(z, y, x)` with `x` varying fastest. Left and
//! right carotids are separated by a sagittal split plane on the `x` axis.

pub mod dataio;
pub mod labelcraft;
pub mod metrics;
pub mod phantom;
pub mod volume;

pub use volume::{
    ClassId, Grid3, ImageVolume, LabelVolume, Mask3, Shape3, Side, SideRanges, SideSplitPlane,
    Spacing, VolumeError, ZRange,
};
