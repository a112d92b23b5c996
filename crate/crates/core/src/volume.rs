//! Volumetric containers, label semantics and the side split.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("volume shape {0} has an empty axis")]
    EmptyShape(Shape3),
    #[error("data length {len} does not match shape {shape}")]
    LengthMismatch { shape: Shape3, len: usize },
    #[error("spacing components must be positive and finite, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("volume contains {0} non-finite voxels")]
    NonFinite(usize),
    #[error("population standard deviation {0:e} is below 1e-8; constant scan")]
    ZeroVariance(f64),
    #[error("split index {index} is outside (0, {x_extent})")]
    PlaneOutOfBounds { index: usize, x_extent: usize },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("invalid class id {value} at voxel {index}")]
    InvalidClass { value: u8, index: usize },
    #[error("annotated range [{lo}, {hi}] invalid for z extent {z}")]
    InvalidRange { lo: usize, hi: usize, z: usize },
}

/// Extent of a volume along `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Shape3 {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Self { z, y, x }
    }

    pub const fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.y * self.x
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    /// Inverse of [`Shape3::index`].
    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.x;
        let y = (index / self.x) % self.y;
        let z = index / (self.x * self.y);
        (z, y, x)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.z, self.y, self.x]
    }

    pub const fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.z, self.y, self.x)
    }
}

/// Dense 3D array in `(z, y, x)` order, `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

pub type Mask3 = Grid3<bool>;

impl<T: Copy> Grid3<T> {
    pub fn filled(shape: Shape3, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self, VolumeError> {
        if data.len() != shape.len() {
            return Err(VolumeError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.z {
            for y in 0..shape.y {
                for x in 0..shape.x {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.shape.index(z, y, x);
        self.data[i] = value;
    }

    /// One `(y, x)` plane at depth `z`.
    pub fn plane(&self, z: usize) -> &[T] {
        let n = self.shape.plane_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn plane_mut(&mut self, z: usize) -> &mut [T] {
        let n = self.shape.plane_len();
        &mut self.data[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the x-range `[x0, x1)` of every row into a new grid.
    pub fn slice_x(&self, x0: usize, x1: usize) -> Self {
        let shape = Shape3::new(self.shape.z, self.shape.y, x1 - x0);
        let mut data = Vec::with_capacity(shape.len());
        for row in self.data.chunks_exact(self.shape.x) {
            data.extend_from_slice(&row[x0..x1]);
        }
        Self { shape, data }
    }

    /// Extracts the box starting at `origin` with extent `shape`; voxels that
    /// fall outside this grid take `fill`.
    pub fn crop_padded(&self, origin: [isize; 3], shape: Shape3, fill: T) -> Self {
        let mut out = Self::filled(shape, fill);
        let src = self.shape;
        for z in 0..shape.z {
            let sz = origin[0] + z as isize;
            if sz < 0 || sz >= src.z as isize {
                continue;
            }
            for y in 0..shape.y {
                let sy = origin[1] + y as isize;
                if sy < 0 || sy >= src.y as isize {
                    continue;
                }
                let x_lo = (-origin[2]).max(0) as usize;
                let x_hi = ((src.x as isize - origin[2]).min(shape.x as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let s0 = src.index(sz as usize, sy as usize, (origin[2] + x_lo as isize) as usize);
                let d0 = shape.index(z, y, x_lo);
                out.data[d0..d0 + (x_hi - x_lo)].copy_from_slice(&self.data[s0..s0 + (x_hi - x_lo)]);
            }
        }
        out
    }

    /// Writes `patch` into this grid at `origin`, skipping parts that fall outside.
    pub fn paste(&mut self, origin: [isize; 3], patch: &Grid3<T>) {
        let dst = self.shape;
        let ps = patch.shape;
        for z in 0..ps.z {
            let dz = origin[0] + z as isize;
            if dz < 0 || dz >= dst.z as isize {
                continue;
            }
            for y in 0..ps.y {
                let dy = origin[1] + y as isize;
                if dy < 0 || dy >= dst.y as isize {
                    continue;
                }
                for x in 0..ps.x {
                    let dx = origin[2] + x as isize;
                    if dx < 0 || dx >= dst.x as isize {
                        continue;
                    }
                    let i = dst.index(dz as usize, dy as usize, dx as usize);
                    self.data[i] = patch.data[ps.index(z, y, x)];
                }
            }
        }
    }
}

impl Grid3<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Voxel spacing in millimetres, `(dz, dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(dz: f64, dy: f64, dx: f64) -> Result<Self, VolumeError> {
        let s = [dz, dy, dx];
        if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(VolumeError::InvalidSpacing(s));
        }
        Ok(Self(s))
    }

    pub fn isotropic(mm: f64) -> Result<Self, VolumeError> {
        Self::new(mm, mm, mm)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self([1.0; 3])
    }
}

/// A scalar MR scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    case_id: String,
    spacing: Spacing,
    grid: Grid3<f32>,
}

impl ImageVolume {
    /// Validates shape, spacing and finiteness.
    pub fn new(case_id: impl Into<String>, grid: Grid3<f32>, spacing: Spacing) -> Result<Self, VolumeError> {
        if grid.shape().is_empty() {
            return Err(VolumeError::EmptyShape(grid.shape()));
        }
        Spacing::new(spacing.0[0], spacing.0[1], spacing.0[2])?;
        let bad = grid.data().iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(VolumeError::NonFinite(bad));
        }
        Ok(Self {
            case_id: case_id.into(),
            spacing,
            grid,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape()
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn into_grid(self) -> Grid3<f32> {
        self.grid
    }

    fn with_grid(&self, grid: Grid3<f32>) -> Self {
        Self {
            case_id: self.case_id.clone(),
            spacing: self.spacing,
            grid,
        }
    }

    /// Per-scan z-score with the population standard deviation.
    pub fn normalize_zscore(&self) -> Result<Self, VolumeError> {
        let data = self.grid.data();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std < 1e-8 {
            return Err(VolumeError::ZeroVariance(std));
        }
        let grid = self.grid.map(|v| ((v as f64 - mean) / std) as f32);
        Ok(self.with_grid(grid))
    }

    pub fn split_sides(&self, plane: SideSplitPlane) -> Result<(Self, Self), VolumeError> {
        let (l, r) = split_sides(&self.grid, plane)?;
        Ok((self.with_grid(l), self.with_grid(r)))
    }

    pub fn merge_sides(left: &Self, right: &Self, plane: SideSplitPlane) -> Result<Self, VolumeError> {
        let grid = merge_sides(&left.grid, &right.grid, plane)?;
        Ok(left.with_grid(grid))
    }
}

/// Voxel classes. The numeric values are part of every on-disk format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    Lumen = 1,
    NormalWall = 2,
    DiseasedWall = 3,
    Ignore = 4,
}

impl ClassId {
    /// Classes a network predicts (everything but `Ignore`).
    pub const NUM_PREDICTED: usize = 4;
    pub const FOREGROUND: [ClassId; 3] = [ClassId::Lumen, ClassId::NormalWall, ClassId::DiseasedWall];

    pub const fn id(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Background,
            1 => Self::Lumen,
            2 => Self::NormalWall,
            3 => Self::DiseasedWall,
            4 => Self::Ignore,
            _ => return None,
        })
    }
}

pub const BACKGROUND: u8 = ClassId::Background as u8;
pub const LUMEN: u8 = ClassId::Lumen as u8;
pub const NORMAL_WALL: u8 = ClassId::NormalWall as u8;
pub const DISEASED_WALL: u8 = ClassId::DiseasedWall as u8;
pub const IGNORE: u8 = ClassId::Ignore as u8;

/// Left (`x` below the split) or right carotid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn code(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Inclusive slice interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ZRange {
    pub lo: usize,
    pub hi: usize,
}

impl ZRange {
    pub fn contains(&self, z: usize) -> bool {
        self.lo <= z && z <= self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideRanges {
    pub left: Option<ZRange>,
    pub right: Option<ZRange>,
}

impl SideRanges {
    pub fn get(&self, side: Side) -> Option<ZRange> {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    pub fn set(&mut self, side: Side, range: Option<ZRange>) {
        match side {
            Side::Left => self.left = range,
            Side::Right => self.right = range,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_none() && self.right.is_none()
    }
}

/// Sagittal plane separating the two carotids: left is `x < index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideSplitPlane {
    index: usize,
}

impl SideSplitPlane {
    pub fn new(index: usize, x_extent: usize) -> Result<Self, VolumeError> {
        if index == 0 || index >= x_extent {
            return Err(VolumeError::PlaneOutOfBounds { index, x_extent });
        }
        Ok(Self { index })
    }

    /// `⌊X/2⌋`.
    pub fn midline(x_extent: usize) -> Result<Self, VolumeError> {
        Self::new(x_extent / 2, x_extent)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn side_of(&self, x: usize) -> Side {
        if x < self.index {
            Side::Left
        } else {
            Side::Right
        }
    }

    /// `x` interval `[lo, hi)` occupied by `side` in a volume of width `x_extent`.
    pub fn x_range(&self, side: Side, x_extent: usize) -> (usize, usize) {
        match side {
            Side::Left => (0, self.index),
            Side::Right => (self.index, x_extent),
        }
    }

    fn check(&self, x_extent: usize) -> Result<(), VolumeError> {
        Self::new(self.index, x_extent).map(|_| ())
    }
}

/// Splits along `x` into `[0, index)` and `[index, X)`.
pub fn split_sides<T: Copy>(grid: &Grid3<T>, plane: SideSplitPlane) -> Result<(Grid3<T>, Grid3<T>), VolumeError> {
    let x = grid.shape().x;
    plane.check(x)?;
    Ok((grid.slice_x(0, plane.index), grid.slice_x(plane.index, x)))
}

/// Concatenates two halves along `x`; inverse of [`split_sides`].
pub fn merge_sides<T: Copy>(left: &Grid3<T>, right: &Grid3<T>, plane: SideSplitPlane) -> Result<Grid3<T>, VolumeError> {
    let (ls, rs) = (left.shape(), right.shape());
    if ls.z != rs.z || ls.y != rs.y || ls.x != plane.index || rs.x == 0 {
        return Err(VolumeError::ShapeMismatch(ls, rs));
    }
    let shape = Shape3::new(ls.z, ls.y, ls.x + rs.x);
    let mut data = Vec::with_capacity(shape.len());
    for (lrow, rrow) in left.data().chunks_exact(ls.x).zip(right.data().chunks_exact(rs.x)) {
        data.extend_from_slice(lrow);
        data.extend_from_slice(rrow);
    }
    Grid3::from_vec(shape, data)
}

/// Voxelwise class map plus the per-side slice interval where labels derive
/// from trusted annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid3<u8>,
    ranges: SideRanges,
}

impl LabelVolume {
    pub fn new(grid: Grid3<u8>, ranges: SideRanges) -> Result<Self, VolumeError> {
        if let Some((index, &value)) = grid.data().iter().enumerate().find(|(_, &v)| v > IGNORE) {
            return Err(VolumeError::InvalidClass { value, index });
        }
        for r in [ranges.left, ranges.right].into_iter().flatten() {
            if r.lo > r.hi || r.hi >= grid.shape().z {
                return Err(VolumeError::InvalidRange {
                    lo: r.lo,
                    hi: r.hi,
                    z: grid.shape().z,
                });
            }
        }
        Ok(Self { grid, ranges })
    }

    pub fn background(shape: Shape3) -> Self {
        Self {
            grid: Grid3::filled(shape, BACKGROUND),
            ranges: SideRanges::default(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape()
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.grid
    }

    pub fn data(&self) -> &[u8] {
        self.grid.data()
    }

    pub fn ranges(&self) -> SideRanges {
        self.ranges
    }

    pub fn with_ranges(mut self, ranges: SideRanges) -> Result<Self, VolumeError> {
        self.ranges = ranges;
        Self::new(self.grid, self.ranges)
    }

    pub fn into_grid(self) -> Grid3<u8> {
        self.grid
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.grid.data().iter().filter(|&&v| v == class.id()).count()
    }

    /// Left half keeps only the left range, right half only the right one.
    pub fn split_sides(&self, plane: SideSplitPlane) -> Result<(Self, Self), VolumeError> {
        let (l, r) = split_sides(&self.grid, plane)?;
        Ok((
            Self {
                grid: l,
                ranges: SideRanges {
                    left: self.ranges.left,
                    right: None,
                },
            },
            Self {
                grid: r,
                ranges: SideRanges {
                    left: None,
                    right: self.ranges.right,
                },
            },
        ))
    }

    pub fn merge_sides(left: &Self, right: &Self, plane: SideSplitPlane) -> Result<Self, VolumeError> {
        let grid = merge_sides(&left.grid, &right.grid, plane)?;
        Ok(Self {
            grid,
            ranges: SideRanges {
                left: left.ranges.left,
                right: right.ranges.right,
            },
        })
    }

    /// Lumen mask and vessel-wall mask (normal or diseased). `Ignore` is in neither.
    pub fn map_to_tasks(&self) -> (Mask3, Mask3) {
        (
            self.grid.map(|v| v == LUMEN),
            self.grid.map(|v| v == NORMAL_WALL || v == DISEASED_WALL),
        )
    }
}
