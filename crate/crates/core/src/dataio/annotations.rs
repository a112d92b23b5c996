//! Sparse contour annotations stored as JSON.
//!
//! ```json
//! {"case_id": "c0", "entries": [{"side": "L", "slice_index": 10, "status": "normal",
//!   "lumen_contour": [[x, y], ...], "wall_contour": [[x, y], ...]}]}
//! ```
//!
//! Contour points are in voxel units on the annotated slice; pixel centers sit
//! at integer coordinates.

use super::DataIoError;
use crate::volume::Side;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// Twice the signed area of the triangle `(a, b, c)`; exact for the small
/// dyadic coordinates contours use.
#[inline]
pub fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// `p` lies on the closed segment `[a, b]`.
#[inline]
pub fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    orient(a, b, p) == 0.0 && p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

/// Closed polygon; the last point connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Contour(pub Vec<Point2>);

impl Contour {
    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.0.len();
        (0..n).map(move |i| (self.0[i], self.0[(i + 1) % n]))
    }

    /// No two non-adjacent edges touch and adjacent edges share only their
    /// common vertex. Repeated points and zero-length edges are rejected.
    pub fn is_simple(&self) -> bool {
        let p = &self.0;
        let n = p.len();
        if n < 3 || p.iter().any(|q| !q.x.is_finite() || !q.y.is_finite()) {
            return false;
        }
        let edges: Vec<_> = self.edges().collect();
        if edges.iter().any(|(a, b)| a == b) {
            return false;
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = edges[i];
                let (c, d) = edges[j];
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // shared vertex is b == c (or d == a for the wrap pair); the
                    // segments must not overlap beyond it
                    let (shared, other_i, other_j) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                    debug_assert!(shared == if j == i + 1 { c } else { d });
                    if orient(other_i, shared, other_j) == 0.0 {
                        // collinear: folding back onto the previous edge overlaps it
                        let u = (other_i.x - shared.x, other_i.y - shared.y);
                        let v = (other_j.x - shared.x, other_j.y - shared.y);
                        if u.0 * v.0 + u.1 * v.1 > 0.0 {
                            return false;
                        }
                    }
                } else if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.0 {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceStatus {
    Normal,
    Atherosclerotic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub side: Side,
    pub slice_index: usize,
    pub status: SliceStatus,
    pub lumen_contour: Contour,
    pub wall_contour: Contour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseAnnotationSet {
    pub case_id: String,
    pub entries: Vec<AnnotationEntry>,
}

impl SparseAnnotationSet {
    /// Checks the set invariants and sorts entries by `(side, slice_index)`.
    pub fn validated(mut self) -> Result<Self, DataIoError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((e.side, e.slice_index)) {
                return Err(DataIoError::DuplicateSlice {
                    side: e.side,
                    slice: e.slice_index,
                });
            }
            for (name, c) in [("lumen", &e.lumen_contour), ("wall", &e.wall_contour)] {
                if c.len() < 3 {
                    return Err(DataIoError::DegenerateContour {
                        side: e.side,
                        slice: e.slice_index,
                        contour: name,
                        points: c.len(),
                    });
                }
                if !c.is_simple() {
                    return Err(DataIoError::SelfIntersectingContour {
                        side: e.side,
                        slice: e.slice_index,
                        contour: name,
                    });
                }
            }
        }
        self.entries.sort_by_key(|e| (e.side, e.slice_index));
        Ok(self)
    }

    pub fn entries_for(&self, side: Side) -> impl Iterator<Item = &AnnotationEntry> {
        self.entries.iter().filter(move |e| e.side == side)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn parse_annotations(json: &str) -> Result<SparseAnnotationSet, DataIoError> {
    let set: SparseAnnotationSet = serde_json::from_str(json).map_err(|e| DataIoError::SchemaViolation(e.to_string()))?;
    set.validated()
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<SparseAnnotationSet, DataIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataIoError::FileMissing(path.to_path_buf()),
        _ => DataIoError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    parse_annotations(&text)
}

pub fn save_annotations(set: &SparseAnnotationSet, path: impl AsRef<Path>) -> Result<(), DataIoError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(set).expect("annotation sets always serialize");
    fs::write(path, json).map_err(|e| DataIoError::WriteFailure {
        path: path.to_path_buf(),
        source: e,
    })
}
