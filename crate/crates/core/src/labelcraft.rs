//! Turning sparse slice annotations into 3D label volumes, and correcting
//! model pseudo labels with them.
//!
//! Rasterization uses the even-odd rule on pixel centers: a pixel belongs to a
//! contour's interior iff its center is strictly inside. Centers lying exactly
//! on an edge are outside, which keeps the fill symmetric under right-angle
//! rotations and reflections of the grid.

use crate::dataio::{on_segment, orient, AnnotationEntry, Contour, Point2, SliceStatus, SparseAnnotationSet};
use crate::volume::{
    Grid3, LabelVolume, Shape3, Side, SideRanges, SideSplitPlane, VolumeError, ZRange, BACKGROUND, DISEASED_WALL,
    IGNORE, LUMEN, NORMAL_WALL,
};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("contour on side {side}, slice {slice} leaves the {ny}x{nx} grid")]
    OutOfBounds { side: Side, slice: usize, ny: usize, nx: usize },
    #[error("lumen on side {side}, slice {slice} is not enclosed by the wall contour")]
    LumenOutsideWall { side: Side, slice: usize },
    #[error("annotation set has no entries")]
    EmptyAnnotationSet,
    #[error("annotation on side {side}, slice {slice} reaches across the split plane")]
    ContourCrossesSplit { side: Side, slice: usize },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("interpolated labels carry no annotated range")]
    MissingRange,
    #[error("pseudo labels contain ignore voxels")]
    PseudoHasIgnore,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Class map of one annotated slice over the full `(y, x)` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterizedSlice {
    pub slice_index: usize,
    pub side: Side,
    pub status: SliceStatus,
    pub ny: usize,
    pub nx: usize,
    pub classes: Vec<u8>,
}

impl RasterizedSlice {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.nx + x]
    }
}

/// Pixels whose centers lie strictly inside `contour` (even-odd rule).
pub fn fill_contour(contour: &Contour, ny: usize, nx: usize) -> Vec<bool> {
    let mut out = vec![false; ny * nx];
    if contour.len() < 3 || ny == 0 || nx == 0 {
        return out;
    }
    let (lo, hi) = contour.bounds();
    let y0 = lo.y.ceil().max(0.0) as usize;
    let x0 = lo.x.ceil().max(0.0) as usize;
    if hi.y < 0.0 || hi.x < 0.0 {
        return out;
    }
    let y1 = (hi.y.floor() as usize).min(ny - 1);
    let x1 = (hi.x.floor() as usize).min(nx - 1);
    let edges: Vec<(Point2, Point2)> = contour.edges().collect();
    for y in y0..=y1 {
        let py = y as f64;
        // edges spanning this row under the half-open rule
        let row_edges: Vec<_> = edges.iter().filter(|(a, b)| (a.y > py) != (b.y > py)).collect();
        let touching: Vec<_> = edges
            .iter()
            .filter(|(a, b)| a.y.min(b.y) <= py && py <= a.y.max(b.y))
            .collect();
        for x in x0..=x1 {
            let p = Point2::new(x as f64, py);
            if touching.iter().any(|(a, b)| on_segment(*a, *b, p)) {
                continue;
            }
            let crossings = row_edges.iter().filter(|(a, b)| (orient(*a, *b, p) > 0.0) == (b.y > a.y)).count();
            out[y * nx + x] = crossings % 2 == 1;
        }
    }
    out
}

fn check_bounds(c: &Contour, ny: usize, nx: usize) -> bool {
    let (lo, hi) = c.bounds();
    lo.x >= -0.5 && lo.y >= -0.5 && hi.x <= nx as f64 - 0.5 && hi.y <= ny as f64 - 0.5
}

/// Lumen interior becomes `LUMEN`; the rest of the wall interior becomes
/// `NORMAL_WALL` or `DISEASED_WALL` by slice status.
pub fn rasterize_slice(entry: &AnnotationEntry, ny: usize, nx: usize) -> Result<RasterizedSlice, LabelError> {
    let (side, slice) = (entry.side, entry.slice_index);
    if !check_bounds(&entry.lumen_contour, ny, nx) || !check_bounds(&entry.wall_contour, ny, nx) {
        return Err(LabelError::OutOfBounds { side, slice, ny, nx });
    }
    let lumen = fill_contour(&entry.lumen_contour, ny, nx);
    let wall = fill_contour(&entry.wall_contour, ny, nx);
    if lumen.iter().zip(&wall).any(|(&l, &w)| l && !w) {
        return Err(LabelError::LumenOutsideWall { side, slice });
    }
    let ring = match entry.status {
        SliceStatus::Normal => NORMAL_WALL,
        SliceStatus::Atherosclerotic => DISEASED_WALL,
    };
    let classes = lumen
        .iter()
        .zip(&wall)
        .map(|(&l, &w)| if l { LUMEN } else if w { ring } else { BACKGROUND })
        .collect();
    Ok(RasterizedSlice {
        slice_index: slice,
        side,
        status: entry.status,
        ny,
        nx,
        classes,
    })
}

/// Traces the pixel-edge boundary of the 4-connected region containing the
/// top-most, then left-most, set pixel. Vertices sit on pixel corners
/// (half-integer coordinates), so [`fill_contour`] of the result reproduces a
/// hole-free region exactly. Returns `None` for an empty mask.
pub fn trace_contour(mask: &[bool], ny: usize, nx: usize) -> Option<Contour> {
    assert_eq!(mask.len(), ny * nx);
    let start = mask.iter().position(|&m| m)?;
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && mask[y as usize * nx + x as usize];
    let (sx, sy) = ((start % nx) as i64, (start / nx) as i64);
    // walk corners with the region on the right (y grows downwards)
    let start_corner = (sx, sy);
    let start_dir = (1i64, 0i64);
    let (mut c, mut d) = (start_corner, start_dir);
    let mut verts = Vec::new();
    loop {
        let next = (c.0 + d.0, c.1 + d.1);
        let right = (-d.1, d.0);
        let left = (d.1, -d.0);
        // pixel index ahead on either side of the corner `next`
        let ahead = |s: (i64, i64)| (next.0 + (d.0 + s.0 - 1) / 2, next.1 + (d.1 + s.1 - 1) / 2);
        let (ar, al) = (ahead(right), ahead(left));
        let nd = if !inside(ar.0, ar.1) {
            right
        } else if inside(al.0, al.1) {
            left
        } else {
            d
        };
        if nd != d {
            verts.push(next);
        }
        c = next;
        d = nd;
        if c == start_corner && d == start_dir {
            break;
        }
    }
    // the start corner is always a turn (nothing above or left of it), so it
    // is already in `verts`
    Some(Contour(verts.into_iter().map(|(x, y)| Point2::new(x as f64 - 0.5, y as f64 - 0.5)).collect()))
}

/// Nearest annotated slice for every `z` in `[lo, hi]`; ties go to the lower index.
fn nearest_slices(annotated: &[usize]) -> Vec<(usize, usize)> {
    let (lo, hi) = (annotated[0], *annotated.last().unwrap());
    let mut out = Vec::with_capacity(hi - lo + 1);
    let mut k = 0;
    for z in lo..=hi {
        while k + 1 < annotated.len() && annotated[k + 1] <= z {
            k += 1;
        }
        let below = annotated[k];
        let pick = match annotated.get(k + 1) {
            Some(&above) if above - z < z - below => k + 1,
            _ => k,
        };
        out.push((z, pick));
    }
    out
}

/// Builds a 3D label volume from sparse annotations. For each annotated side,
/// every slice between its first and last annotated slice copies the
/// rasterization of the nearest annotated slice on that side's half; every
/// other voxel of the side is `IGNORE`.
pub fn interpolate_labels(ann: &SparseAnnotationSet, shape: Shape3, plane: SideSplitPlane) -> Result<LabelVolume, LabelError> {
    if ann.is_empty() {
        return Err(LabelError::EmptyAnnotationSet);
    }
    SideSplitPlane::new(plane.index(), shape.x)?;
    let mut grid = Grid3::filled(shape, IGNORE);
    let mut ranges = SideRanges::default();
    for side in Side::BOTH {
        let mut entries: Vec<&AnnotationEntry> = ann.entries_for(side).collect();
        if entries.is_empty() {
            continue;
        }
        entries.sort_by_key(|e| e.slice_index);
        let (x0, x1) = plane.x_range(side, shape.x);
        let mut rasters = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.slice_index >= shape.z {
                return Err(LabelError::OutOfBounds {
                    side,
                    slice: e.slice_index,
                    ny: shape.y,
                    nx: shape.x,
                });
            }
            let r = rasterize_slice(e, shape.y, shape.x)?;
            let crosses = r
                .classes
                .chunks_exact(shape.x)
                .any(|row| row.iter().enumerate().any(|(x, &c)| c != BACKGROUND && !(x0..x1).contains(&x)));
            if crosses {
                return Err(LabelError::ContourCrossesSplit { side, slice: e.slice_index });
            }
            rasters.push(r);
        }
        let annotated: Vec<usize> = entries.iter().map(|e| e.slice_index).collect();
        for (z, k) in nearest_slices(&annotated) {
            let src = &rasters[k].classes;
            let dst = grid.plane_mut(z);
            for (drow, srow) in dst.chunks_exact_mut(shape.x).zip(src.chunks_exact(shape.x)) {
                drow[x0..x1].copy_from_slice(&srow[x0..x1]);
            }
        }
        ranges.set(
            side,
            Some(ZRange {
                lo: annotated[0],
                hi: *annotated.last().unwrap(),
            }),
        );
    }
    Ok(LabelVolume::new(grid, ranges)?)
}

/// Within each side's annotated range the whole side region of every slice is
/// taken from `interpolated` (background included); elsewhere `pseudo` is kept.
pub fn correct_pseudo(pseudo: &LabelVolume, interpolated: &LabelVolume, plane: SideSplitPlane) -> Result<LabelVolume, LabelError> {
    let shape = pseudo.shape();
    if interpolated.shape() != shape {
        return Err(LabelError::ShapeMismatch(shape, interpolated.shape()));
    }
    let ranges = interpolated.ranges();
    if ranges.is_empty() {
        return Err(LabelError::MissingRange);
    }
    if pseudo.data().contains(&IGNORE) {
        return Err(LabelError::PseudoHasIgnore);
    }
    SideSplitPlane::new(plane.index(), shape.x)?;
    let mut out = pseudo.grid().clone();
    for side in Side::BOTH {
        let Some(range) = ranges.get(side) else { continue };
        let (x0, x1) = plane.x_range(side, shape.x);
        for z in range.lo..=range.hi {
            let src = interpolated.grid().plane(z);
            let dst = out.plane_mut(z);
            for (drow, srow) in dst.chunks_exact_mut(shape.x).zip(src.chunks_exact(shape.x)) {
                drow[x0..x1].copy_from_slice(&srow[x0..x1]);
            }
        }
    }
    Ok(LabelVolume::new(out, ranges)?)
}
