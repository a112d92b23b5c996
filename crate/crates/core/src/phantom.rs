//! Synthetic bilateral carotid phantoms.
//!
//! Each side holds one tube running along `z`. Cross-sections are star-convex
//! around the centerline: a circular lumen inside an outer wall boundary whose
//! radius varies with angle where a plaque thickens it. On slices crossing a
//! plaque the whole wall ring is labelled diseased, which is exactly what a
//! per-slice status annotation can express.

use crate::dataio::{AnnotationEntry, SliceStatus, SparseAnnotationSet};
use crate::labelcraft::{fill_contour, trace_contour};
use crate::volume::{
    Grid3, ImageVolume, LabelVolume, Shape3, Side, SideRanges, SideSplitPlane, Spacing, VolumeError, BACKGROUND,
    DISEASED_WALL, LUMEN, NORMAL_WALL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("vessel on side {side} reaches x = {x} across the split at {split} or outside the volume")]
    GeometryOverflow { side: Side, x: isize, split: usize },
    #[error("side {side} has {found} vessel slices; at least 2 are needed")]
    TooFewVesselSlices { side: Side, found: usize },
    #[error("slice {slice} on side {side} has vessel wall but no lumen")]
    MissingLumen { side: Side, slice: usize },
    #[error("contour traced on side {side}, slice {slice} does not rasterize back to its mask")]
    TraceMismatch { side: Side, slice: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Mean intensity per tissue before noise; background darkest, lumen dark
/// (black-blood), wall mid grey, diseased wall bright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub background: f64,
    pub lumen: f64,
    pub wall: f64,
    pub plaque: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        Self {
            background: 0.0,
            lumen: 0.25,
            wall: 0.6,
            plaque: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: Shape3,
    pub spacing: Spacing,
    /// Peak in-plane excursion of each centerline, in voxels.
    pub centerline_amplitude: f64,
    /// Centerline oscillation cycles over the z extent.
    pub centerline_frequency: f64,
    pub lumen_radius: (f64, f64),
    pub wall_thickness: (f64, f64),
    /// Plaques per side.
    pub plaque_count: usize,
    pub plaque_arc_deg: f64,
    /// Extra wall thickness at the plaque apex, in voxels.
    pub plaque_boost: f64,
    /// Slice span of each plaque (inclusive bounds).
    pub plaque_span: (usize, usize),
    /// Plaque centres fall within this fraction of the z extent either side
    /// of the middle slice, where the bulb and the annotated band are. `0.5`
    /// allows any position.
    pub plaque_center_spread: f64,
    pub intensities: TissueIntensities,
    pub noise_sigma: f64,
    pub annotated_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: Shape3::new(64, 128, 128),
            spacing: Spacing([0.6; 3]),
            centerline_amplitude: 6.0,
            centerline_frequency: 0.75,
            lumen_radius: (3.0, 5.5),
            wall_thickness: (1.5, 2.5),
            plaque_count: 1,
            plaque_arc_deg: 150.0,
            plaque_boost: 2.0,
            plaque_span: (8, 16),
            plaque_center_spread: 0.15,
            intensities: TissueIntensities::default(),
            noise_sigma: 0.06,
            annotated_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidConfig(m.to_string()));
        if self.shape.is_empty() || self.shape.x < 4 {
            return bad("volume too small");
        }
        let (r0, r1) = self.lumen_radius;
        let (t0, t1) = self.wall_thickness;
        if !(r0 > 0.0 && r1 >= r0 && t0 > 0.0 && t1 >= t0) {
            return bad("radii and wall thickness must be positive with min <= max");
        }
        if self.plaque_boost < 0.0 || !(0.0..=360.0).contains(&self.plaque_arc_deg) {
            return bad("plaque boost must be >= 0 and arc within [0, 360]");
        }
        if self.plaque_span.0 == 0 || self.plaque_span.1 < self.plaque_span.0 {
            return bad("plaque span must be positive with min <= max");
        }
        if !(0.0..=0.5).contains(&self.plaque_center_spread) {
            return bad("plaque centre spread must lie in [0, 0.5]");
        }
        if !(self.annotated_fraction > 0.0 && self.annotated_fraction <= 1.0) {
            return bad("annotated fraction must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0) || self.centerline_amplitude < 0.0 {
            return bad("noise and amplitude must be non-negative");
        }
        Spacing::new(self.spacing.0[0], self.spacing.0[1], self.spacing.0[2])?;
        Ok(())
    }

    pub fn plane(&self) -> SideSplitPlane {
        SideSplitPlane::midline(self.shape.x).expect("validated width")
    }
}

#[derive(Debug, Clone)]
struct Plaque {
    z0: usize,
    z1: usize,
    angle: f64,
}

#[derive(Debug, Clone)]
struct Vessel {
    side: Side,
    cx0: f64,
    cy0: f64,
    phase_x: f64,
    phase_y: f64,
    phase_r: f64,
    phase_t: f64,
    plaques: Vec<Plaque>,
}

impl Vessel {
    fn random(side: Side, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.shape;
        let half = s.x as f64 / 2.0;
        let cx0 = match side {
            Side::Left => half / 2.0,
            Side::Right => half + half / 2.0,
        } + rng.random_range(-1.0..=1.0) * half / 16.0;
        let cy0 = s.y as f64 / 2.0 + rng.random_range(-1.0..=1.0) * s.y as f64 / 10.0;
        let mut plaques = Vec::new();
        for _ in 0..cfg.plaque_count {
            let len = rng.random_range(cfg.plaque_span.0..=cfg.plaque_span.1).min(s.z);
            let centre = s.z as f64 / 2.0 + rng.random_range(-1.0..=1.0) * cfg.plaque_center_spread * s.z as f64;
            let z0 = ((centre - len as f64 / 2.0).round().max(0.0) as usize).min(s.z - len);
            plaques.push(Plaque {
                z0,
                z1: z0 + len - 1,
                angle: rng.random_range(0.0..TAU),
            });
        }
        Self {
            side,
            cx0,
            cy0,
            phase_x: rng.random_range(0.0..TAU),
            phase_y: rng.random_range(0.0..TAU),
            phase_r: rng.random_range(0.0..TAU),
            phase_t: rng.random_range(0.0..TAU),
            plaques,
        }
    }

    fn center(&self, z: usize, cfg: &PhantomConfig) -> (f64, f64) {
        let w = TAU * cfg.centerline_frequency * z as f64 / cfg.shape.z as f64;
        let a = cfg.centerline_amplitude;
        (self.cx0 + a * (w + self.phase_x).sin(), self.cy0 + a * (w + self.phase_y).cos())
    }

    fn lerp_periodic(range: (f64, f64), z: usize, nz: usize, phase: f64) -> f64 {
        let t = 0.5 + 0.5 * (TAU * z as f64 / nz as f64 + phase).sin();
        range.0 + (range.1 - range.0) * t
    }

    fn diseased(&self, z: usize) -> Option<&Plaque> {
        self.plaques.iter().find(|p| p.z0 <= z && z <= p.z1)
    }

    /// Lumen radius and outer-wall radius as a function of angle on slice `z`.
    fn radii(&self, z: usize, cfg: &PhantomConfig) -> (f64, impl Fn(f64) -> f64 + '_) {
        let r = Self::lerp_periodic(cfg.lumen_radius, z, cfg.shape.z, self.phase_r);
        let t = Self::lerp_periodic(cfg.wall_thickness, z, cfg.shape.z, self.phase_t);
        let plaque = self.diseased(z).map(|p| p.angle);
        let half_arc = cfg.plaque_arc_deg.to_radians() / 2.0;
        let boost = cfg.plaque_boost;
        let outer = move |theta: f64| {
            let bump = match plaque {
                Some(a) if half_arc > 0.0 => {
                    let d = (theta - a + PI).rem_euclid(TAU) - PI;
                    if d.abs() < half_arc {
                        0.5 * (1.0 + (PI * d / half_arc).cos())
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            };
            r + t + boost * bump
        };
        (r, outer)
    }

    fn max_extent(&self, cfg: &PhantomConfig) -> f64 {
        cfg.centerline_amplitude + cfg.lumen_radius.1 + cfg.wall_thickness.1 + cfg.plaque_boost + 1.0
    }
}

/// Image and dense labels of one phantom.
pub fn generate_phantom(cfg: &PhantomConfig, case_id: &str) -> Result<(ImageVolume, LabelVolume), PhantomError> {
    cfg.validate()?;
    let s = cfg.shape;
    let plane = cfg.plane();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vessels: Vec<Vessel> = Side::BOTH.iter().map(|&side| Vessel::random(side, cfg, &mut rng)).collect();

    let mut labels = Grid3::filled(s, BACKGROUND);
    for v in &vessels {
        let reach = v.max_extent(cfg).ceil() as isize;
        for z in 0..s.z {
            let (cx, cy) = v.center(z, cfg);
            let (r, outer) = v.radii(z, cfg);
            let ring = if v.diseased(z).is_some() { DISEASED_WALL } else { NORMAL_WALL };
            let (xc, yc) = (cx.round() as isize, cy.round() as isize);
            for y in yc - reach..=yc + reach {
                for x in xc - reach..=xc + reach {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let rho = dx.hypot(dy);
                    let class = if rho <= r {
                        LUMEN
                    } else if rho <= outer(dy.atan2(dx)) {
                        ring
                    } else {
                        continue;
                    };
                    let (x0, x1) = plane.x_range(v.side, s.x);
                    if x < x0 as isize || x >= x1 as isize || y < 0 || y >= s.y as isize {
                        return Err(PhantomError::GeometryOverflow {
                            side: v.side,
                            x,
                            split: plane.index(),
                        });
                    }
                    labels.set(z, y as usize, x as usize, class);
                }
            }
        }
    }

    let it = cfg.intensities;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| PhantomError::InvalidConfig(e.to_string()))?;
    let image = labels.map(|c| match c {
        LUMEN => it.lumen,
        NORMAL_WALL => it.wall,
        DISEASED_WALL => it.plaque,
        _ => it.background,
    });
    let data: Vec<f32> = image.data().iter().map(|&m| (m + noise.sample(&mut rng)) as f32).collect();
    let image = ImageVolume::new(case_id, Grid3::from_vec(s, data)?, cfg.spacing)?;
    Ok((image, LabelVolume::new(labels, SideRanges::default())?))
}

fn side_mask(labels: &LabelVolume, z: usize, x0: usize, x1: usize, pred: impl Fn(u8) -> bool) -> Vec<bool> {
    let nx = labels.shape().x;
    labels
        .grid()
        .plane(z)
        .iter()
        .enumerate()
        .map(|(i, &c)| (x0..x1).contains(&(i % nx)) && pred(c))
        .collect()
}

/// Number of slices annotated out of a vessel spanning `extent` slices.
pub fn annotated_slice_count(fraction: f64, extent: usize) -> usize {
    ((fraction * extent as f64 - 1e-9).ceil() as usize).clamp(1, extent)
}

/// Annotates a contiguous band of slices per side, placed around the vessel
/// midpoint with a seeded jitter, by tracing lumen and outer-wall boundaries
/// of the dense labels.
pub fn sparsify_annotations(
    dense: &LabelVolume,
    plane: SideSplitPlane,
    fraction: f64,
    seed: u64,
    case_id: &str,
) -> Result<SparseAnnotationSet, PhantomError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PhantomError::InvalidConfig(format!("annotated fraction {fraction} outside (0, 1]")));
    }
    let s = dense.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for side in Side::BOTH {
        let (x0, x1) = plane.x_range(side, s.x);
        let vessel: Vec<usize> = (0..s.z)
            .filter(|&z| {
                let p = dense.grid().plane(z);
                p.chunks_exact(s.x).any(|row| row[x0..x1].iter().any(|&c| (LUMEN..=DISEASED_WALL).contains(&c)))
            })
            .collect();
        if vessel.len() < 2 {
            return Err(PhantomError::TooFewVesselSlices { side, found: vessel.len() });
        }
        let (zmin, zmax) = (vessel[0], *vessel.last().unwrap());
        let extent = zmax - zmin + 1;
        let n = annotated_slice_count(fraction, extent);
        let slack = extent - n;
        let jitter = (slack / 4) as i64;
        let offset = if jitter > 0 { rng.random_range(-jitter..=jitter) as isize } else { 0 };
        let start = (zmin as isize + (slack / 2) as isize + offset).clamp(zmin as isize, (zmin + slack) as isize) as usize;
        for z in start..start + n {
            let lumen = side_mask(dense, z, x0, x1, |c| c == LUMEN);
            let outer = side_mask(dense, z, x0, x1, |c| (LUMEN..=DISEASED_WALL).contains(&c));
            if !outer.iter().any(|&m| m) {
                continue;
            }
            let lumen_c = trace_contour(&lumen, s.y, s.x).ok_or(PhantomError::MissingLumen { side, slice: z })?;
            let wall_c = trace_contour(&outer, s.y, s.x).expect("non-empty");
            if fill_contour(&lumen_c, s.y, s.x) != lumen || fill_contour(&wall_c, s.y, s.x) != outer {
                return Err(PhantomError::TraceMismatch { side, slice: z });
            }
            let diseased = side_mask(dense, z, x0, x1, |c| c == DISEASED_WALL).iter().any(|&m| m);
            entries.push(AnnotationEntry {
                side,
                slice_index: z,
                status: if diseased { SliceStatus::Atherosclerotic } else { SliceStatus::Normal },
                lumen_contour: lumen_c,
                wall_contour: wall_c,
            });
        }
    }
    Ok(SparseAnnotationSet {
        case_id: case_id.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelcraft::{interpolate_labels, rasterize_slice};
    use crate::volume::IGNORE;

    fn small() -> PhantomConfig {
        PhantomConfig {
            shape: Shape3::new(24, 64, 64),
            centerline_amplitude: 3.0,
            plaque_span: (4, 8),
            seed: 11,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, la) = generate_phantom(&small(), "p").unwrap();
        let (b, lb) = generate_phantom(&small(), "p").unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(la, lb);
        let other = PhantomConfig { seed: 12, ..small() };
        assert_ne!(generate_phantom(&other, "p").unwrap().1, la);
    }

    #[test]
    fn plaques_stay_near_the_middle() {
        let plane = small().plane();
        for seed in 0..20 {
            let cfg = PhantomConfig { seed, plaque_center_spread: 0.1, ..small() };
            let (_, l) = generate_phantom(&cfg, "p").unwrap();
            for side in Side::BOTH {
                let (x0, x1) = plane.x_range(side, 64);
                let zs: Vec<usize> = (0..24)
                    .filter(|&z| l.grid().plane(z).chunks_exact(64).any(|r| r[x0..x1].contains(&DISEASED_WALL)))
                    .collect();
                let (lo, hi) = (zs[0], *zs.last().unwrap());
                assert_eq!(hi - lo + 1, zs.len(), "one contiguous span");
                assert!((4..=8).contains(&zs.len()));
                // centre 12 +- 2.4, plus half a slice of rounding
                let mid = (lo + hi) as f64 / 2.0;
                assert!((mid - 12.0).abs() <= 2.4 + 1.0, "seed {seed}: span {lo}..={hi}");
            }
        }
    }

    #[test]
    fn no_plaque_no_diseased_wall() {
        let cfg = PhantomConfig { plaque_count: 0, ..small() };
        let (_, l) = generate_phantom(&cfg, "p").unwrap();
        assert!(!l.data().contains(&DISEASED_WALL));
        assert!(l.data().contains(&LUMEN));
    }

    #[test]
    fn plaques_present_by_default() {
        let (_, l) = generate_phantom(&small(), "p").unwrap();
        assert!(l.data().contains(&DISEASED_WALL));
        assert!(l.data().contains(&NORMAL_WALL));
    }

    #[test]
    fn wall_encloses_lumen() {
        for seed in 0..5 {
            let cfg = PhantomConfig { seed, ..small() };
            let (_, l) = generate_phantom(&cfg, "p").unwrap();
            let s = l.shape();
            let plane = cfg.plane();
            for z in 0..s.z {
                for side in Side::BOTH {
                    let (x0, x1) = plane.x_range(side, s.x);
                    let has = |c: u8| l.grid().plane(z).chunks_exact(s.x).any(|r| r[x0..x1].contains(&c));
                    if has(LUMEN) {
                        assert!(has(NORMAL_WALL) || has(DISEASED_WALL));
                    }
                }
            }
        }
    }

    #[test]
    fn overflow_detected() {
        let cfg = PhantomConfig {
            centerline_amplitude: 30.0,
            ..small()
        };
        assert!(matches!(generate_phantom(&cfg, "p"), Err(PhantomError::GeometryOverflow { .. })));
    }

    #[test]
    fn invalid_configs() {
        assert!(PhantomConfig { lumen_radius: (0.0, 2.0), ..small() }.validate().is_err());
        assert!(PhantomConfig { annotated_fraction: 0.0, ..small() }.validate().is_err());
        assert!(PhantomConfig { annotated_fraction: 1.5, ..small() }.validate().is_err());
    }

    #[test]
    fn annotated_count_arithmetic() {
        assert_eq!(annotated_slice_count(0.2, 50), 10);
        assert_eq!(annotated_slice_count(0.2, 64), 13);
        assert_eq!(annotated_slice_count(1.0, 64), 64);
        assert_eq!(annotated_slice_count(0.01, 5), 1);
    }

    #[test]
    fn fifty_slice_vessel_gets_ten_entries_per_side() {
        let cfg = PhantomConfig {
            shape: Shape3::new(50, 64, 64),
            centerline_amplitude: 3.0,
            plaque_span: (4, 8),
            seed: 5,
            ..PhantomConfig::default()
        };
        let (_, l) = generate_phantom(&cfg, "p").unwrap();
        let ann = sparsify_annotations(&l, cfg.plane(), 0.2, 9, "p").unwrap();
        for side in Side::BOTH {
            let zs: Vec<usize> = ann.entries_for(side).map(|e| e.slice_index).collect();
            assert_eq!(zs.len(), 10);
            assert!(zs.windows(2).all(|w| w[1] == w[0] + 1), "band must be contiguous");
        }
    }

    #[test]
    fn full_fraction_reproduces_dense_labels() {
        let cfg = small();
        let (_, dense) = generate_phantom(&cfg, "p").unwrap();
        let plane = cfg.plane();
        let ann = sparsify_annotations(&dense, plane, 1.0, 0, "p").unwrap().validated().unwrap();
        assert_eq!(ann.entries.len(), 2 * 24);
        let interp = interpolate_labels(&ann, dense.shape(), plane).unwrap();
        assert!(!interp.data().contains(&IGNORE));
        assert_eq!(interp.data(), dense.data());
    }

    #[test]
    fn status_matches_dense_truth() {
        let cfg = small();
        let (_, dense) = generate_phantom(&cfg, "p").unwrap();
        let ann = sparsify_annotations(&dense, cfg.plane(), 1.0, 0, "p").unwrap();
        let s = dense.shape();
        for e in &ann.entries {
            let (x0, x1) = cfg.plane().x_range(e.side, s.x);
            let diseased = dense.grid().plane(e.slice_index).chunks_exact(s.x).any(|r| r[x0..x1].contains(&DISEASED_WALL));
            assert_eq!(e.status == SliceStatus::Atherosclerotic, diseased);
            let r = rasterize_slice(e, s.y, s.x).unwrap();
            assert!(r.classes.chunks_exact(s.x).all(|row| row[..x0].iter().chain(&row[x1..]).all(|&c| c == BACKGROUND)));
        }
    }

    #[test]
    fn too_few_vessel_slices() {
        let mut g = Grid3::filled(Shape3::new(3, 8, 8), BACKGROUND);
        g.set(1, 3, 1, LUMEN);
        let l = LabelVolume::new(g, SideRanges::default()).unwrap();
        let plane = SideSplitPlane::midline(8).unwrap();
        assert!(matches!(
            sparsify_annotations(&l, plane, 0.5, 0, "p"),
            Err(PhantomError::TooFewVesselSlices { side: Side::Left, found: 1 })
        ));
    }
}
