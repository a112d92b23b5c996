//! Patch augmentation. All geometric transforms are folded into one
//! coordinate map per call, so labels are resampled exactly once (nearest
//! neighbour) and images once (trilinear).

use crate::SegNetError;
use cosmosseg_core::volume::IGNORE;
use cosmosseg_core::{Grid3, Shape3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropAug {
    pub enabled: bool,
    pub p: f64,
    /// Maximum integer translation per axis `(z, y, x)`.
    pub max_shift: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationAug {
    pub enabled: bool,
    pub p: f64,
    /// Each axis draws an angle in `[-max_degrees, max_degrees]`.
    pub max_degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingAug {
    pub enabled: bool,
    pub p: f64,
    pub range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipAug {
    pub enabled: bool,
    /// Per-axis flip probability.
    pub p: f64,
    pub axes: [bool; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseAug {
    pub enabled: bool,
    pub p: f64,
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticAug {
    pub enabled: bool,
    pub p: f64,
    pub alpha: (f64, f64),
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub crop: CropAug,
    pub rotation: RotationAug,
    pub scaling: ScalingAug,
    pub flip: FlipAug,
    pub noise: NoiseAug,
    pub elastic: ElasticAug,
}

impl Default for CropAug {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.5,
            max_shift: [4, 8, 8],
        }
    }
}

impl Default for RotationAug {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.2,
            max_degrees: 30.0,
        }
    }
}

impl Default for ScalingAug {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.2,
            range: (0.85, 1.15),
        }
    }
}

impl Default for FlipAug {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.5,
            axes: [true; 3],
        }
    }
}

impl Default for NoiseAug {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.1,
            sigma: (0.0, 0.1),
        }
    }
}

impl Default for ElasticAug {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.2,
            alpha: (0.0, 200.0),
            sigma: (9.0, 13.0),
        }
    }
}

impl AugmentationConfig {
    /// Every transform switched off: [`augment`] is then the identity.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.crop.enabled = false;
        c.rotation.enabled = false;
        c.scaling.enabled = false;
        c.flip.enabled = false;
        c.noise.enabled = false;
        c.elastic.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<(), SegNetError> {
        let bad = |m: &str| Err(SegNetError::InvalidConfig(format!("augmentation: {m}")));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let enabled_p = [
            (self.crop.enabled, self.crop.p),
            (self.rotation.enabled, self.rotation.p),
            (self.scaling.enabled, self.scaling.p),
            (self.flip.enabled, self.flip.p),
            (self.noise.enabled, self.noise.p),
            (self.elastic.enabled, self.elastic.p),
        ];
        if enabled_p.iter().any(|&(e, p)| e && !prob(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.rotation.enabled && !(self.rotation.max_degrees.is_finite() && self.rotation.max_degrees >= 0.0) {
            return bad("rotation range must be a non-negative angle");
        }
        if self.scaling.enabled && !(range(self.scaling.range) && self.scaling.range.0 > 0.0) {
            return bad("scaling range must be positive and ordered");
        }
        if self.noise.enabled && !(range(self.noise.sigma) && self.noise.sigma.0 >= 0.0) {
            return bad("noise sigma range must be non-negative and ordered");
        }
        if self.elastic.enabled && !(range(self.elastic.alpha) && range(self.elastic.sigma) && self.elastic.alpha.0 >= 0.0 && self.elastic.sigma.0 > 0.0) {
            return bad("elastic alpha/sigma ranges must be ordered, alpha >= 0, sigma > 0");
        }
        Ok(())
    }
}

/// Reverses a grid along `axis` (0 = z, 1 = y, 2 = x).
pub fn flip_axis<T: Copy>(grid: &Grid3<T>, axis: usize) -> Grid3<T> {
    let s = grid.shape();
    Grid3::from_fn(s, |z, y, x| match axis {
        0 => grid.get(s.z - 1 - z, y, x),
        1 => grid.get(z, s.y - 1 - y, x),
        _ => grid.get(z, y, s.x - 1 - x),
    })
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let (i, j) = [(1, 2), (0, 2), (0, 1)][axis];
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[j][j] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m
}

/// Normalized Gaussian blur along one axis with edge clamping.
fn blur_axis(data: &mut [f32], s: Shape3, axis: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let (len, stride) = match axis {
        0 => (s.z, s.plane_len()),
        1 => (s.y, s.x),
        _ => (s.x, 1),
    };
    let mut line = vec![0.0f32; len];
    for base in 0..s.len() {
        let pos = (base / stride) % len;
        if pos != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[base + i * stride];
        }
        for i in 0..len {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = (i as isize + k as isize - r).clamp(0, len as isize - 1) as usize;
                acc += w * line[j];
            }
            data[base + i * stride] = acc / norm;
        }
    }
}

/// One sampled geometric transform for a patch of a fixed shape.
#[derive(Debug, Clone)]
pub struct SpatialTransform {
    shape: Shape3,
    /// Maps output offsets from the patch centre to source offsets.
    matrix: Option<Mat3>,
    shift: [isize; 3],
    /// Per-voxel `(dz, dy, dx)` displacement.
    displacement: Option<Vec<[f32; 3]>>,
    flips: [bool; 3],
}

impl SpatialTransform {
    pub fn identity(shape: Shape3) -> Self {
        Self {
            shape,
            matrix: None,
            shift: [0; 3],
            displacement: None,
            flips: [false; 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, shape: Shape3, rng: &mut R) -> Self {
        let mut t = Self::identity(shape);
        if cfg.crop.enabled && rng.random_bool(cfg.crop.p) {
            for a in 0..3 {
                let m = cfg.crop.max_shift[a] as i64;
                t.shift[a] = rng.random_range(-m..=m) as isize;
            }
        }
        let mut m: Option<Mat3> = None;
        if cfg.rotation.enabled && rng.random_bool(cfg.rotation.p) {
            let lim = cfg.rotation.max_degrees.to_radians();
            let mut r = rotation(0, rng.random_range(-lim..=lim));
            r = matmul(&r, &rotation(1, rng.random_range(-lim..=lim)));
            r = matmul(&r, &rotation(2, rng.random_range(-lim..=lim)));
            m = Some(r);
        }
        if cfg.scaling.enabled && rng.random_bool(cfg.scaling.p) {
            let (lo, hi) = cfg.scaling.range;
            let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let base = m.unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
            m = Some(base.map(|row| row.map(|v| v * f)));
        }
        t.matrix = m;
        if cfg.elastic.enabled && rng.random_bool(cfg.elastic.p) {
            let (alo, ahi) = cfg.elastic.alpha;
            let (slo, shi) = cfg.elastic.sigma;
            let alpha = if ahi > alo { rng.random_range(alo..ahi) } else { alo };
            let sigma = if shi > slo { rng.random_range(slo..shi) } else { slo };
            let mut disp = vec![[0.0f32; 3]; shape.len()];
            for a in 0..3 {
                let mut f: Vec<f32> = (0..shape.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                for axis in 0..3 {
                    blur_axis(&mut f, shape, axis, sigma);
                }
                for (d, v) in disp.iter_mut().zip(&f) {
                    d[a] = v * alpha as f32;
                }
            }
            t.displacement = Some(disp);
        }
        if cfg.flip.enabled {
            for a in 0..3 {
                t.flips[a] = cfg.flip.axes[a] && rng.random_bool(cfg.flip.p);
            }
        }
        t
    }

    pub fn is_identity(&self) -> bool {
        self.matrix.is_none() && self.displacement.is_none() && self.shift == [0; 3] && self.flips == [false; 3]
    }

    /// True when the map sends voxel centres to voxel centres.
    fn is_integral(&self) -> bool {
        self.matrix.is_none() && self.displacement.is_none()
    }

    fn source(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let s = self.shape;
        let p = [
            if self.flips[0] { s.z - 1 - z } else { z },
            if self.flips[1] { s.y - 1 - y } else { y },
            if self.flips[2] { s.x - 1 - x } else { x },
        ];
        let c = [(s.z as f64 - 1.0) / 2.0, (s.y as f64 - 1.0) / 2.0, (s.x as f64 - 1.0) / 2.0];
        let mut q = [p[0] as f64, p[1] as f64, p[2] as f64];
        if let Some(m) = &self.matrix {
            let d = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
            for i in 0..3 {
                q[i] = c[i] + m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] * d[2];
            }
        }
        if let Some(disp) = &self.displacement {
            let d = disp[s.index(p[0], p[1], p[2])];
            for i in 0..3 {
                q[i] += d[i] as f64;
            }
        }
        for i in 0..3 {
            q[i] += self.shift[i] as f64;
        }
        q
    }

    /// Nearest-neighbour resampling; points outside the source take `fill`.
    pub fn apply_nearest<T: Copy>(&self, grid: &Grid3<T>, fill: T) -> Grid3<T> {
        assert_eq!(grid.shape(), self.shape);
        if self.is_identity() {
            return grid.clone();
        }
        let s = self.shape;
        let dims = [s.z as f64, s.y as f64, s.x as f64];
        Grid3::from_fn(s, |z, y, x| {
            let q = self.source(z, y, x);
            let r = q.map(f64::round);
            if (0..3).any(|i| r[i] < 0.0 || r[i] >= dims[i]) {
                fill
            } else {
                grid.get(r[0] as usize, r[1] as usize, r[2] as usize)
            }
        })
    }

    /// Trilinear resampling with zero outside the source. Integral maps
    /// (flips and shifts only) copy values exactly.
    pub fn apply_linear(&self, grid: &Grid3<f32>) -> Grid3<f32> {
        if self.is_integral() {
            return self.apply_nearest(grid, 0.0);
        }
        let s = self.shape;
        let dims = [s.z as f64, s.y as f64, s.x as f64];
        Grid3::from_fn(s, |z, y, x| {
            let q = self.source(z, y, x);
            if (0..3).any(|i| q[i] < -0.5 || q[i] >= dims[i] - 0.5) {
                return 0.0;
            }
            let q = [0, 1, 2].map(|i| q[i].clamp(0.0, dims[i] - 1.0));
            let b = q.map(|v| v.floor() as usize);
            let f = [0, 1, 2].map(|i| (q[i] - b[i] as f64) as f32);
            let n = [0, 1, 2].map(|i| (b[i] + 1).min(dims[i] as usize - 1));
            let g = |z, y, x| grid.get(z, y, x);
            let c00 = g(b[0], b[1], b[2]) * (1.0 - f[2]) + g(b[0], b[1], n[2]) * f[2];
            let c01 = g(b[0], n[1], b[2]) * (1.0 - f[2]) + g(b[0], n[1], n[2]) * f[2];
            let c10 = g(n[0], b[1], b[2]) * (1.0 - f[2]) + g(n[0], b[1], n[2]) * f[2];
            let c11 = g(n[0], n[1], b[2]) * (1.0 - f[2]) + g(n[0], n[1], n[2]) * f[2];
            let c0 = c00 * (1.0 - f[1]) + c01 * f[1];
            let c1 = c10 * (1.0 - f[1]) + c11 * f[1];
            c0 * (1.0 - f[0]) + c1 * f[0]
        })
    }
}

/// Applies one random geometric transform to both patches, then intensity
/// noise to the image. Labels falling outside the source become `IGNORE`.
pub fn augment<R: Rng + ?Sized>(image: &Grid3<f32>, labels: &Grid3<u8>, cfg: &AugmentationConfig, rng: &mut R) -> (Grid3<f32>, Grid3<u8>) {
    assert_eq!(image.shape(), labels.shape(), "augment needs shape-matched patches");
    let t = SpatialTransform::sample(cfg, image.shape(), rng);
    let mut img = t.apply_linear(image);
    let lab = t.apply_nearest(labels, IGNORE);
    if cfg.noise.enabled && rng.random_bool(cfg.noise.p) {
        let (lo, hi) = cfg.noise.sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if sigma > 0.0 {
            let n = Normal::new(0.0f32, sigma as f32).expect("valid sigma");
            img.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
        }
    }
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(rng: &mut ChaCha8Rng) -> (Grid3<f32>, Grid3<u8>) {
        let s = Shape3::new(6, 10, 12);
        let img = Grid3::from_fn(s, |_, _, _| rng.random_range(-1.0..1.0));
        let lab = Grid3::from_fn(s, |_, _, _| rng.random_range(0..4u8));
        (img, lab)
    }

    #[test]
    fn disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, lab) = patch(&mut rng);
        let (a, b) = augment(&img, &lab, &AugmentationConfig::disabled(), &mut rng);
        assert_eq!((a, b), (img, lab));
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, lab) = patch(&mut rng);
        for axis in 0..3 {
            assert_eq!(flip_axis(&flip_axis(&img, axis), axis), img);
            assert_eq!(flip_axis(&flip_axis(&lab, axis), axis), lab);
            assert_ne!(flip_axis(&lab, axis), lab);
        }
    }

    #[test]
    fn noise_only_leaves_labels_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, lab) = patch(&mut rng);
        let mut cfg = AugmentationConfig::disabled();
        cfg.noise = NoiseAug {
            enabled: true,
            p: 1.0,
            sigma: (0.05, 0.1),
        };
        let (a, b) = augment(&img, &lab, &cfg, &mut rng);
        assert_eq!(b, lab);
        assert_ne!(a, img);
    }

    #[test]
    fn same_rng_state_same_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, lab) = patch(&mut rng);
        let mut cfg = AugmentationConfig::default();
        cfg.rotation.p = 1.0;
        cfg.elastic.p = 1.0;
        cfg.elastic.sigma = (2.0, 3.0);
        let r1 = augment(&img, &lab, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let r2 = augment(&img, &lab, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(r1, r2);
        assert_eq!(r1.0.shape(), img.shape());
    }

    #[test]
    fn labels_never_blended() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape3::new(6, 10, 12);
        // only classes 0 and 3: a blend would create 1 or 2
        let lab = Grid3::from_fn(s, |_, _, _| if rng.random_bool(0.5) { 3u8 } else { 0 });
        let img = lab.map(|v| v as f32);
        let mut cfg = AugmentationConfig::default();
        cfg.rotation.p = 1.0;
        cfg.scaling.p = 1.0;
        for seed in 0..10 {
            let (_, b) = augment(&img, &lab, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(b.data().iter().all(|&v| v == 0 || v == 3 || v == IGNORE));
        }
    }

    #[test]
    fn quarter_turn_in_plane_is_exact_on_square_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape3::new(3, 8, 8);
        let lab = Grid3::from_fn(s, |_, _, _| rng.random_range(0..4u8));
        let mut t = SpatialTransform::identity(s);
        t.matrix = Some(rotation(0, std::f64::consts::FRAC_PI_2));
        let out = t.apply_nearest(&lab, IGNORE);
        // source of (y, x) is (c - (x - c), c + (y - c)) with c = 3.5
        for z in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.get(z, y, x), lab.get(z, 7 - x, y));
                }
            }
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut c = AugmentationConfig::default();
        c.scaling.range = (1.2, 0.9);
        assert!(c.validate().is_err());
        let mut c = AugmentationConfig::default();
        c.elastic.sigma = (0.0, 1.0);
        assert!(c.validate().is_err());
        let mut c = AugmentationConfig::default();
        c.flip.p = 1.5;
        assert!(c.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
        let mut c = AugmentationConfig::disabled();
        c.scaling.range = (1.2, 0.9);
        assert!(c.validate().is_ok());
    }
}
