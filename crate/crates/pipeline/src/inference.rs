//! Sliding-window prediction, pseudo-label generation and per-slice diagnosis.

use crate::PipelineError;
use cosmosseg_core::dataio::SparseAnnotationSet;
use cosmosseg_core::labelcraft::{correct_pseudo, interpolate_labels};
use cosmosseg_core::volume::{DISEASED_WALL, NORMAL_WALL};
use cosmosseg_core::volume::split_sides;
use cosmosseg_core::{Grid3, LabelVolume, Shape3, Side, SideRanges, SideSplitPlane};
use cosmosseg_segnet::{Tensor, UNet3D};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blending {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlidingWindowConfig {
    pub window: Shape3,
    /// Fraction of the window shared by neighbouring windows, per axis.
    pub overlap: [f64; 3],
    pub blending: Blending,
    /// Gaussian sigma as a fraction of the window extent.
    pub sigma_scale: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self::for_patch(Shape3::new(96, 160, 160))
    }
}

impl SlidingWindowConfig {
    pub fn for_patch(window: Shape3) -> Self {
        Self {
            window,
            overlap: [0.5; 3],
            blending: Blending::Gaussian,
            sigma_scale: 0.125,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.window.is_empty() {
            return Err(PipelineError::Config("sliding window has an empty extent".into()));
        }
        if self.overlap.iter().any(|o| !(0.0..1.0).contains(o)) {
            return Err(PipelineError::Config("window overlap must lie in [0, 1)".into()));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(PipelineError::Config("gaussian sigma scale must be positive".into()));
        }
        Ok(())
    }
}

/// Window origins along one axis: a stride of `window * (1 - overlap)`, with
/// the last window moved back to end exactly at the boundary.
pub fn window_starts(extent: usize, window: usize, overlap: f64) -> Result<Vec<usize>, PipelineError> {
    if window == 0 || window > extent {
        return Err(PipelineError::WindowLargerThanPaddedVolume { window, extent });
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - window;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    Ok(starts)
}

fn importance_map(window: Shape3, cfg: &SlidingWindowConfig) -> Vec<f64> {
    if cfg.blending == Blending::Uniform {
        return vec![1.0; window.len()];
    }
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = n as f64 * cfg.sigma_scale;
        (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
    };
    let (gz, gy, gx) = (axis(window.z), axis(window.y), axis(window.x));
    let mut w = Vec::with_capacity(window.len());
    for a in &gz {
        for b in &gy {
            for c in &gx {
                w.push((a * b * c).max(1e-12));
            }
        }
    }
    w
}

/// Window actually used on an axis: the configured extent, or the volume
/// extent rounded up to the network's divisibility when the volume is smaller.
fn effective_window(extent: usize, window: usize, factor: usize) -> usize {
    if extent >= window {
        window
    } else {
        extent.div_ceil(factor) * factor
    }
}

/// Per-voxel class probabilities `(classes, D, H, W)` for `image`, blending
/// overlapping windows with normalised weights.
pub fn sliding_window_predict(model: &UNet3D, image: &Grid3<f32>, cfg: &SlidingWindowConfig) -> Result<Tensor, PipelineError> {
    cfg.validate()?;
    let net = model.config();
    let factor = 1usize << net.num_downsamplings;
    let s = image.shape();
    let win = Shape3::new(
        effective_window(s.z, cfg.window.z, factor),
        effective_window(s.y, cfg.window.y, factor),
        effective_window(s.x, cfg.window.x, factor),
    );
    net.check_patch(win)?;
    let padded = Shape3::new(s.z.max(win.z), s.y.max(win.y), s.x.max(win.x));
    let before = [(padded.z - s.z) / 2, (padded.y - s.y) / 2, (padded.x - s.x) / 2];
    let img = image.crop_padded([-(before[0] as isize), -(before[1] as isize), -(before[2] as isize)], padded, 0.0);

    let zs = window_starts(padded.z, win.z, cfg.overlap[0])?;
    let ys = window_starts(padded.y, win.y, cfg.overlap[1])?;
    let xs = window_starts(padded.x, win.x, cfg.overlap[2])?;
    let weights = importance_map(win, cfg);
    let classes = net.num_classes;
    let n = padded.len();
    let mut acc = vec![0.0f64; classes * n];
    let mut wsum = vec![0.0f64; n];
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let origin = [z0 as isize, y0 as isize, x0 as isize];
                let probs = model.predict_proba(&Tensor::from_grid(&img.crop_padded(origin, win, 0.0)))?;
                let wn = win.len();
                for z in 0..win.z {
                    for y in 0..win.y {
                        let src = (z * win.y + y) * win.x;
                        let dst = padded.index(z0 + z, y0 + y, x0);
                        for x in 0..win.x {
                            let w = weights[src + x];
                            wsum[dst + x] += w;
                            for c in 0..classes {
                                acc[c * n + dst + x] += w * probs.data[c * wn + src + x] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(classes, s);
    let m = s.len();
    for z in 0..s.z {
        for y in 0..s.y {
            for x in 0..s.x {
                let p = padded.index(z + before[0], y + before[1], x + before[2]);
                let o = s.index(z, y, x);
                for c in 0..classes {
                    out.data[c * m + o] = (acc[c * n + p] / wsum[p]) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel argmax; ties go to the lower class id.
pub fn predict_labels(probs: &Tensor) -> LabelVolume {
    let n = probs.voxels();
    let data = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..probs.channels {
                if probs.data[c * n + v] > probs.data[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(Grid3::from_vec(probs.shape, data).expect("sized from tensor"), SideRanges::default()).expect("argmax emits predicted classes only")
}

/// Runs a single-side model on each half of `image` and merges the argmax
/// label maps.
pub fn predict_per_side(model: &UNet3D, image: &Grid3<f32>, plane: SideSplitPlane, cfg: &SlidingWindowConfig) -> Result<LabelVolume, PipelineError> {
    let (left, right) = split_sides(image, plane)?;
    let l = predict_labels(&sliding_window_predict(model, &left, cfg)?);
    let r = predict_labels(&sliding_window_predict(model, &right, cfg)?);
    Ok(LabelVolume::merge_sides(&l, &r, plane)?)
}

/// Whole-scan prediction.
pub fn predict_whole(model: &UNet3D, image: &Grid3<f32>, cfg: &SlidingWindowConfig) -> Result<LabelVolume, PipelineError> {
    Ok(predict_labels(&sliding_window_predict(model, image, cfg)?))
}

/// Pseudo labels from a single-side model, replaced by the interpolated
/// labels inside each side's annotated range.
pub fn generate_pseudo_labels(
    model: &UNet3D,
    image: &Grid3<f32>,
    annotations: &SparseAnnotationSet,
    plane: SideSplitPlane,
    cfg: &SlidingWindowConfig,
) -> Result<LabelVolume, PipelineError> {
    let raw = predict_per_side(model, image, plane, cfg)?;
    let interpolated = interpolate_labels(annotations, image.shape(), plane)?;
    Ok(correct_pseudo(&raw, &interpolated, plane)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceStatus {
    Normal,
    Atherosclerotic,
    NoVessel,
}

impl SliceStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Atherosclerotic => "atherosclerotic",
            Self::NoVessel => "no-vessel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisRow {
    pub side: Side,
    pub slice_index: usize,
    pub status: SliceStatus,
    pub diseased_voxels: usize,
    /// Normal plus diseased wall voxels.
    pub wall_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceDiagnosisReport {
    pub case_id: String,
    pub rows: Vec<DiagnosisRow>,
}

impl SliceDiagnosisReport {
    pub fn status(&self, side: Side, slice: usize) -> Option<SliceStatus> {
        self.rows.iter().find(|r| r.side == side && r.slice_index == slice).map(|r| r.status)
    }
}

/// Classifies every slice of each side: atherosclerotic when it holds at
/// least `tau` diseased-wall voxels, otherwise normal when any wall is present.
pub fn diagnose_slices(case_id: &str, labels: &LabelVolume, plane: SideSplitPlane, tau: usize) -> SliceDiagnosisReport {
    let s = labels.shape();
    let mut rows = Vec::with_capacity(2 * s.z);
    for side in Side::BOTH {
        let (x0, x1) = plane.x_range(side, s.x);
        for z in 0..s.z {
            let (mut diseased, mut wall) = (0, 0);
            for row in labels.grid().plane(z).chunks_exact(s.x) {
                for &c in &row[x0..x1] {
                    diseased += usize::from(c == DISEASED_WALL);
                    wall += usize::from(c == DISEASED_WALL || c == NORMAL_WALL);
                }
            }
            let status = if diseased >= tau {
                SliceStatus::Atherosclerotic
            } else if wall == 0 {
                SliceStatus::NoVessel
            } else {
                SliceStatus::Normal
            };
            rows.push(DiagnosisRow {
                side,
                slice_index: z,
                status,
                diseased_voxels: diseased,
                wall_voxels: wall,
            });
        }
    }
    SliceDiagnosisReport {
        case_id: case_id.to_string(),
        rows,
    }
}

pub fn write_diagnosis_csv(path: impl AsRef<Path>, reports: &[SliceDiagnosisReport]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| PipelineError::Csv(path.to_path_buf(), e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["case_id", "side", "slice_index", "status", "diseased_voxels", "wall_voxels"]).map_err(csv_err)?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.case_id.as_str(),
                row.side.code(),
                &row.slice_index.to_string(),
                row.status.as_str(),
                &row.diseased_voxels.to_string(),
                &row.wall_voxels.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| PipelineError::Io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cosmosseg_core::volume::{IGNORE, LUMEN};
    use cosmosseg_segnet::UNet3DConfig;

    fn tiny_net(seed: u64) -> UNet3D {
        UNet3D::new(
            UNet3DConfig {
                num_downsamplings: 1,
                base_channels: 2,
                max_channels: 4,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    fn ramp(shape: Shape3) -> Grid3<f32> {
        Grid3::from_fn(shape, |z, y, x| ((z * 7 + y * 3 + x) % 13) as f32 / 6.0 - 1.0)
    }

    #[test]
    fn starts_reference_depths() {
        assert_eq!(window_starts(96, 96, 0.5).unwrap(), vec![0]);
        assert_eq!(window_starts(144, 96, 0.5).unwrap(), vec![0, 48]);
        assert_eq!(window_starts(100, 32, 0.5).unwrap(), vec![0, 16, 32, 48, 64, 68]);
        assert_eq!(window_starts(10, 4, 0.0).unwrap(), vec![0, 4, 6]);
        assert!(matches!(window_starts(8, 16, 0.5), Err(PipelineError::WindowLargerThanPaddedVolume { .. })));
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let net = tiny_net(1);
        let img = ramp(Shape3::new(4, 6, 8));
        let cfg = SlidingWindowConfig::for_patch(Shape3::new(4, 6, 8));
        let sw = sliding_window_predict(&net, &img, &cfg).unwrap();
        let direct = net.predict_proba(&Tensor::from_grid(&img)).unwrap();
        let diff = sw.data.iter().zip(&direct.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn probabilities_normalised_and_cover_odd_shapes() {
        let net = tiny_net(2);
        let img = ramp(Shape3::new(5, 9, 13));
        let cfg = SlidingWindowConfig::for_patch(Shape3::new(4, 4, 4));
        let p = sliding_window_predict(&net, &img, &cfg).unwrap();
        assert_eq!((p.channels, p.shape), (4, img.shape()));
        let n = p.voxels();
        for v in 0..n {
            let s: f32 = (0..4).map(|c| p.data[c * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn small_volume_is_padded_to_the_network_factor() {
        let net = tiny_net(3);
        let img = ramp(Shape3::new(3, 5, 7));
        let p = sliding_window_predict(&net, &img, &SlidingWindowConfig::for_patch(Shape3::new(8, 8, 8))).unwrap();
        assert_eq!(p.shape, img.shape());
    }

    #[test]
    fn argmax_and_ties() {
        let mut t = Tensor::zeros(4, Shape3::new(1, 1, 3));
        let probs = [[0.1, 0.7, 0.1, 0.1], [0.25; 4], [1.0, 0.0, 0.0, 0.0]];
        for (v, p) in probs.iter().enumerate() {
            for c in 0..4 {
                t.data[c * 3 + v] = p[c];
            }
        }
        assert_eq!(predict_labels(&t).data(), &[LUMEN, 0, 0]);
    }

    #[test]
    fn diagnosis_rules() {
        let s = Shape3::new(3, 4, 8);
        let plane = SideSplitPlane::midline(8).unwrap();
        let mut g = Grid3::filled(s, 0u8);
        for x in 0..4 {
            g.set(0, 1, x, NORMAL_WALL);
        }
        for x in 0..2 {
            g.set(0, 2, x, DISEASED_WALL);
        }
        g.set(1, 0, 5, NORMAL_WALL);
        let labels = LabelVolume::new(g, SideRanges::default()).unwrap();
        let r = diagnose_slices("c", &labels, plane, 1);
        let row = r.rows.iter().find(|r| r.side == Side::Left && r.slice_index == 0).unwrap();
        assert_eq!((row.status, row.diseased_voxels, row.wall_voxels), (SliceStatus::Atherosclerotic, 2, 6));
        assert_eq!(r.status(Side::Right, 1), Some(SliceStatus::Normal));
        assert_eq!(r.status(Side::Left, 2), Some(SliceStatus::NoVessel));
        assert_eq!(diagnose_slices("c", &labels, plane, 3).status(Side::Left, 0), Some(SliceStatus::Normal));
        assert!(!labels.data().contains(&IGNORE));
    }
}
