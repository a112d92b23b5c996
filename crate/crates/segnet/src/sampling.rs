use crate::SegNetError;
use cosmosseg_core::volume::IGNORE;
use cosmosseg_core::{Grid3, Mask3, Shape3};
use rand::Rng;

/// A training patch. `ignore` marks padding and `IGNORE` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Grid3<f32>,
    pub labels: Grid3<u8>,
    pub ignore: Mask3,
}

impl Patch {
    pub fn new(image: Grid3<f32>, labels: Grid3<u8>) -> Self {
        let ignore = labels.map(|v| v == IGNORE);
        Self { image, labels, ignore }
    }
}

/// A case prepared for sampling: normalized image, labels and voxel indices.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub case_id: String,
    image: Grid3<f32>,
    labels: Grid3<u8>,
    /// Voxel indices per present foreground class.
    foreground: Vec<Vec<u32>>,
    usable: Vec<u32>,
}

impl TrainingCase {
    pub fn new(case_id: impl Into<String>, image: Grid3<f32>, labels: Grid3<u8>) -> Result<Self, SegNetError> {
        let case_id = case_id.into();
        if image.shape() != labels.shape() {
            return Err(SegNetError::ShapeMismatch(image.shape(), labels.shape()));
        }
        let mut foreground: Vec<Vec<u32>> = vec![Vec::new(); IGNORE as usize];
        let mut usable = Vec::new();
        for (i, &v) in labels.data().iter().enumerate() {
            if v != IGNORE {
                usable.push(i as u32);
                if v != 0 {
                    foreground[v as usize].push(i as u32);
                }
            }
        }
        foreground.retain(|c| !c.is_empty());
        if usable.is_empty() {
            return Err(SegNetError::NoUsableVoxels(case_id));
        }
        Ok(Self {
            case_id,
            image,
            labels,
            foreground,
            usable,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.image.shape()
    }

    pub fn image(&self) -> &Grid3<f32> {
        &self.image
    }

    pub fn labels(&self) -> &Grid3<u8> {
        &self.labels
    }

    /// With probability `fg_prob` (and if any exist) the patch is centred on a
    /// voxel of a foreground class drawn uniformly among the present ones, so
    /// rare classes are seen as often as common ones. Otherwise the centre is
    /// any non-ignored voxel. The box is shifted to reduce padding while
    /// keeping the centre inside.
    pub fn sample<R: Rng + ?Sized>(&self, patch: Shape3, fg_prob: f64, rng: &mut R) -> Patch {
        let pool = if !self.foreground.is_empty() && rng.random_bool(fg_prob.clamp(0.0, 1.0)) {
            &self.foreground[rng.random_range(0..self.foreground.len())]
        } else {
            &self.usable
        };
        let centre = self.shape().coords(pool[rng.random_range(0..pool.len())] as usize);
        let c = [centre.0, centre.1, centre.2];
        let v = self.shape().as_array();
        let p = patch.as_array();
        let origin = [0, 1, 2].map(|a| {
            let (lo, hi) = if v[a] >= p[a] { (0, (v[a] - p[a]) as isize) } else { (v[a] as isize - p[a] as isize, 0) };
            (c[a] as isize - (p[a] / 2) as isize).clamp(lo, hi)
        });
        Patch::new(self.image.crop_padded(origin, patch, 0.0), self.labels.crop_padded(origin, patch, IGNORE))
    }
}

/// One-shot form of [`TrainingCase::sample`].
pub fn sample_patch<R: Rng + ?Sized>(image: &Grid3<f32>, labels: &Grid3<u8>, patch: Shape3, fg_prob: f64, rng: &mut R) -> Result<Patch, SegNetError> {
    Ok(TrainingCase::new("", image.clone(), labels.clone())?.sample(patch, fg_prob, rng))
}
