//! Loading catalogued cases and writing synthetic phantom datasets.

use crate::config::mix_seed;
use crate::PipelineError;
use cosmosseg_core::dataio::{
    assign_folds, load_annotations, load_labels, load_volume, save_annotations, save_catalog, save_labels, save_volume, CaseRecord,
    Catalog, SparseAnnotationSet,
};
use cosmosseg_core::phantom::{generate_phantom, sparsify_annotations, PhantomConfig};
use cosmosseg_core::{ImageVolume, LabelVolume, SideSplitPlane};
use std::fs;
use std::path::{Path, PathBuf};

/// One case ready for training or evaluation; the image is z-scored.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub case_id: String,
    pub fold: u8,
    pub image: ImageVolume,
    pub annotations: SparseAnnotationSet,
    /// Dense ground truth, when the dataset has one.
    pub truth: Option<LabelVolume>,
    pub plane: SideSplitPlane,
}

pub fn load_case(record: &CaseRecord) -> Result<CaseData, PipelineError> {
    let image = load_volume(&record.image_path)?.normalize_zscore()?;
    let annotations = load_annotations(&record.annotation_path)?;
    let truth = match &record.gt_path {
        Some(p) => {
            let (labels, _) = load_labels(p)?;
            if labels.shape() != image.shape() {
                return Err(PipelineError::Data(format!(
                    "case {}: truth shape {} differs from image shape {}",
                    record.case_id,
                    labels.shape(),
                    image.shape()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Ok(CaseData {
        case_id: record.case_id.clone(),
        fold: record.fold_id,
        plane: SideSplitPlane::midline(image.shape().x)?,
        image,
        annotations,
        truth,
    })
}

pub fn load_cases(catalog: &Catalog) -> Result<Vec<CaseData>, PipelineError> {
    catalog.cases.iter().map(load_case).collect()
}

/// Per-case phantom generator settings: the master seed is mixed with the case index.
pub fn phantom_case_config(base: &PhantomConfig, seed: u64, index: usize) -> PhantomConfig {
    PhantomConfig {
        seed: mix_seed(seed, 1000 + index as u64),
        ..base.clone()
    }
}

pub fn phantom_case_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Writes `n` phantom cases under `out` (`images/`, `annotations/`, `truth/`)
/// plus `catalog.csv` with a seeded `k`-fold assignment.
pub fn write_phantom_dataset(out: &Path, n: usize, seed: u64, base: &PhantomConfig, k: usize) -> Result<Catalog, PipelineError> {
    let ids: Vec<String> = (0..n).map(phantom_case_id).collect();
    let folds = assign_folds(&ids, k, seed)?;
    for sub in ["images", "annotations", "truth"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| PipelineError::Io(d, e))?;
    }
    let mut cases = Vec::with_capacity(n);
    for (i, (id, fold)) in folds.into_iter().enumerate() {
        let cfg = phantom_case_config(base, seed, i);
        let (image, dense) = generate_phantom(&cfg, &id)?;
        let ann = sparsify_annotations(&dense, cfg.plane(), cfg.annotated_fraction, mix_seed(cfg.seed, 1), &id)?;
        let paths = [
            out.join("images").join(format!("{id}.nii.gz")),
            out.join("annotations").join(format!("{id}.json")),
            out.join("truth").join(format!("{id}.nii.gz")),
        ];
        save_volume(&image, &paths[0])?;
        save_annotations(&ann, &paths[1])?;
        save_labels(&dense, cfg.spacing, &paths[2])?;
        let [image_path, annotation_path, gt]: [PathBuf; 3] = paths;
        cases.push(CaseRecord {
            case_id: id,
            image_path,
            annotation_path,
            gt_path: Some(gt),
            fold_id: fold,
        });
    }
    let catalog = Catalog::new(cases)?;
    save_catalog(&catalog, out.join("catalog.csv"))?;
    Ok(catalog)
}
