//! Case catalog CSV (`case_id,image_path,annotation_path,gt_path,fold_id`).
//!
//! Relative paths are resolved against the directory holding the catalog.

use super::DataIoError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    /// Dense ground truth; only phantoms have one.
    pub gt_path: Option<PathBuf>,
    pub fold_id: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    pub cases: Vec<CaseRecord>,
}

impl Catalog {
    pub fn new(cases: Vec<CaseRecord>) -> Result<Self, DataIoError> {
        let mut ids = HashSet::new();
        for c in &cases {
            if !ids.insert(c.case_id.as_str()) {
                return Err(DataIoError::Catalog(format!("duplicate case id {}", c.case_id)));
            }
            if c.fold_id > 3 {
                return Err(DataIoError::Catalog(format!("case {} has fold {} outside 0..=3", c.case_id, c.fold_id)));
            }
        }
        Ok(Self { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn in_fold(&self, fold: u8) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.fold_id == fold)
    }

    pub fn not_in_fold(&self, fold: u8) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.fold_id != fold)
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}

/// Shuffles ids with a seeded PRNG and deals them round-robin into `k` folds.
/// Returns `(case_id, fold)` in the input order.
pub fn assign_folds(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<(String, u8)>, DataIoError> {
    if k == 0 || case_ids.len() < k {
        return Err(DataIoError::TooFewCases { cases: case_ids.len(), k });
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0u8; case_ids.len()];
    for (pos, &idx) in order.iter().enumerate() {
        folds[idx] = (pos % k) as u8;
    }
    Ok(case_ids.iter().cloned().zip(folds).collect())
}

#[derive(Serialize, Deserialize)]
struct Row {
    case_id: String,
    image_path: String,
    annotation_path: String,
    gt_path: String,
    fold_id: u8,
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog, DataIoError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataIoError::FileMissing(path.to_path_buf()));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DataIoError::Catalog(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| DataIoError::Catalog(e.to_string()))?;
    if headers != vec!["case_id", "image_path", "annotation_path", "gt_path", "fold_id"] {
        return Err(DataIoError::Catalog(format!("unexpected header {headers:?}")));
    }
    let mut cases = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| DataIoError::Catalog(e.to_string()))?;
        cases.push(CaseRecord {
            case_id: row.case_id,
            image_path: resolve(&row.image_path),
            annotation_path: resolve(&row.annotation_path),
            gt_path: (!row.gt_path.is_empty()).then(|| resolve(&row.gt_path)),
            fold_id: row.fold_id,
        });
    }
    Catalog::new(cases)
}

/// Writes paths relative to the catalog directory when possible.
pub fn save_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<(), DataIoError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rel = |p: &Path| p.strip_prefix(&base).unwrap_or(p).to_string_lossy().into_owned();
    let fail = |e: std::io::Error| DataIoError::WriteFailure {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(e.into()))?;
    for c in &catalog.cases {
        w.serialize(Row {
            case_id: c.case_id.clone(),
            image_path: rel(&c.image_path),
            annotation_path: rel(&c.annotation_path),
            gt_path: c.gt_path.as_deref().map(rel).unwrap_or_default(),
            fold_id: c.fold_id,
        })
        .map_err(|e| fail(e.into()))?;
    }
    w.flush().map_err(fail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:03}")).collect()
    }

    fn sizes(a: &[(String, u8)], k: usize) -> Vec<usize> {
        let mut s = vec![0; k];
        for (_, f) in a {
            s[*f as usize] += 1;
        }
        s
    }

    #[test]
    fn eight_cases_four_folds() {
        assert_eq!(sizes(&assign_folds(&ids(8), 4, 7).unwrap(), 4), vec![2, 2, 2, 2]);
    }

    #[test]
    fn fifty_cases_four_folds() {
        assert_eq!(sizes(&assign_folds(&ids(50), 4, 1).unwrap(), 4), vec![13, 13, 12, 12]);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(assign_folds(&ids(20), 4, 3).unwrap(), assign_folds(&ids(20), 4, 3).unwrap());
        assert_ne!(assign_folds(&ids(20), 4, 3).unwrap(), assign_folds(&ids(20), 4, 4).unwrap());
    }

    #[test]
    fn too_few_cases() {
        assert!(matches!(assign_folds(&ids(2), 4, 0), Err(DataIoError::TooFewCases { cases: 2, k: 4 })));
    }

    #[test]
    fn catalog_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cat = Catalog::new(vec![
            CaseRecord {
                case_id: "a".into(),
                image_path: d.join("a.nii.gz"),
                annotation_path: d.join("a.json"),
                gt_path: Some(d.join("a_gt.nii.gz")),
                fold_id: 0,
            },
            CaseRecord {
                case_id: "b".into(),
                image_path: d.join("b.nii.gz"),
                annotation_path: d.join("b.json"),
                gt_path: None,
                fold_id: 3,
            },
        ])
        .unwrap();
        let path = d.join("catalog.csv");
        save_catalog(&cat, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("case_id,image_path,annotation_path,gt_path,fold_id\na,a.nii.gz,a.json,a_gt.nii.gz,0\n"));
        assert_eq!(load_catalog(&path).unwrap(), cat);

        let mut dup = cat.cases.clone();
        dup[1].case_id = "a".into();
        assert!(Catalog::new(dup).is_err());
        let mut bad = cat.cases.clone();
        bad[0].fold_id = 4;
        assert!(Catalog::new(bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn folds_partition(n in 4usize..80, seed in proptest::prelude::any::<u64>()) {
            let a = assign_folds(&ids(n), 4, seed).unwrap();
            proptest::prop_assert_eq!(a.len(), n);
            let s = sizes(&a, 4);
            proptest::prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            proptest::prop_assert_eq!(s.iter().sum::<usize>(), n);
        }
    }
}
