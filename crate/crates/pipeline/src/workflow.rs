//! Stage orchestration over a work directory keyed by the settings hash.
//!
//! Layout of `<work>/<key>/`:
//!
//! ```text
//! settings.json            resolved settings
//! manifest.json            sha256 of every stage output
//! interpolated/<case>.nii.gz
//! fold-<f>/seg-model-a.ckpt
//! fold-<f>/pseudo/<case>.nii.gz
//! fold-<f>/seg-model-b.ckpt
//! predictions/<model>/<case>.nii.gz
//! diagnosis.csv
//! scores.csv  table.csv  table.txt  comparison.csv
//! ```

use crate::config::{hex, DiagnosisModel, ModelKind, PipelineConfig, PipelineSettings};
use crate::dataset::{load_cases, CaseData};
use crate::evalharness::{
    check_folds, fold_split, interpolated_labels, predict_case, score_case, side_cases, summarize, train_model, whole_case,
};
use crate::inference::{diagnose_slices, generate_pseudo_labels, write_diagnosis_csv};
use crate::PipelineError;
use cosmosseg_core::dataio::{load_catalog, load_labels, save_labels, Catalog};
use cosmosseg_core::metrics::{render_table, write_scores_csv, write_table_csv, ComparisonReport};
use cosmosseg_core::LabelVolume;
use cosmosseg_segnet::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Interpolate,
    TrainA,
    Propagate,
    TrainB,
    Infer,
    Diagnose,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Interpolate,
        Stage::TrainA,
        Stage::Propagate,
        Stage::TrainB,
        Stage::Infer,
        Stage::Diagnose,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Interpolate => "interpolate",
            Stage::TrainA => "train-a",
            Stage::Propagate => "propagate",
            Stage::TrainB => "train-b",
            Stage::Infer => "infer",
            Stage::Diagnose => "diagnose",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| PipelineError::Usage(format!("unknown stage `{s}`; expected one of {}", stage_names())))
    }
}

fn stage_names() -> String {
    Stage::ALL.map(Stage::name).join(", ")
}

/// Parses `a,b,c` (or `all`) into stages in pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, PipelineError> {
    if list.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut v = list.split(',').filter(|s| !s.trim().is_empty()).map(Stage::from_str).collect::<Result<Vec<_>, _>>()?;
    if v.is_empty() {
        return Err(PipelineError::Usage("no stages given".into()));
    }
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Output path (relative to the run directory) to hex sha256.
    pub outputs: BTreeMap<String, String>,
    /// Whether a rerun reproduced the previously recorded outputs.
    pub reproduced: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub run_key: String,
    pub settings_sha256: String,
    /// Digest of the catalog and every file it references.
    pub data_sha256: String,
    /// False when training used several loader threads.
    pub deterministic: bool,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct Workspace {
    pub dir: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(dir: PathBuf) -> Result<Self, PipelineError> {
        fs::create_dir_all(&dir).map_err(|e| PipelineError::Io(dir.clone(), e))?;
        let lock = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { dir, lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(lock)),
            Err(e) => Err(PipelineError::Io(lock, e)),
        }
    }

    pub fn interpolated(&self, id: &str) -> PathBuf {
        self.dir.join("interpolated").join(format!("{id}.nii.gz"))
    }

    pub fn checkpoint(&self, kind: ModelKind, fold: u8) -> PathBuf {
        self.dir.join(format!("fold-{fold}")).join(format!("{}.ckpt", kind.slug()))
    }

    pub fn pseudo(&self, fold: u8, id: &str) -> PathBuf {
        self.dir.join(format!("fold-{fold}")).join("pseudo").join(format!("{id}.nii.gz"))
    }

    pub fn prediction(&self, kind: ModelKind, id: &str) -> PathBuf {
        self.dir.join("predictions").join(kind.slug()).join(format!("{id}.nii.gz"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::Io(path.to_path_buf(), e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| PipelineError::Io(p.to_path_buf(), e))?;
    }
    Ok(())
}

fn require(stage: Stage, path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingPrerequisite {
            stage: stage.name().to_string(),
            missing: path.to_path_buf(),
        })
    }
}

fn load_label_file(path: &Path) -> Result<LabelVolume, PipelineError> {
    Ok(load_labels(path)?.0)
}

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub stages: Vec<Stage>,
    pub manifest: Manifest,
}

/// Work root: explicit argument, then the config file, then `COSMOSSEG_WORKDIR`.
pub fn resolve_work_root(explicit: Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    explicit
        .or_else(|| cfg.paths.work_dir.clone())
        .or_else(|| std::env::var_os("COSMOSSEG_WORKDIR").map(PathBuf::from))
        .ok_or_else(|| PipelineError::Usage("no work directory: pass --work, set paths.work_dir or COSMOSSEG_WORKDIR".into()))
}

/// Digest of the catalog bytes and of each image, annotation and truth file,
/// so regenerated data never maps onto an old run directory.
pub fn data_sha256(catalog_path: &Path, catalog: &Catalog) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    h.update(sha256_file(catalog_path)?.as_bytes());
    for c in &catalog.cases {
        for p in [Some(&c.image_path), Some(&c.annotation_path), c.gt_path.as_ref()].into_iter().flatten() {
            h.update(sha256_file(p)?.as_bytes());
        }
    }
    Ok(hex(&h.finalize()))
}

/// Run directory name: a hash over the resolved settings and the input data.
pub fn run_key(settings: &PipelineSettings, data_sha: &str) -> String {
    let mut h = Sha256::new();
    h.update(settings.hash().as_bytes());
    h.update(data_sha.as_bytes());
    hex(&h.finalize())[..16].to_string()
}

struct Runner<'a> {
    ws: Workspace,
    settings: PipelineSettings,
    cases: Vec<CaseData>,
    manifest: Manifest,
    log: &'a mut dyn FnMut(&str),
}

/// Runs `stages` (any subset, executed in pipeline order) for `cfg`.
pub fn run_pipeline(cfg: &PipelineConfig, work_root: &Path, stages: &[Stage], log: &mut dyn FnMut(&str)) -> Result<RunSummary, PipelineError> {
    let settings = cfg.resolve()?;
    let catalog = load_catalog(&cfg.paths.catalog).map_err(|e| PipelineError::Config(format!("catalog {}: {e}", cfg.paths.catalog.display())))?;
    let cases = load_cases(&catalog)?;
    check_folds(&cases, settings.k)?;
    let data_sha = data_sha256(&cfg.paths.catalog, &catalog)?;
    let key = run_key(&settings, &data_sha);
    let ws = Workspace::open(work_root.join(&key))?;
    let settings_json = serde_json::to_string_pretty(&settings).expect("settings serialize");
    let settings_path = ws.file("settings.json");
    fs::write(&settings_path, &settings_json).map_err(|e| PipelineError::Io(settings_path.clone(), e))?;
    let manifest_path = ws.file("manifest.json");
    let mut manifest: Manifest = fs::read(&manifest_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    manifest.run_key = key;
    manifest.settings_sha256 = settings.hash();
    manifest.data_sha256 = data_sha;
    manifest.deterministic = settings.deterministic();
    let mut ordered = stages.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    let mut r = Runner {
        ws,
        settings,
        cases,
        manifest,
        log,
    };
    for &stage in &ordered {
        (r.log)(&format!("stage {stage}"));
        let outputs = r.run(stage).map_err(|e| match e {
            e @ (PipelineError::MissingPrerequisite { .. } | PipelineError::Stage { .. }) => e,
            e => PipelineError::Stage {
                stage: stage.name().to_string(),
                message: e.to_string(),
            },
        })?;
        r.record(stage, outputs)?;
        let text = serde_json::to_string_pretty(&r.manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).map_err(|e| PipelineError::Io(manifest_path.clone(), e))?;
    }
    Ok(RunSummary {
        dir: r.ws.dir.clone(),
        stages: ordered,
        manifest: r.manifest,
    })
}

impl Runner<'_> {
    fn folds(&self) -> Vec<u8> {
        self.settings.folds.clone()
    }

    fn record(&mut self, stage: Stage, outputs: Vec<PathBuf>) -> Result<(), PipelineError> {
        let mut hashes = BTreeMap::new();
        for p in outputs {
            hashes.insert(self.ws.relative(&p), sha256_file(&p)?);
        }
        let previous = self.manifest.stages.get(stage.name()).map(|r| r.outputs.clone());
        let reproduced = previous.map(|prev| prev == hashes);
        if reproduced == Some(false) && self.settings.deterministic() {
            (self.log)(&format!("warning: stage {stage} outputs differ from the previous run"));
        }
        self.manifest.stages.insert(stage.name().to_string(), StageRecord { outputs: hashes, reproduced });
        Ok(())
    }

    fn run(&mut self, stage: Stage) -> Result<Vec<PathBuf>, PipelineError> {
        match stage {
            Stage::Interpolate => self.interpolate(),
            Stage::TrainA => self.train(ModelKind::A),
            Stage::Propagate => self.propagate(),
            Stage::TrainB => self.train(ModelKind::B),
            Stage::Infer => self.infer(),
            Stage::Diagnose => self.diagnose(),
            Stage::Evaluate => self.evaluate(),
        }
    }

    fn interpolate(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut out = Vec::new();
        for c in &self.cases {
            let path = self.ws.interpolated(&c.case_id);
            ensure_parent(&path)?;
            save_labels(&interpolated_labels(c)?, c.image.spacing(), &path)?;
            out.push(path);
        }
        Ok(out)
    }

    fn train(&mut self, kind: ModelKind) -> Result<Vec<PathBuf>, PipelineError> {
        let stage = if kind == ModelKind::A { Stage::TrainA } else { Stage::TrainB };
        let mut out = Vec::new();
        for fold in self.folds() {
            let (train_idx, _) = fold_split(&self.cases, fold)?;
            let mut samples = Vec::new();
            for &i in &train_idx {
                let c = &self.cases[i];
                match kind {
                    ModelKind::A => {
                        let p = self.ws.interpolated(&c.case_id);
                        require(stage, &p)?;
                        samples.extend(side_cases(c, &load_label_file(&p)?)?);
                    }
                    ModelKind::B => {
                        let p = self.ws.pseudo(fold, &c.case_id);
                        require(stage, &p)?;
                        samples.push(whole_case(c, &load_label_file(&p)?)?);
                    }
                }
            }
            (self.log)(&format!("fold {fold}: training {} on {} scans", kind.name(), samples.len()));
            let log = &mut self.log;
            let ck = train_model(kind, fold, &samples, &self.settings, |r| {
                log(&format!("  epoch {:>4}  lr {:.6}  loss {:.5}", r.epoch, r.lr, r.mean_loss))
            })?;
            let path = self.ws.checkpoint(kind, fold);
            ensure_parent(&path)?;
            ck.save(&path)?;
            out.push(path);
        }
        Ok(out)
    }

    fn propagate(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut out = Vec::new();
        for fold in self.folds() {
            let ck_path = self.ws.checkpoint(ModelKind::A, fold);
            require(Stage::Propagate, &ck_path)?;
            let net = Checkpoint::load(&ck_path)?.model()?;
            let (train_idx, _) = fold_split(&self.cases, fold)?;
            for &i in &train_idx {
                let c = &self.cases[i];
                let pseudo = generate_pseudo_labels(&net, c.image.grid(), &c.annotations, c.plane, &self.settings.sliding_window)?;
                let path = self.ws.pseudo(fold, &c.case_id);
                ensure_parent(&path)?;
                save_labels(&pseudo, c.image.spacing(), &path)?;
                out.push(path);
            }
        }
        Ok(out)
    }

    fn infer(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut out = Vec::new();
        for fold in self.folds() {
            let (_, held) = fold_split(&self.cases, fold)?;
            for kind in [ModelKind::A, ModelKind::B] {
                let ck_path = self.ws.checkpoint(kind, fold);
                require(Stage::Infer, &ck_path)?;
                let ck = Checkpoint::load(&ck_path)?;
                for &i in &held {
                    let c = &self.cases[i];
                    (self.log)(&format!("fold {fold}: {} predicting {}", kind.name(), c.case_id));
                    let pred = predict_case(kind, &ck, c, &self.settings)?;
                    let path = self.ws.prediction(kind, &c.case_id);
                    ensure_parent(&path)?;
                    save_labels(&pred, c.image.spacing(), &path)?;
                    out.push(path);
                }
            }
        }
        Ok(out)
    }

    fn held_out(&self) -> Result<Vec<usize>, PipelineError> {
        let mut idx = Vec::new();
        for fold in self.folds() {
            idx.extend(fold_split(&self.cases, fold)?.1);
        }
        Ok(idx)
    }

    fn diagnose(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let kind = match self.settings.diagnose_with {
            DiagnosisModel::A => ModelKind::A,
            DiagnosisModel::B => ModelKind::B,
        };
        let mut reports = Vec::new();
        for i in self.held_out()? {
            let c = &self.cases[i];
            let p = self.ws.prediction(kind, &c.case_id);
            require(Stage::Diagnose, &p)?;
            reports.push(diagnose_slices(&c.case_id, &load_label_file(&p)?, c.plane, self.settings.tau));
        }
        let path = self.ws.file("diagnosis.csv");
        write_diagnosis_csv(&path, &reports)?;
        Ok(vec![path])
    }

    fn evaluate(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut scores = [Vec::new(), Vec::new()];
        for fold in self.folds() {
            let (_, held) = fold_split(&self.cases, fold)?;
            for (k, kind) in [ModelKind::A, ModelKind::B].into_iter().enumerate() {
                for &i in &held {
                    let c = &self.cases[i];
                    let p = self.ws.prediction(kind, &c.case_id);
                    require(Stage::Evaluate, &p)?;
                    scores[k].push(score_case(c, &load_label_file(&p)?, self.settings.scope)?);
                }
            }
        }
        let summary = summarize(&scores[0], &scores[1])?;
        let paths = ["scores.csv", "table.csv", "table.txt", "comparison.csv"].map(|n| self.ws.file(n));
        write_scores_csv(&paths[0], &summary.rows)?;
        write_table_csv(&paths[1], &summary.table)?;
        let table = render_table(&summary.table);
        fs::write(&paths[2], &table).map_err(|e| PipelineError::Io(paths[2].clone(), e))?;
        write_comparison_csv(&paths[3], &summary.comparison)?;
        (self.log)(&table);
        Ok(paths.to_vec())
    }
}

/// `column,delta_b_minus_a,b_better,a_better,tied`.
pub fn write_comparison_csv(path: &Path, report: &ComparisonReport) -> Result<(), PipelineError> {
    let csv_err = |e: csv::Error| PipelineError::Csv(path.to_path_buf(), e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["column", "delta_b_minus_a", "b_better", "a_better", "tied"]).map_err(csv_err)?;
    for (k, col) in ["dsc_lumen", "dsc_normal_wall", "dsc_diseased_wall", "dsc_average"].iter().enumerate() {
        let wc = report.wins[k];
        w.write_record([
            col.to_string(),
            report.deltas[k].map(|d| d.to_string()).unwrap_or_default(),
            wc.b_better.to_string(),
            wc.a_better.to_string(),
            wc.tied.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| PipelineError::Io(path.to_path_buf(), e))
}
