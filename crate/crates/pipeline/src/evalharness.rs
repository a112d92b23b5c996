//! Cross-validation of the two-model chain: interpolate, train A on single
//! sides, propagate, retrain B on whole scans, score both on held-out cases.

use crate::config::{ModelKind, PipelineSettings, ScopeChoice};
use crate::dataset::CaseData;
use crate::inference::{generate_pseudo_labels, predict_per_side, predict_whole};
use crate::PipelineError;
use cosmosseg_core::labelcraft::interpolate_labels;
use cosmosseg_core::metrics::{aggregate, compare_models, evaluate_case, CaseScore, ComparisonReport, EvalScope, TableRow};
use cosmosseg_core::LabelVolume;
use cosmosseg_segnet::{train_with, Checkpoint, EpochReport, SegNetError, TrainingCase};

pub fn interpolated_labels(case: &CaseData) -> Result<LabelVolume, PipelineError> {
    Ok(interpolate_labels(&case.annotations, case.image.shape(), case.plane)?)
}

/// Single-side training samples; halves with no annotated voxel are skipped.
pub fn side_cases(case: &CaseData, labels: &LabelVolume) -> Result<Vec<TrainingCase>, PipelineError> {
    let (il, ir) = case.image.split_sides(case.plane)?;
    let (ll, lr) = labels.split_sides(case.plane)?;
    let mut out = Vec::with_capacity(2);
    for (side, img, lab) in [("L", il, ll), ("R", ir, lr)] {
        match TrainingCase::new(format!("{}_{side}", case.case_id), img.into_grid(), lab.into_grid()) {
            Ok(tc) => out.push(tc),
            Err(SegNetError::NoUsableVoxels(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

pub fn whole_case(case: &CaseData, labels: &LabelVolume) -> Result<TrainingCase, PipelineError> {
    Ok(TrainingCase::new(case.case_id.clone(), case.image.grid().clone(), labels.grid().clone())?)
}

pub fn train_model(
    kind: ModelKind,
    fold: u8,
    cases: &[TrainingCase],
    settings: &PipelineSettings,
    on_epoch: impl FnMut(EpochReport),
) -> Result<Checkpoint, PipelineError> {
    let tc = settings.training_for(kind, fold);
    train_with(cases, &settings.unet, &tc, &settings.augmentation, on_epoch).map_err(|e| PipelineError::Stage {
        stage: format!("train {} (fold {fold})", kind.name()),
        message: e.to_string(),
    })
}

/// Labels of a held-out case predicted by model A (per side) or B (whole scan).
pub fn predict_case(kind: ModelKind, ck: &Checkpoint, case: &CaseData, settings: &PipelineSettings) -> Result<LabelVolume, PipelineError> {
    let model = ck.model()?;
    match kind {
        ModelKind::A => predict_per_side(&model, case.image.grid(), case.plane, &settings.sliding_window),
        ModelKind::B => predict_whole(&model, case.image.grid(), &settings.sliding_window),
    }
}

/// Truth and scope for scoring a case.
pub fn scoring_truth(case: &CaseData, scope: ScopeChoice) -> Result<(LabelVolume, EvalScope), PipelineError> {
    let dense = || {
        case.truth
            .clone()
            .ok_or_else(|| PipelineError::Data(format!("case {} has no dense truth for full-extent scoring", case.case_id)))
    };
    Ok(match (scope, &case.truth) {
        (ScopeChoice::Full, _) | (ScopeChoice::Auto, Some(_)) => (dense()?, EvalScope::Full),
        (ScopeChoice::Annotated, _) | (ScopeChoice::Auto, None) => (interpolated_labels(case)?, EvalScope::Annotated(case.plane)),
    })
}

pub fn score_case(case: &CaseData, pred: &LabelVolume, scope: ScopeChoice) -> Result<CaseScore, PipelineError> {
    let (truth, scope) = scoring_truth(case, scope)?;
    Ok(evaluate_case(&case.case_id, pred, &truth, scope)?)
}

/// Training and held-out case indices of one fold.
pub fn fold_split(cases: &[CaseData], fold: u8) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let held: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].fold == fold).collect();
    let train: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].fold != fold).collect();
    if held.is_empty() || train.is_empty() {
        return Err(PipelineError::MissingFold(fold));
    }
    Ok((train, held))
}

/// Checks that every fold of `0..k` has at least one case.
pub fn check_folds(cases: &[CaseData], k: usize) -> Result<(), PipelineError> {
    if let Some(c) = cases.iter().find(|c| c.fold as usize >= k) {
        return Err(PipelineError::Data(format!("case {} has fold {} outside 0..{k}", c.case_id, c.fold)));
    }
    for f in 0..k as u8 {
        fold_split(cases, f)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: u8,
    pub model_a: Checkpoint,
    pub model_b: Checkpoint,
    pub scores_a: Vec<CaseScore>,
    pub scores_b: Vec<CaseScore>,
}

/// Runs the whole chain for one fold.
pub fn run_fold(cases: &[CaseData], fold: u8, settings: &PipelineSettings, log: &mut dyn FnMut(&str)) -> Result<FoldOutcome, PipelineError> {
    let (train_idx, held_idx) = fold_split(cases, fold)?;
    let mut sides = Vec::new();
    for &i in &train_idx {
        sides.extend(side_cases(&cases[i], &interpolated_labels(&cases[i])?)?);
    }
    log(&format!("fold {fold}: training {} on {} single-side scans", ModelKind::A.name(), sides.len()));
    let model_a = train_model(ModelKind::A, fold, &sides, settings, |r| log_epoch(log, r))?;
    let net_a = model_a.model()?;
    let mut whole = Vec::new();
    for &i in &train_idx {
        let c = &cases[i];
        let pseudo = generate_pseudo_labels(&net_a, c.image.grid(), &c.annotations, c.plane, &settings.sliding_window)?;
        whole.push(whole_case(c, &pseudo)?);
    }
    log(&format!("fold {fold}: training {} on {} propagated scans", ModelKind::B.name(), whole.len()));
    let model_b = train_model(ModelKind::B, fold, &whole, settings, |r| log_epoch(log, r))?;
    let (mut scores_a, mut scores_b) = (Vec::new(), Vec::new());
    for &i in &held_idx {
        let c = &cases[i];
        scores_a.push(score_case(c, &predict_case(ModelKind::A, &model_a, c, settings)?, settings.scope)?);
        scores_b.push(score_case(c, &predict_case(ModelKind::B, &model_b, c, settings)?, settings.scope)?);
    }
    Ok(FoldOutcome {
        fold,
        model_a,
        model_b,
        scores_a,
        scores_b,
    })
}

fn log_epoch(log: &mut dyn FnMut(&str), r: EpochReport) {
    log(&format!("  epoch {:>4}  lr {:.6}  loss {:.5}", r.epoch, r.lr, r.mean_loss));
}

#[derive(Debug, Clone)]
pub struct CrossvalReport {
    pub folds: Vec<FoldOutcome>,
    pub summary: ScoreSummary,
}

/// Score rows, aggregate table and B-versus-A comparison.
#[derive(Debug, Clone)]
pub struct ScoreSummary {
    /// `(model name, score)`, every A row before every B row.
    pub rows: Vec<(String, CaseScore)>,
    pub table: Vec<TableRow>,
    pub comparison: ComparisonReport,
}

pub fn summarize(a: &[CaseScore], b: &[CaseScore]) -> Result<ScoreSummary, PipelineError> {
    Ok(ScoreSummary {
        rows: score_rows(a, b),
        table: vec![aggregate(ModelKind::A.name(), a), aggregate(ModelKind::B.name(), b)],
        comparison: compare_models(a, b)?,
    })
}

pub fn score_rows(a: &[CaseScore], b: &[CaseScore]) -> Vec<(String, CaseScore)> {
    let mut rows: Vec<(String, CaseScore)> = a.iter().map(|s| (ModelKind::A.name().to_string(), s.clone())).collect();
    rows.extend(b.iter().map(|s| (ModelKind::B.name().to_string(), s.clone())));
    rows
}

/// k-fold cross-validation over `settings.folds`.
pub fn run_crossval(cases: &[CaseData], settings: &PipelineSettings, log: &mut dyn FnMut(&str)) -> Result<CrossvalReport, PipelineError> {
    check_folds(cases, settings.k)?;
    let mut folds = Vec::with_capacity(settings.folds.len());
    for &f in &settings.folds {
        folds.push(run_fold(cases, f, settings, log)?);
    }
    let a: Vec<CaseScore> = folds.iter().flat_map(|f| f.scores_a.clone()).collect();
    let b: Vec<CaseScore> = folds.iter().flat_map(|f| f.scores_b.clone()).collect();
    let summary = summarize(&a, &b)?;
    Ok(CrossvalReport { folds, summary })
}
