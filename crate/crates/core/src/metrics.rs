//! Dice similarity, per-case class scores, model comparison and the
//! aggregate table.
//!
//! A class whose prediction and truth are both empty has no defined Dice; it
//! is reported as absent (`None`) and left out of every mean.

use crate::volume::{LabelVolume, Mask3, Shape3, Side, SideSplitPlane, IGNORE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("case sets differ: {0}")]
    CaseSetMismatch(String),
    #[error("annotated scope requested but truth carries no annotated range")]
    MissingRange,
    #[error("scores csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Overlap counts behind a Dice value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl Overlap {
    /// `2|P∩G| / (|P|+|G|)`, or `None` when both are empty.
    pub fn dice(&self) -> Option<f64> {
        let denom = self.pred + self.truth;
        (denom > 0).then(|| (2 * self.intersection) as f64 / denom as f64)
    }
}

pub fn dsc(pred: &Mask3, truth: &Mask3) -> Result<Option<f64>, MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch(pred.shape(), truth.shape()));
    }
    let mut o = Overlap::default();
    for (&p, &g) in pred.data().iter().zip(truth.data()) {
        o.pred += p as u64;
        o.truth += g as u64;
        o.intersection += (p && g) as u64;
    }
    Ok(o.dice())
}

/// Which voxels count towards a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    /// Every voxel whose truth is not `IGNORE`.
    Full,
    /// Only slices inside the truth's annotated range, per side.
    Annotated(SideSplitPlane),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dsc_lumen: Option<f64>,
    pub dsc_normal_wall: Option<f64>,
    pub dsc_diseased_wall: Option<f64>,
    pub dsc_average: Option<f64>,
}

impl CaseScore {
    pub fn classes(&self) -> [Option<f64>; 3] {
        [self.dsc_lumen, self.dsc_normal_wall, self.dsc_diseased_wall]
    }

    /// Lumen, normal, diseased, average.
    pub fn columns(&self) -> [Option<f64>; 4] {
        [self.dsc_lumen, self.dsc_normal_wall, self.dsc_diseased_wall, self.dsc_average]
    }

    pub fn from_classes(case_id: impl Into<String>, classes: [Option<f64>; 3]) -> Self {
        Self {
            case_id: case_id.into(),
            dsc_lumen: classes[0],
            dsc_normal_wall: classes[1],
            dsc_diseased_wall: classes[2],
            dsc_average: mean_present(classes.iter().copied()),
        }
    }
}

/// Mean over present values; `None` if none are present.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-class Dice for lumen, normal wall and diseased wall.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, truth: &LabelVolume, scope: EvalScope) -> Result<CaseScore, MetricsError> {
    let s = truth.shape();
    if pred.shape() != s {
        return Err(MetricsError::ShapeMismatch(pred.shape(), s));
    }
    let ranges = truth.ranges();
    if matches!(scope, EvalScope::Annotated(_)) && ranges.is_empty() {
        return Err(MetricsError::MissingRange);
    }
    let mut counts = [Overlap::default(); 3];
    for z in 0..s.z {
        let (pp, tp) = (pred.grid().plane(z), truth.grid().plane(z));
        for (i, (&p, &g)) in pp.iter().zip(tp).enumerate() {
            if g == IGNORE {
                continue;
            }
            if let EvalScope::Annotated(plane) = scope {
                let side: Side = plane.side_of(i % s.x);
                if !ranges.get(side).is_some_and(|r| r.contains(z)) {
                    continue;
                }
            }
            for (k, o) in counts.iter_mut().enumerate() {
                let c = k as u8 + 1;
                let (hp, hg) = (p == c, g == c);
                o.pred += hp as u64;
                o.truth += hg as u64;
                o.intersection += (hp && hg) as u64;
            }
        }
    }
    Ok(CaseScore::from_classes(case_id, counts.map(|o| o.dice())))
}

/// Per-model mean of each column over the cases where it is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub means: [Option<f64>; 4],
    pub cases: usize,
}

pub fn aggregate(model: &str, scores: &[CaseScore]) -> TableRow {
    let mut means = [None; 4];
    for (k, m) in means.iter_mut().enumerate() {
        *m = mean_present(scores.iter().map(|s| s.columns()[k]));
    }
    TableRow {
        model: model.to_string(),
        means,
        cases: scores.len(),
    }
}

/// Mean DSC in percent, one row per model, like a paper results table.
pub fn render_table(rows: &[TableRow]) -> String {
    let cols = ["Lumen", "Normal Vessel Wall", "Diseased Vessel Wall", "Average"];
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max("Methods".len());
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Methods");
    for c in cols {
        let _ = write!(out, " | {c:>w$}", w = c.len().max(6));
    }
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.model);
        for (c, m) in cols.iter().zip(r.means) {
            let cell = m.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = write!(out, " | {cell:>w$}", w = c.len().max(6));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WinCount {
    pub b_better: usize,
    pub a_better: usize,
    pub tied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `mean(B) − mean(A)` per column, over cases where both models have a value.
    pub deltas: [Option<f64>; 4],
    /// Per-case `B − A` per column.
    pub per_case: Vec<(String, [Option<f64>; 4])>,
    pub wins: [WinCount; 4],
}

pub fn compare_models(a: &[CaseScore], b: &[CaseScore]) -> Result<ComparisonReport, MetricsError> {
    let by_id = |s: &[CaseScore]| s.iter().map(|c| (c.case_id.clone(), c.clone())).collect::<BTreeMap<_, _>>();
    let (ma, mb) = (by_id(a), by_id(b));
    if ma.len() != a.len() || mb.len() != b.len() || ma.keys().ne(mb.keys()) {
        let only_a: Vec<_> = ma.keys().filter(|k| !mb.contains_key(*k)).collect();
        let only_b: Vec<_> = mb.keys().filter(|k| !ma.contains_key(*k)).collect();
        return Err(MetricsError::CaseSetMismatch(format!("only in A: {only_a:?}, only in B: {only_b:?} (or duplicate ids)")));
    }
    let mut per_case = Vec::new();
    let mut wins = [WinCount::default(); 4];
    let mut sums = [(0.0, 0.0, 0usize); 4];
    for (id, sa) in &ma {
        let sb = &mb[id];
        let (ca, cb) = (sa.columns(), sb.columns());
        let mut d = [None; 4];
        for k in 0..4 {
            if let (Some(x), Some(y)) = (ca[k], cb[k]) {
                d[k] = Some(y - x);
                sums[k].0 += x;
                sums[k].1 += y;
                sums[k].2 += 1;
                let w = &mut wins[k];
                if y > x {
                    w.b_better += 1;
                } else if x > y {
                    w.a_better += 1;
                } else {
                    w.tied += 1;
                }
            }
        }
        per_case.push((id.clone(), d));
    }
    let deltas = sums.map(|(sa, sb, n)| (n > 0).then(|| sb / n as f64 - sa / n as f64));
    Ok(ComparisonReport { deltas, per_case, wins })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    case_id: String,
    model: String,
    dsc_lumen: Option<f64>,
    dsc_normal_wall: Option<f64>,
    dsc_diseased_wall: Option<f64>,
    dsc_average: Option<f64>,
}

/// `case_id,model,dsc_lumen,dsc_normal_wall,dsc_diseased_wall,dsc_average`;
/// absent values are empty fields.
pub fn write_scores_csv(path: impl AsRef<Path>, rows: &[(String, CaseScore)]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    for (model, s) in rows {
        w.serialize(ScoreRow {
            case_id: s.case_id.clone(),
            model: model.clone(),
            dsc_lumen: s.dsc_lumen,
            dsc_normal_wall: s.dsc_normal_wall,
            dsc_diseased_wall: s.dsc_diseased_wall,
            dsc_average: s.dsc_average,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<(String, CaseScore)>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<ScoreRow>()
        .map(|row| {
            let row = row?;
            Ok((
                row.model,
                CaseScore {
                    case_id: row.case_id,
                    dsc_lumen: row.dsc_lumen,
                    dsc_normal_wall: row.dsc_normal_wall,
                    dsc_diseased_wall: row.dsc_diseased_wall,
                    dsc_average: row.dsc_average,
                },
            ))
        })
        .collect()
}

pub fn write_table_csv(path: impl AsRef<Path>, rows: &[TableRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "cases", "dsc_lumen", "dsc_normal_wall", "dsc_diseased_wall", "dsc_average"])?;
    for r in rows {
        let mut rec = vec![r.model.clone(), r.cases.to_string()];
        rec.extend(r.means.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}
