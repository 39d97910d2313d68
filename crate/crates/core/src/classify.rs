//! Detection-aware classification scoring.
//!
//! Rows are predictions (BK, ND, DP, SG, FN) and columns are targets (BK,
//! ND, DP, SG, FP, UN). A missed ground-truth instance lands in the FN row;
//! an unmatched proposal lands in the FP column. The UN column is never
//! scored.

use std::collections::BTreeMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::detect::MatchResult;
use crate::error::{Error, Result};
use crate::io::ClassCode;

pub const ROWS: [&str; 5] = ["BK", "ND", "DP", "SG", "FN"];
pub const COLUMNS: [&str; 6] = ["BK", "ND", "DP", "SG", "FP", "UN"];
pub const FN_ROW: usize = 4;
pub const FP_COL: usize = 4;
pub const UN_COL: usize = 5;

fn scored_index(c: ClassCode) -> Option<usize> {
    ClassCode::SCORED.iter().position(|s| *s == c)
}

fn column_of(c: ClassCode) -> usize {
    scored_index(c).unwrap_or(UN_COL)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MatrixJson", try_from = "MatrixJson")]
pub struct ConfusionMatrix {
    pub counts: [[u64; 6]; 5],
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: Vec<String>,
    columns: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl From<ConfusionMatrix> for MatrixJson {
    fn from(m: ConfusionMatrix) -> Self {
        MatrixJson {
            rows: ROWS.iter().map(|s| s.to_string()).collect(),
            columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
            counts: m.counts.iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<MatrixJson> for ConfusionMatrix {
    type Error = String;

    fn try_from(j: MatrixJson) -> std::result::Result<Self, String> {
        if j.rows != ROWS || j.columns != COLUMNS {
            return Err("confusion matrix axes must be BK,ND,DP,SG,FN x BK,ND,DP,SG,FP,UN".into());
        }
        let mut counts = [[0u64; 6]; 5];
        if j.counts.len() != 5 {
            return Err("confusion matrix needs 5 rows".into());
        }
        for (dst, src) in counts.iter_mut().zip(&j.counts) {
            *dst = src
                .as_slice()
                .try_into()
                .map_err(|_| "confusion matrix rows need 6 columns".to_string())?;
        }
        Ok(ConfusionMatrix { counts })
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn column_sum(&self, col: usize) -> u64 {
        self.counts.iter().map(|r| r[col]).sum()
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.counts.iter_mut().flatten().zip(rhs.counts.iter().flatten()) {
            *a += b;
        }
    }
}

impl Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), Add::add)
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>4}", "")?;
        for c in COLUMNS {
            write!(f, "{c:>7}")?;
        }
        writeln!(f)?;
        for (name, row) in ROWS.iter().zip(&self.counts) {
            write!(f, "{name:>4}")?;
            for v in row {
                write!(f, "{v:>7}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Builds the matrix for one scan.
///
/// Proposals below `conf_threshold` are discarded first. A ground-truth
/// instance hit by several surviving proposals takes the class of the most
/// confident one (ties to the smaller proposal id).
pub fn build_confusion(
    matched: &MatchResult,
    pred_classes: &BTreeMap<u32, ClassCode>,
    gt_classes: &BTreeMap<u32, ClassCode>,
    conf_threshold: f64,
) -> Result<ConfusionMatrix> {
    let mut pred_row = BTreeMap::new();
    for p in &matched.proposals {
        let class = *pred_classes.get(&p.proposal_id).ok_or(Error::MissingClass {
            what: "proposal",
            id: p.proposal_id,
        })?;
        let row = scored_index(class).ok_or(Error::UnclassifiedPrediction(p.proposal_id))?;
        pred_row.insert(p.proposal_id, row);
    }

    let mut m = ConfusionMatrix::default();
    for gt_id in &matched.gt_ids {
        let class = *gt_classes.get(gt_id).ok_or(Error::MissingClass {
            what: "ground-truth instance",
            id: *gt_id,
        })?;
        let best = matched.hit_map[gt_id]
            .iter()
            .map(|pid| matched.proposal(*pid).expect("hit proposal exists"))
            .filter(|p| p.confidence >= conf_threshold)
            .max_by(|a, b| {
                a.confidence
                    .total_cmp(&b.confidence)
                    .then(b.proposal_id.cmp(&a.proposal_id))
            });
        let row = best.map_or(FN_ROW, |p| pred_row[&p.proposal_id]);
        m.counts[row][column_of(class)] += 1;
    }
    for p in matched.fp_candidates().filter(|p| p.confidence >= conf_threshold) {
        m.counts[pred_row[&p.proposal_id]][FP_COL] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Full matrix (without UN).
    Overall,
    /// Without the FP column.
    TargetAware,
    /// Without the FP column and the FN row.
    PredictionAware,
}

impl F1Mode {
    pub const ALL: [F1Mode; 3] = [F1Mode::Overall, F1Mode::TargetAware, F1Mode::PredictionAware];

    fn rows(&self) -> &'static [usize] {
        match self {
            F1Mode::PredictionAware => &[0, 1, 2, 3],
            _ => &[0, 1, 2, 3, FN_ROW],
        }
    }

    fn columns(&self) -> &'static [usize] {
        match self {
            F1Mode::Overall => &[0, 1, 2, 3, FP_COL],
            _ => &[0, 1, 2, 3],
        }
    }
}

/// Per-class F1 for BK, ND, DP, SG and their unweighted mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    #[serde(rename = "BK")]
    pub bk: f64,
    #[serde(rename = "ND")]
    pub nd: f64,
    #[serde(rename = "DP")]
    pub dp: f64,
    #[serde(rename = "SG")]
    pub sg: f64,
    #[serde(rename = "macro")]
    pub macro_f1: f64,
}

impl F1Scores {
    pub fn per_class(&self) -> [f64; 4] {
        [self.bk, self.nd, self.dp, self.sg]
    }
}

/// Precision is measured along the prediction row, recall along the target
/// column, both restricted to the cells the mode keeps. 0/0 counts as 0.
pub fn f1_scores(matrix: &ConfusionMatrix, mode: F1Mode) -> F1Scores {
    let rows = mode.rows();
    let cols = mode.columns();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let f1: Vec<f64> = (0..4)
        .map(|c| {
            let tp = matrix.counts[c][c];
            let predicted: u64 = cols.iter().map(|&j| matrix.counts[c][j]).sum();
            let actual: u64 = rows.iter().map(|&i| matrix.counts[i][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    F1Scores {
        bk: f1[0],
        nd: f1[1],
        dp: f1[2],
        sg: f1[3],
        macro_f1: f1.iter().sum::<f64>() / 4.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub overall: F1Scores,
    pub target_aware: F1Scores,
    pub prediction_aware: F1Scores,
}

pub fn f1_report(matrix: &ConfusionMatrix) -> F1Report {
    F1Report {
        overall: f1_scores(matrix, F1Mode::Overall),
        target_aware: f1_scores(matrix, F1Mode::TargetAware),
        prediction_aware: f1_scores(matrix, F1Mode::PredictionAware),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::match_proposals;
    use crate::volume::{Dims, LabelMap, Spacing};

    fn line(labels: &[u32]) -> LabelMap {
        LabelMap::new(Dims::new(labels.len(), 1, 1).unwrap(), Spacing::UNIT, labels.to_vec()).unwrap()
    }

    fn classes(pairs: &[(u32, ClassCode)]) -> BTreeMap<u32, ClassCode> {
        pairs.iter().copied().collect()
    }

    use ClassCode::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = line(&[1, 0, 2, 0, 3, 0, 4]);
        let conf = [(1, 0.9), (2, 0.8), (3, 0.7), (4, 0.6)].into_iter().collect();
        let r = match_proposals("s", &gt, &conf, &gt, 0.2).unwrap();
        let cls = classes(&[(1, BK), (2, ND), (3, DP), (4, SG)]);
        let m = build_confusion(&r, &cls, &cls, 0.0).unwrap();
        for i in 0..4 {
            assert_eq!(m.counts[i][i], 1);
        }
        assert_eq!(m.total(), 4);
        let rep = f1_report(&m);
        assert_eq!(rep.overall.macro_f1, 1.0);
        assert_eq!(rep.target_aware.macro_f1, 1.0);
        assert_eq!(rep.prediction_aware.macro_f1, 1.0);
    }

    #[test]
    fn most_confident_hit_sets_the_row() {
        let gt = line(&[1, 1, 1, 1]);
        let pred = line(&[5, 5, 6, 6]);
        let conf = [(5, 0.9), (6, 0.8)].into_iter().collect();
        let r = match_proposals("s", &pred, &conf, &gt, 0.2).unwrap();
        let m = build_confusion(&r, &classes(&[(5, ND), (6, DP)]), &classes(&[(1, DP)]), 0.0).unwrap();
        let mut expect = ConfusionMatrix::default();
        expect.counts[1][2] = 1;
        assert_eq!(m, expect);
        let m = build_confusion(&r, &classes(&[(5, ND), (6, DP)]), &classes(&[(1, DP)]), 0.85).unwrap();
        assert_eq!(m.counts[1][2], 1);
        // Above every confidence the instance is missed.
        let m = build_confusion(&r, &classes(&[(5, ND), (6, DP)]), &classes(&[(1, DP)]), 0.95).unwrap();
        assert_eq!(m.counts[FN_ROW][2], 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn fp_and_fn_cells() {
        let gt = line(&[1, 0, 0]);
        let pred = line(&[0, 0, 3]);
        let conf = [(3, 0.4)].into_iter().collect();
        let r = match_proposals("s", &pred, &conf, &gt, 0.2).unwrap();
        let m = build_confusion(&r, &classes(&[(3, SG)]), &classes(&[(1, UN)]), 0.0).unwrap();
        assert_eq!(m.counts[3][FP_COL], 1);
        assert_eq!(m.counts[FN_ROW][UN_COL], 1);
        assert_eq!(m.counts[FN_ROW][FP_COL], 0);
    }

    #[test]
    fn un_prediction_rejected() {
        let gt = line(&[1]);
        let conf = [(1, 0.4)].into_iter().collect();
        let r = match_proposals("s", &gt, &conf, &gt, 0.2).unwrap();
        assert!(matches!(
            build_confusion(&r, &classes(&[(1, UN)]), &classes(&[(1, BK)]), 0.0),
            Err(Error::UnclassifiedPrediction(1))
        ));
        assert!(matches!(
            build_confusion(&r, &classes(&[]), &classes(&[(1, BK)]), 0.0),
            Err(Error::MissingClass { .. })
        ));
        assert!(matches!(
            build_confusion(&r, &classes(&[(1, BK)]), &classes(&[]), 0.0),
            Err(Error::MissingClass { .. })
        ));
    }

    #[test]
    fn absent_class_scores_zero() {
        let mut m = ConfusionMatrix::default();
        m.counts[1][1] = 3;
        m.counts[2][2] = 2;
        m.counts[3][3] = 1;
        let s = f1_scores(&m, F1Mode::Overall);
        assert_eq!(s.bk, 0.0);
        assert_eq!(s.macro_f1, 0.75);
    }

    #[test]
    fn modes_drop_fp_and_fn() {
        let mut m = ConfusionMatrix::default();
        m.counts[0][0] = 2;
        m.counts[0][FP_COL] = 2; // BK precision 0.5 overall
        m.counts[FN_ROW][0] = 2; // BK recall 0.5 unless FN dropped
        let o = f1_scores(&m, F1Mode::Overall);
        let t = f1_scores(&m, F1Mode::TargetAware);
        let p = f1_scores(&m, F1Mode::PredictionAware);
        assert_eq!(o.bk, 0.5);
        assert!((t.bk - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.bk, 1.0);
    }

    #[test]
    fn json_roundtrip_with_axes() {
        let mut m = ConfusionMatrix::default();
        m.counts[2][5] = 7;
        let j = serde_json::to_value(m).unwrap();
        assert_eq!(j["rows"][4], "FN");
        assert_eq!(j["columns"][5], "UN");
        assert_eq!(j["counts"][2][5], 7);
        assert_eq!(serde_json::from_value::<ConfusionMatrix>(j).unwrap(), m);
    }

    #[test]
    fn matrices_sum() {
        let mut a = ConfusionMatrix::default();
        a.counts[0][0] = 1;
        let total: ConfusionMatrix = [a, a, a].into_iter().sum();
        assert_eq!(total.counts[0][0], 3);
    }
}
