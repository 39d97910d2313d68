//! Serializable evaluation reports.

use serde::{Deserialize, Serialize};

use crate::classify::{f1_report, ConfusionMatrix, F1Report};
use crate::detect::{froc, seg_metric_summary, FrocCurve, FrocPoint, LevelSensitivity, MatchResult};
use crate::error::{Error, Result};
use crate::labeling::Connectivity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub scan_id: String,
    pub num_gt: usize,
    pub num_proposals: usize,
    pub hit_gt: usize,
    pub false_positives: usize,
    pub duplicate_hits: usize,
}

impl ScanSummary {
    pub fn from_result(r: &MatchResult) -> Self {
        ScanSummary {
            scan_id: r.scan_id.clone(),
            num_gt: r.num_gt(),
            num_proposals: r.proposals.len(),
            hit_gt: r.num_hit_gt(),
            false_positives: r.fp_candidates().count(),
            duplicate_hits: r.duplicate_hits(),
        }
    }
}

/// Detection report. The include-FP overlap means are the headline values;
/// the hit-only variants are reported alongside. Means are `null` when no
/// proposal qualifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub iou_threshold: f64,
    pub connectivity: Connectivity,
    pub fp_levels: Vec<f64>,
    pub level_sensitivities: Vec<LevelSensitivity>,
    pub avg_sensitivity: f64,
    pub max_sensitivity: f64,
    pub avg_fp: f64,
    pub total_gt: u64,
    pub num_scans: usize,
    pub mean_iou_incl_fp: Option<f64>,
    pub mean_dice_incl_fp: Option<f64>,
    pub mean_iou_excl_fp: Option<f64>,
    pub mean_dice_excl_fp: Option<f64>,
    /// Sensitivity at an FP level is read off the FROC step function; there
    /// is no interpolation between operating points.
    pub threshold_rule: String,
    pub froc: Vec<FrocPoint>,
    pub per_scan: Vec<ScanSummary>,
}

fn optional_means(results: &[MatchResult], include_fp: bool) -> Result<(Option<f64>, Option<f64>)> {
    match seg_metric_summary(results, include_fp) {
        Ok(s) => Ok((Some(s.mean_iou), Some(s.mean_dice))),
        Err(Error::EmptySummary) => Ok((None, None)),
        Err(e) => Err(e),
    }
}

impl DetectionReport {
    /// `results` should already be in canonical (sorted scan id) order.
    pub fn build(results: &[MatchResult], fp_levels: &[f64], connectivity: Connectivity) -> Result<Self> {
        let curve: FrocCurve = froc(results, fp_levels)?;
        let (mean_iou_incl_fp, mean_dice_incl_fp) = optional_means(results, true)?;
        let (mean_iou_excl_fp, mean_dice_excl_fp) = optional_means(results, false)?;
        Ok(DetectionReport {
            iou_threshold: results[0].iou_threshold,
            connectivity,
            fp_levels: fp_levels.to_vec(),
            level_sensitivities: curve.level_sensitivities,
            avg_sensitivity: curve.avg_sensitivity,
            max_sensitivity: curve.max_sensitivity,
            avg_fp: curve.avg_fp_total,
            total_gt: curve.total_gt,
            num_scans: curve.num_scans,
            mean_iou_incl_fp,
            mean_dice_incl_fp,
            mean_iou_excl_fp,
            mean_dice_excl_fp,
            threshold_rule: "step".into(),
            froc: curve.points,
            per_scan: results.iter().map(ScanSummary::from_result).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub connectivity: Connectivity,
    pub matrix: ConfusionMatrix,
    pub f1: F1Report,
}

impl ClassificationReport {
    pub fn new(matrix: ConfusionMatrix, conf_threshold: f64, iou_threshold: f64, connectivity: Connectivity) -> Self {
        ClassificationReport {
            conf_threshold,
            iou_threshold,
            connectivity,
            matrix,
            f1: f1_report(&matrix),
        }
    }
}
