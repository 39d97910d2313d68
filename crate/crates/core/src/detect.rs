//! Detection evaluation: proposal to ground-truth matching under an IoU hit
//! rule, FROC analysis over confidence thresholds, and overlap summaries.
//!
//! A proposal *hits* a ground-truth instance when their voxel IoU is at least
//! the hit threshold (0.2 by default). Each proposal is assigned to at most
//! one instance, the one with the largest IoU (ties go to the smaller id). A
//! ground-truth instance may collect several hits; extra hits are neither
//! true nor false positives and are only counted as duplicates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ClassCode;
use crate::volume::{ensure_same_dims, LabelMap};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.2;
pub const DEFAULT_FP_LEVELS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// Voxel-set overlap of two instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub dice: f64,
}

impl OverlapMetrics {
    pub fn from_counts(size_a: u64, size_b: u64, intersection: u64) -> Self {
        let union = size_a + size_b - intersection;
        if union == 0 {
            return OverlapMetrics { iou: 0.0, dice: 0.0 };
        }
        OverlapMetrics {
            iou: intersection as f64 / union as f64,
            dice: 2.0 * intersection as f64 / (size_a + size_b) as f64,
        }
    }
}

/// IoU and Dice between instance `id_a` of `a` and instance `id_b` of `b`.
/// Both are 0 when both sets are empty.
pub fn overlap_metrics(a: &LabelMap, id_a: u32, b: &LabelMap, id_b: u32) -> Result<OverlapMetrics> {
    ensure_same_dims(a.dims(), b.dims())?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        let ia = la == id_a;
        let ib = lb == id_b;
        na += ia as u64;
        nb += ib as u64;
        both += (ia && ib) as u64;
    }
    Ok(OverlapMetrics::from_counts(na, nb, both))
}

/// Non-empty intersection between a proposal and a ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub proposal_id: u32,
    pub gt_id: u32,
    pub intersection: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub proposal_id: u32,
    pub confidence: f64,
    pub voxel_count: u64,
    /// Ground truth this proposal hits, if any.
    pub matched_gt_id: Option<u32>,
    /// Ground truth with the largest IoU, hit or not.
    pub best_gt_id: Option<u32>,
    /// IoU and Dice against `best_gt_id` (0 when nothing overlaps).
    pub iou: f64,
    pub dice: f64,
    pub class_code: Option<ClassCode>,
}

impl ProposalRecord {
    pub fn is_hit(&self) -> bool {
        self.matched_gt_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub scan_id: String,
    pub iou_threshold: f64,
    /// Sorted by proposal id.
    pub proposals: Vec<ProposalRecord>,
    /// Sorted ground-truth ids with their voxel counts.
    pub gt_ids: Vec<u32>,
    pub gt_voxel_counts: Vec<u64>,
    pub gt_classes: BTreeMap<u32, ClassCode>,
    /// Every ground-truth id, mapped to the proposals hitting it.
    pub hit_map: BTreeMap<u32, Vec<u32>>,
    /// All non-empty proposal/ground-truth intersections.
    pub overlaps: Vec<Overlap>,
}

impl MatchResult {
    pub fn fp_candidates(&self) -> impl Iterator<Item = &ProposalRecord> {
        self.proposals.iter().filter(|p| !p.is_hit())
    }

    pub fn num_gt(&self) -> usize {
        self.gt_ids.len()
    }

    pub fn num_hit_gt(&self) -> usize {
        self.hit_map.values().filter(|h| !h.is_empty()).count()
    }

    /// Hits beyond the first on each ground-truth instance.
    pub fn duplicate_hits(&self) -> usize {
        self.hit_map.values().map(|h| h.len().saturating_sub(1)).sum()
    }

    pub fn proposal(&self, id: u32) -> Option<&ProposalRecord> {
        self.proposals
            .binary_search_by_key(&id, |p| p.proposal_id)
            .ok()
            .map(|i| &self.proposals[i])
    }

    pub fn gt_voxel_count(&self, gt_id: u32) -> Option<u64> {
        self.gt_ids
            .binary_search(&gt_id)
            .ok()
            .map(|i| self.gt_voxel_counts[i])
    }

    /// Attaches class codes for per-category reporting. Missing entries are
    /// left as `None`.
    pub fn attach_classes(
        &mut self,
        pred_classes: &BTreeMap<u32, ClassCode>,
        gt_classes: &BTreeMap<u32, ClassCode>,
    ) {
        for p in &mut self.proposals {
            p.class_code = pred_classes.get(&p.proposal_id).copied();
        }
        self.gt_classes = self
            .gt_ids
            .iter()
            .filter_map(|g| gt_classes.get(g).map(|c| (*g, *c)))
            .collect();
    }
}

// Labels above this use a hash map instead of a dense count table.
const DENSE_LABEL_LIMIT: u32 = 1 << 24;

fn label_counts(data: &[u32]) -> BTreeMap<u32, u64> {
    let max = data.iter().copied().max().unwrap_or(0);
    if max <= DENSE_LABEL_LIMIT {
        let mut counts = vec![0u64; max as usize + 1];
        for &l in data {
            counts[l as usize] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .skip(1)
            .filter(|(_, c)| *c > 0)
            .map(|(l, c)| (l as u32, c))
            .collect()
    } else {
        let mut counts: HashMap<u32, u64> = HashMap::new();
        for &l in data.iter().filter(|l| **l != 0) {
            *counts.entry(l).or_default() += 1;
        }
        counts.into_iter().collect()
    }
}

fn intersections(pred: &[u32], gt: &[u32]) -> Vec<Overlap> {
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut last = (0u32, 0u32);
    let mut run = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == 0 || g == 0 {
            continue;
        }
        if (p, g) == last {
            run += 1;
        } else {
            if run > 0 {
                *counts.entry(last).or_default() += run;
            }
            last = (p, g);
            run = 1;
        }
    }
    if run > 0 {
        *counts.entry(last).or_default() += run;
    }
    let mut v: Vec<Overlap> = counts
        .into_iter()
        .map(|((p, g), n)| Overlap {
            proposal_id: p,
            gt_id: g,
            intersection: n,
        })
        .collect();
    v.sort_by_key(|o| (o.proposal_id, o.gt_id));
    v
}

/// Exact comparison of `i1 / u1` against `i2 / u2`.
fn cmp_ratio(i1: u64, u1: u64, i2: u64, u2: u64) -> Ordering {
    (i1 as u128 * u2 as u128).cmp(&(i2 as u128 * u1 as u128))
}

/// Matches the proposals of one scan against its ground truth.
///
/// `confidences` must cover every positive label of `pred`; values must lie
/// in [0, 1].
pub fn match_proposals(
    scan_id: &str,
    pred: &LabelMap,
    confidences: &BTreeMap<u32, f64>,
    gt: &LabelMap,
    iou_threshold: f64,
) -> Result<MatchResult> {
    ensure_same_dims(pred.dims(), gt.dims())?;
    if !(iou_threshold.is_finite() && iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "IoU threshold {iou_threshold} must lie in (0, 1]"
        )));
    }
    let pred_counts = label_counts(pred.data());
    let gt_counts = label_counts(gt.data());
    for &id in pred_counts.keys() {
        match confidences.get(&id) {
            None => return Err(Error::MissingConfidence(id)),
            Some(c) if !(0.0..=1.0).contains(c) => {
                return Err(Error::ConfidenceRange { id, value: *c })
            }
            _ => {}
        }
    }
    let overlaps = intersections(pred.data(), gt.data());

    let mut hit_map: BTreeMap<u32, Vec<u32>> = gt_counts.keys().map(|g| (*g, Vec::new())).collect();
    let mut proposals = Vec::with_capacity(pred_counts.len());
    let mut cursor = 0;
    for (&pid, &psize) in &pred_counts {
        // `overlaps` is sorted by proposal id; walk the block for `pid`.
        let start = cursor;
        while cursor < overlaps.len() && overlaps[cursor].proposal_id == pid {
            cursor += 1;
        }
        let mut best: Option<(u32, u64, u64)> = None; // (gt, intersection, union)
        for o in &overlaps[start..cursor] {
            let gsize = gt_counts[&o.gt_id];
            let union = psize + gsize - o.intersection;
            let better = match best {
                None => true,
                // Ascending gt order: only a strictly larger IoU replaces.
                Some((_, bi, bu)) => cmp_ratio(o.intersection, union, bi, bu) == Ordering::Greater,
            };
            if better {
                best = Some((o.gt_id, o.intersection, union));
            }
        }
        let (best_gt_id, metrics) = match best {
            Some((g, i, _)) => (Some(g), OverlapMetrics::from_counts(psize, gt_counts[&g], i)),
            None => (None, OverlapMetrics { iou: 0.0, dice: 0.0 }),
        };
        let matched_gt_id = best_gt_id.filter(|_| metrics.iou >= iou_threshold);
        if let Some(g) = matched_gt_id {
            hit_map.get_mut(&g).expect("gt id present").push(pid);
        }
        proposals.push(ProposalRecord {
            proposal_id: pid,
            confidence: confidences[&pid],
            voxel_count: psize,
            matched_gt_id,
            best_gt_id,
            iou: metrics.iou,
            dice: metrics.dice,
            class_code: None,
        });
    }

    Ok(MatchResult {
        scan_id: scan_id.to_string(),
        iou_threshold,
        proposals,
        gt_ids: gt_counts.keys().copied().collect(),
        gt_voxel_counts: gt_counts.values().copied().collect(),
        gt_classes: BTreeMap::new(),
        hit_map,
        overlaps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub avg_fp: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSensitivity {
    pub fp_level: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// One point per candidate threshold, from +inf down to the lowest
    /// confidence; both coordinates are non-decreasing.
    pub points: Vec<FrocPoint>,
    /// In the order the levels were requested.
    pub level_sensitivities: Vec<LevelSensitivity>,
    pub avg_sensitivity: f64,
    pub max_sensitivity: f64,
    pub avg_fp_total: f64,
    pub total_gt: u64,
    pub num_scans: usize,
}

impl FrocCurve {
    pub fn sensitivity_at(&self, fp_level: f64) -> Option<f64> {
        self.level_sensitivities
            .iter()
            .find(|l| l.fp_level == fp_level)
            .map(|l| l.sensitivity)
    }

    /// `avg_fp,sensitivity` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("avg_fp,sensitivity\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.avg_fp, p.sensitivity));
        }
        s
    }
}

fn validate_fp_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidParameter("at least one FP level is required".into()));
    }
    if let Some(l) = levels.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidParameter(format!("FP level {l} must be finite and >= 0")));
    }
    Ok(())
}

/// FROC analysis pooled over scans.
///
/// Thresholds are swept from +inf down through every distinct proposal
/// confidence. At threshold `t`, a ground-truth instance counts as detected
/// when some proposal hitting it has confidence >= `t`, and every unmatched
/// proposal with confidence >= `t` is a false positive. The sensitivity at
/// an FP level is the best sensitivity among thresholds whose average FP per
/// scan does not exceed the level (step function, no interpolation).
pub fn froc(results: &[MatchResult], fp_levels: &[f64]) -> Result<FrocCurve> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no scans to evaluate"));
    }
    validate_fp_levels(fp_levels)?;
    let total_gt: u64 = results.iter().map(|r| r.num_gt() as u64).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let num_scans = results.len();

    // Each event lowers the threshold to `conf` and adds `tp` detected GTs
    // and `fp` false positives.
    let mut events: Vec<(f64, u64, u64)> = Vec::new();
    for r in results {
        for (_, hits) in r.hit_map.iter().filter(|(_, h)| !h.is_empty()) {
            let best = hits
                .iter()
                .map(|p| r.proposal(*p).expect("hit proposal exists").confidence)
                .fold(f64::NEG_INFINITY, f64::max);
            events.push((best, 1, 0));
        }
        for p in &r.proposals {
            // Duplicates and non-best hits still define candidate thresholds.
            events.push((p.confidence, 0, (!p.is_hit()) as u64));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let point = |tp: u64, fp: u64| FrocPoint {
        avg_fp: fp as f64 / num_scans as f64,
        sensitivity: tp as f64 / total_gt as f64,
    };
    let mut points = vec![point(0, 0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            tp += events[i].1;
            fp += events[i].2;
            i += 1;
        }
        points.push(point(tp, fp));
    }

    let level_sensitivities: Vec<LevelSensitivity> = fp_levels
        .iter()
        .map(|&level| LevelSensitivity {
            fp_level: level,
            sensitivity: points
                .iter()
                .filter(|p| p.avg_fp <= level)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max),
        })
        .collect();
    let avg_sensitivity = level_sensitivities.iter().map(|l| l.sensitivity).sum::<f64>()
        / level_sensitivities.len() as f64;
    let last = *points.last().expect("at least the +inf point");

    Ok(FrocCurve {
        points,
        level_sensitivities,
        avg_sensitivity,
        max_sensitivity: last.sensitivity,
        avg_fp_total: last.avg_fp,
        total_gt,
        num_scans,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRecord {
    pub scan_id: String,
    pub proposal_id: u32,
    pub matched: bool,
    /// Matched ground truth, or the best-overlapping one for false positives.
    pub gt_id: Option<u32>,
    pub iou: f64,
    pub dice: f64,
    pub pred_class: Option<ClassCode>,
    pub gt_class: Option<ClassCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegSummary {
    pub include_fp: bool,
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub records: Vec<SegRecord>,
}

/// Instance-level mean IoU and Dice. With `include_fp` every proposal
/// contributes (false positives with their best IoU, 0 if they overlap
/// nothing); otherwise only hits. Returns [`Error::EmptySummary`] when no
/// proposal qualifies.
pub fn seg_metric_summary(results: &[MatchResult], include_fp: bool) -> Result<SegSummary> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no scans to summarise"));
    }
    let records: Vec<SegRecord> = results
        .iter()
        .flat_map(|r| {
            r.proposals
                .iter()
                .filter(move |p| include_fp || p.is_hit())
                .map(move |p| {
                    let gt_id = p.matched_gt_id.or(p.best_gt_id);
                    SegRecord {
                        scan_id: r.scan_id.clone(),
                        proposal_id: p.proposal_id,
                        matched: p.is_hit(),
                        gt_id,
                        iou: p.iou,
                        dice: p.dice,
                        pred_class: p.class_code,
                        gt_class: gt_id.and_then(|g| r.gt_classes.get(&g).copied()),
                    }
                })
        })
        .collect();
    if records.is_empty() {
        return Err(Error::EmptySummary);
    }
    let n = records.len() as f64;
    Ok(SegSummary {
        include_fp,
        mean_iou: records.iter().map(|r| r.iou).sum::<f64>() / n,
        mean_dice: records.iter().map(|r| r.dice).sum::<f64>() / n,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DetectionCategory {
    Tp,
    Fp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub scan_id: String,
    pub proposal_id: u32,
    pub confidence: f64,
    pub iou: f64,
    pub category: DetectionCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissedInstance {
    pub scan_id: String,
    pub gt_id: u32,
    /// Overlapping proposal with the largest IoU against this instance.
    pub nearest_proposal_id: Option<u32>,
    pub nearest_confidence: Option<f64>,
    pub nearest_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub proposals: Vec<ConfidenceEntry>,
    pub false_negatives: Vec<MissedInstance>,
}

impl ConfidenceReport {
    pub fn count(&self, category: DetectionCategory) -> usize {
        self.proposals.iter().filter(|e| e.category == category).count()
    }
}

/// Per-proposal (confidence, IoU, TP/FP) tuples and the missed instances.
pub fn confidence_report(results: &[MatchResult]) -> ConfidenceReport {
    let mut proposals = Vec::new();
    let mut false_negatives = Vec::new();
    for r in results {
        for p in &r.proposals {
            proposals.push(ConfidenceEntry {
                scan_id: r.scan_id.clone(),
                proposal_id: p.proposal_id,
                confidence: p.confidence,
                iou: p.iou,
                category: if p.is_hit() {
                    DetectionCategory::Tp
                } else {
                    DetectionCategory::Fp
                },
            });
        }
        for (&gt_id, hits) in &r.hit_map {
            if !hits.is_empty() {
                continue;
            }
            let gsize = r.gt_voxel_count(gt_id).expect("gt in table");
            let mut nearest: Option<(&ProposalRecord, u64, u64)> = None;
            for o in r.overlaps.iter().filter(|o| o.gt_id == gt_id) {
                let p = r.proposal(o.proposal_id).expect("overlap proposal exists");
                let union = p.voxel_count + gsize - o.intersection;
                let better = match nearest {
                    None => true,
                    Some((_, bi, bu)) => cmp_ratio(o.intersection, union, bi, bu) == Ordering::Greater,
                };
                if better {
                    nearest = Some((p, o.intersection, union));
                }
            }
            false_negatives.push(MissedInstance {
                scan_id: r.scan_id.clone(),
                gt_id,
                nearest_proposal_id: nearest.map(|(p, _, _)| p.proposal_id),
                nearest_confidence: nearest.map(|(p, _, _)| p.confidence),
                nearest_iou: nearest.map_or(0.0, |(_, i, u)| i as f64 / u as f64),
            });
        }
    }
    ConfidenceReport {
        proposals,
        false_negatives,
    }
}
