//! Brute-force reference implementations and random scene generators shared
//! by the integration and acceptance tests. The `oracle_*` functions and
//! `flood_fill` never call the library's matching, FROC, scoring, or
//! labeling code; the `check_*` helpers run both sides and compare.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribeval::io::ClassCode;
use ribeval::{Dims, LabelMap, Spacing, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One scan worth of labels, confidences, and classes.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub pred: LabelMap,
    pub gt: LabelMap,
    pub conf: BTreeMap<u32, f64>,
    pub pred_class: BTreeMap<u32, ClassCode>,
    pub gt_class: BTreeMap<u32, ClassCode>,
}

fn random_box(rng: &mut ChaCha8Rng, dims: Dims) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        let n = dims.0[a];
        let len = rng.random_range(2.min(n)..=(n / 2).max(2));
        lo[a] = rng.random_range(0..=n - len);
        hi[a] = lo[a] + len;
    }
    (lo, hi)
}

fn paint(labels: &mut LabelMap, (lo, hi): ([usize; 3], [usize; 3]), id: u32) {
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                labels.set([x, y, z], id);
            }
        }
    }
}

fn shifted(rng: &mut ChaCha8Rng, (lo, hi): ([usize; 3], [usize; 3]), dims: Dims) -> ([usize; 3], [usize; 3]) {
    let mut nlo = lo;
    let mut nhi = hi;
    for a in 0..3 {
        let d: i64 = rng.random_range(-1..=1);
        let grow: i64 = rng.random_range(0..=1);
        let l = (lo[a] as i64 + d).clamp(0, dims.0[a] as i64 - 1);
        let h = (hi[a] as i64 + d + grow).clamp(l + 1, dims.0[a] as i64);
        nlo[a] = l as usize;
        nhi[a] = h as usize;
    }
    (nlo, nhi)
}

pub fn random_class(rng: &mut ChaCha8Rng, allow_un: bool) -> ClassCode {
    let n = if allow_un { 5 } else { 4 };
    [ClassCode::BK, ClassCode::ND, ClassCode::DP, ClassCode::SG, ClassCode::UN][rng.random_range(0..n)]
}

/// Volumes up to 16^3, up to 5 ground-truth boxes, proposals that are mostly
/// jittered copies of ground truth plus a few strays. Ids are sparse and
/// later boxes may overwrite earlier ones. Confidences come from a coarse
/// grid so ties occur.
pub fn random_scene(seed: u64) -> Scene {
    let mut rng = rng(seed);
    let dims = Dims::new(
        rng.random_range(4..=16),
        rng.random_range(4..=16),
        rng.random_range(4..=16),
    )
    .unwrap();
    let mut gt = LabelMap::zeros(dims, Spacing::UNIT);
    let mut pred = LabelMap::zeros(dims, Spacing::UNIT);
    let mut boxes = Vec::new();
    let n_gt = rng.random_range(0..=5);
    for k in 0..n_gt {
        let b = random_box(&mut rng, dims);
        paint(&mut gt, b, 2 * k + rng.random_range(1..=2));
        boxes.push(b);
    }
    let mut next_pred = 1;
    for b in &boxes {
        for _ in 0..rng.random_range(0..=3) {
            paint(&mut pred, shifted(&mut rng, *b, dims), next_pred);
            next_pred += rng.random_range(1..=3);
        }
    }
    for _ in 0..rng.random_range(0..=2) {
        paint(&mut pred, random_box(&mut rng, dims), next_pred);
        next_pred += 1;
    }
    let mut conf = BTreeMap::new();
    let mut pred_class = BTreeMap::new();
    for id in pred.instance_ids() {
        let c = if rng.random_bool(0.5) {
            rng.random_range(0..=20) as f64 / 20.0
        } else {
            rng.random::<f64>()
        };
        conf.insert(id, c);
        pred_class.insert(id, random_class(&mut rng, false));
    }
    let gt_class = gt
        .instance_ids()
        .into_iter()
        .map(|id| (id, random_class(&mut rng, true)))
        .collect();
    Scene {
        id: format!("scan{seed:05}"),
        pred,
        gt,
        conf,
        pred_class,
        gt_class,
    }
}

fn voxel_sets(labels: &LabelMap) -> BTreeMap<u32, HashSet<usize>> {
    let mut sets: BTreeMap<u32, HashSet<usize>> = BTreeMap::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            sets.entry(l).or_default().insert(i);
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleProposal {
    pub id: u32,
    pub conf: f64,
    pub gt: Option<u32>,
    pub best_iou: f64,
    pub best_dice: f64,
}

#[derive(Debug, Clone)]
pub struct OracleScan {
    pub proposals: Vec<OracleProposal>,
    pub gt_ids: Vec<u32>,
    pub gt_class: BTreeMap<u32, ClassCode>,
    pub pred_class: BTreeMap<u32, ClassCode>,
}

impl OracleScan {
    pub fn hits_on(&self, gt: u32) -> impl Iterator<Item = &OracleProposal> {
        self.proposals.iter().filter(move |p| p.gt == Some(gt))
    }
}

/// All-pairs set intersection; each proposal takes the ground truth with
/// the highest IoU (smallest id on ties) and hits it when IoU >= threshold.
pub fn oracle_match(scene: &Scene, iou_threshold: f64) -> OracleScan {
    let preds = voxel_sets(&scene.pred);
    let gts = voxel_sets(&scene.gt);
    let proposals = preds
        .iter()
        .map(|(&pid, a)| {
            let mut best: Option<(u32, f64, f64)> = None;
            for (&gid, b) in &gts {
                let inter = a.intersection(b).count() as f64;
                if inter == 0.0 {
                    continue;
                }
                let iou = inter / (a.len() as f64 + b.len() as f64 - inter);
                let dice = 2.0 * inter / (a.len() as f64 + b.len() as f64);
                if best.is_none_or(|(_, bi, _)| iou > bi) {
                    best = Some((gid, iou, dice));
                }
            }
            let (gt, best_iou, best_dice) = match best {
                Some((g, iou, dice)) => ((iou >= iou_threshold).then_some(g), iou, dice),
                None => (None, 0.0, 0.0),
            };
            OracleProposal {
                id: pid,
                conf: scene.conf[&pid],
                gt,
                best_iou,
                best_dice,
            }
        })
        .collect();
    OracleScan {
        proposals,
        gt_ids: gts.keys().copied().collect(),
        gt_class: scene.gt_class.clone(),
        pred_class: scene.pred_class.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFroc {
    /// (threshold, false positives, hit ground truths), thresholds descending
    /// from +inf.
    pub sweep: Vec<(f64, usize, usize)>,
    pub points: Vec<(f64, f64)>,
    pub levels: Vec<f64>,
    pub avg: f64,
    pub max_sensitivity: f64,
    pub total_gt: usize,
}

/// Recounts every threshold from scratch.
pub fn oracle_froc(scans: &[OracleScan], fp_levels: &[f64]) -> OracleFroc {
    let mut confs: Vec<f64> = scans.iter().flat_map(|s| s.proposals.iter().map(|p| p.conf)).collect();
    confs.sort_by(|a, b| b.total_cmp(a));
    confs.dedup();
    let mut thresholds = vec![f64::INFINITY];
    thresholds.extend(confs);
    let total_gt: usize = scans.iter().map(|s| s.gt_ids.len()).sum();
    let n = scans.len() as f64;
    let mut sweep = Vec::new();
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut fp = 0;
        let mut hit = 0;
        for s in scans {
            fp += s.proposals.iter().filter(|p| p.gt.is_none() && p.conf >= t).count();
            hit += s.gt_ids.iter().filter(|g| s.hits_on(**g).any(|p| p.conf >= t)).count();
        }
        sweep.push((t, fp, hit));
        points.push((fp as f64 / n, hit as f64 / total_gt as f64));
    }
    let levels: Vec<f64> = fp_levels
        .iter()
        .map(|&l| points.iter().filter(|(f, _)| *f <= l).map(|(_, s)| *s).fold(0.0, f64::max))
        .collect();
    OracleFroc {
        avg: levels.iter().sum::<f64>() / levels.len() as f64,
        max_sensitivity: points.iter().map(|p| p.1).fold(0.0, f64::max),
        sweep,
        points,
        levels,
        total_gt,
    }
}

/// 5x6 matrix by direct recounting: rows BK ND DP SG FN, columns BK ND DP SG
/// FP UN.
pub fn oracle_confusion(scan: &OracleScan, conf_threshold: f64) -> [[u64; 6]; 5] {
    let idx = |c: ClassCode| match c {
        ClassCode::BK => 0,
        ClassCode::ND => 1,
        ClassCode::DP => 2,
        ClassCode::SG => 3,
        ClassCode::UN => 5,
    };
    let mut m = [[0u64; 6]; 5];
    for g in &scan.gt_ids {
        let mut best: Option<&OracleProposal> = None;
        for p in scan.hits_on(*g).filter(|p| p.conf >= conf_threshold) {
            if best.is_none_or(|b| p.conf > b.conf || (p.conf == b.conf && p.id < b.id)) {
                best = Some(p);
            }
        }
        let row = best.map_or(4, |p| idx(scan.pred_class[&p.id]));
        m[row][idx(scan.gt_class[g])] += 1;
    }
    for p in &scan.proposals {
        if p.gt.is_none() && p.conf >= conf_threshold {
            m[idx(scan.pred_class[&p.id])][4] += 1;
        }
    }
    m
}

/// One-vs-rest F1 per class from binary counts, macro-averaged. `drop_fp`
/// removes the FP column, `drop_fn` the FN row; UN never counts.
pub fn oracle_f1(m: &[[u64; 6]; 5], drop_fp: bool, drop_fn: bool) -> [f64; 5] {
    let rows: Vec<usize> = (0..5).filter(|r| !(drop_fn && *r == 4)).collect();
    let cols: Vec<usize> = (0..5).filter(|c| !(drop_fp && *c == 4)).collect();
    let mut out = [0.0; 5];
    for c in 0..4 {
        let tp = m[c][c];
        let fp: u64 = cols.iter().filter(|&&j| j != c).map(|&j| m[c][j]).sum();
        let fn_: u64 = rows.iter().filter(|&&i| i != c).map(|&i| m[i][c]).sum();
        let denom = 2 * tp + fp + fn_;
        out[c] = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    out[4] = (out[0] + out[1] + out[2] + out[3]) / 4.0;
    out
}

/// Breadth-first flood fill; labels numbered by the raster position of each
/// component's first voxel.
pub fn flood_fill(vol: &Volume, full: bool) -> Vec<u32> {
    let dims = vol.dims();
    let [nx, ny, nz] = dims.0;
    let mut labels = vec![0u32; dims.len()];
    let mut next = 0;
    let mut neighbours = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (!full && manhattan > 1) {
                    continue;
                }
                neighbours.push([dx, dy, dz]);
            }
        }
    }
    for start in 0..dims.len() {
        if vol.data()[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
            for d in &neighbours {
                let (a, b, c) = (x + d[0], y + d[1], z + d[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let j = a as usize + nx * (b as usize + ny * c as usize);
                if vol.data()[j] != 0.0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

pub fn random_binary(seed: u64, max_side: usize) -> Volume {
    let mut rng = rng(seed);
    let dims = Dims::new(
        rng.random_range(1..=max_side),
        rng.random_range(1..=max_side),
        rng.random_range(1..=max_side),
    )
    .unwrap();
    let density: f64 = rng.random_range(0.05..0.6);
    Volume::binary_from_fn(dims, Spacing::UNIT, |_| rng.random_bool(density))
}

/// Partition equality up to relabeling.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x == 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    let la: BTreeSet<_> = a.iter().filter(|v| **v != 0).collect();
    la.len() == fwd.len()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Runs the library on `scenes` and compares matching, per-threshold counts,
/// the FROC curve, and IoU/Dice against the oracle.
pub fn check_detection(scenes: &[Scene], iou_threshold: f64, fp_levels: &[f64]) -> Result<(), String> {
    use ribeval::detect::{froc, match_proposals};
    let mut results = Vec::new();
    let mut oracles = Vec::new();
    for s in scenes {
        let r = match_proposals(&s.id, &s.pred, &s.conf, &s.gt, iou_threshold).map_err(|e| e.to_string())?;
        let o = oracle_match(s, iou_threshold);
        if r.gt_ids != o.gt_ids {
            return Err(format!("{}: gt ids {:?} vs {:?}", s.id, r.gt_ids, o.gt_ids));
        }
        if r.proposals.len() != o.proposals.len() {
            return Err(format!("{}: proposal count", s.id));
        }
        for (p, q) in r.proposals.iter().zip(&o.proposals) {
            if p.proposal_id != q.id || p.matched_gt_id != q.gt || p.confidence != q.conf {
                return Err(format!("{}: proposal {} got {:?}, oracle {:?}", s.id, q.id, p, q));
            }
            if !close(p.iou, q.best_iou, 1e-12) || !close(p.dice, q.best_dice, 1e-12) {
                return Err(format!("{}: overlap of proposal {}", s.id, q.id));
            }
        }
        for g in &o.gt_ids {
            let mine: Vec<u32> = r.hit_map[g].clone();
            let theirs: Vec<u32> = o.hits_on(*g).map(|p| p.id).collect();
            if mine != theirs {
                return Err(format!("{}: hits on gt {g}: {mine:?} vs {theirs:?}", s.id));
            }
        }
        results.push(r);
        oracles.push(o);
    }
    let total_gt: usize = oracles.iter().map(|o| o.gt_ids.len()).sum();
    if total_gt == 0 {
        return match froc(&results, fp_levels) {
            Err(ribeval::Error::NoGroundTruth) => Ok(()),
            other => Err(format!("expected NoGroundTruth, got {other:?}")),
        };
    }
    let curve = froc(&results, fp_levels).map_err(|e| e.to_string())?;
    let oracle = oracle_froc(&oracles, fp_levels);
    if curve.total_gt as usize != oracle.total_gt || curve.points.len() != oracle.points.len() {
        return Err(format!(
            "curve shape: {} points / {} gt vs {} / {}",
            curve.points.len(),
            curve.total_gt,
            oracle.points.len(),
            oracle.total_gt
        ));
    }
    let n = scenes.len() as f64;
    for (p, (t, fp, hit)) in curve.points.iter().zip(&oracle.sweep) {
        // Counts recovered from the ratios must be exact integers.
        let fp_count = (p.avg_fp * n).round() as usize;
        let hit_count = (p.sensitivity * total_gt as f64).round() as usize;
        if fp_count != *fp || hit_count != *hit {
            return Err(format!("threshold {t}: ({fp_count}, {hit_count}) vs ({fp}, {hit})"));
        }
    }
    for (p, q) in curve.points.iter().zip(&oracle.points) {
        if !close(p.avg_fp, q.0, 1e-12) || !close(p.sensitivity, q.1, 1e-12) {
            return Err(format!("point {p:?} vs {q:?}"));
        }
    }
    for (l, q) in curve.level_sensitivities.iter().zip(&oracle.levels) {
        if !close(l.sensitivity, *q, 1e-12) {
            return Err(format!("level {}: {} vs {q}", l.fp_level, l.sensitivity));
        }
    }
    if !close(curve.avg_sensitivity, oracle.avg, 1e-12) || !close(curve.max_sensitivity, oracle.max_sensitivity, 1e-12) {
        return Err(format!("summary {} / {} vs {} / {}", curve.avg_sensitivity, curve.max_sensitivity, oracle.avg, oracle.max_sensitivity));
    }
    Ok(())
}

/// Library matrix and all three F1 modes against the oracle for one scene.
pub fn check_classification(scene: &Scene, conf_threshold: f64) -> Result<(), String> {
    use ribeval::classify::build_confusion;
    use ribeval::detect::match_proposals;
    let r = match_proposals(&scene.id, &scene.pred, &scene.conf, &scene.gt, 0.2).map_err(|e| e.to_string())?;
    let m = build_confusion(&r, &scene.pred_class, &scene.gt_class, conf_threshold).map_err(|e| e.to_string())?;
    let expected = oracle_confusion(&oracle_match(scene, 0.2), conf_threshold);
    if m.counts != expected {
        return Err(format!("{}: matrix\n{m}\nvs {expected:?}", scene.id));
    }
    check_f1(&m.counts)
}

pub fn check_f1(counts: &[[u64; 6]; 5]) -> Result<(), String> {
    use ribeval::classify::{f1_scores, ConfusionMatrix, F1Mode};
    let m = ConfusionMatrix { counts: *counts };
    for (mode, drop_fp, drop_fn) in [
        (F1Mode::Overall, false, false),
        (F1Mode::TargetAware, true, false),
        (F1Mode::PredictionAware, true, true),
    ] {
        let got = f1_scores(&m, mode);
        let want = oracle_f1(counts, drop_fp, drop_fn);
        let got = [got.bk, got.nd, got.dp, got.sg, got.macro_f1];
        if got.iter().zip(&want).any(|(a, b)| !close(*a, *b, 1e-12)) {
            return Err(format!("{mode:?}: {got:?} vs {want:?} for {counts:?}"));
        }
    }
    Ok(())
}
