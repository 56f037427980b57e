//! Confidence scoring, prediction postprocessing (threshold + DBSCAN split +
//! rescore), and the mAP / precision / recall metric suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{dbscan, VoxelGrid};

/// A final scene-level prediction over the input points.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub point_mask: Vec<bool>,
    pub class_id: usize,
    pub confidence: f64,
}

/// Ground truth lifted to point level for metric computation.
#[derive(Clone, Debug)]
pub struct GroundTruthObject {
    pub point_mask: Vec<bool>,
    pub class_id: usize,
}

/// One scene's predictions and annotations; metrics pool scenes but never
/// match across them.
#[derive(Clone, Debug, Default)]
pub struct SceneEval {
    pub preds: Vec<InstancePrediction>,
    pub gts: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    /// AP at IoU 0.5 for every class with ground truth.
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub mprec50: f64,
    pub mrec50: f64,
    /// True when there was nothing to predict and nothing predicted.
    pub degenerate: bool,
}

impl EvalReport {
    /// Diff-friendly key=value serialization, 6 decimal places.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map={:.6}", self.map);
        let _ = writeln!(s, "map50={:.6}", self.map50);
        let _ = writeln!(s, "map25={:.6}", self.map25);
        let _ = writeln!(s, "mprec50={:.6}", self.mprec50);
        let _ = writeln!(s, "mrec50={:.6}", self.mrec50);
        let _ = writeln!(s, "degenerate={}", self.degenerate);
        for (c, ap) in &self.per_class_ap50 {
            let _ = writeln!(s, "ap50_class_{}={:.6}", c, ap);
        }
        s
    }
}

/// Confidence of one query: class probability times the mean heatmap value
/// over active (> 0.5) voxels. Returns the chosen class and score, or None
/// when the query is no-object or activates nothing.
pub fn confidence(class_probs: &[f64], heatmap_row: &[f64]) -> Option<(usize, f64)> {
    let c1 = class_probs.len();
    let no_object = c1 - 1;
    let mut best = 0;
    for i in 1..c1 {
        if class_probs[i] > class_probs[best] {
            best = i;
        }
    }
    if best == no_object {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for &m in heatmap_row {
        if m > 0.5 {
            sum += m;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    Some((best, class_probs[best] * sum / count as f64))
}

/// Voxel-level instance before lifting to points.
#[derive(Clone, Debug)]
pub struct VoxelPrediction {
    pub voxel_mask: Vec<bool>,
    pub class_id: usize,
    pub confidence: f64,
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Binarize each query's heatmap, optionally split it into spatial clusters
/// with DBSCAN over voxel centers, and rescore each piece.
pub fn postprocess_voxels(
    heatmap: &[f64],
    class_logits: &[f64],
    k: usize,
    num_classes: usize,
    grid: &VoxelGrid,
    eps: f64,
    enable_dbscan: bool,
) -> Result<Vec<VoxelPrediction>> {
    let m0 = grid.num_voxels();
    if heatmap.len() != k * m0 || class_logits.len() != k * (num_classes + 1) {
        return Err(Error::Dim(format!(
            "postprocess: heatmap {} / logits {} inconsistent with K={} M0={} C={}",
            heatmap.len(),
            class_logits.len(),
            k,
            m0,
            num_classes
        )));
    }
    let mut out = Vec::new();
    for q in 0..k {
        let probs = softmax_row(&class_logits[q * (num_classes + 1)..(q + 1) * (num_classes + 1)]);
        let heat = &heatmap[q * m0..(q + 1) * m0];
        let Some((class_id, _)) = confidence(&probs, heat) else {
            continue;
        };
        let active: Vec<usize> = (0..m0).filter(|&v| heat[v] > 0.5).collect();

        let groups: Vec<Vec<usize>> = if enable_dbscan {
            let points: Vec<[f64; 3]> = active.iter().map(|&v| grid.center(v)).collect();
            let clusters = dbscan(&points, eps, 1)?;
            let mut groups = vec![Vec::new(); clusters.num_clusters];
            for (i, &v) in active.iter().enumerate() {
                groups[clusters.labels[i]].push(v);
            }
            groups
        } else {
            vec![active]
        };

        for group in groups {
            if group.is_empty() {
                continue;
            }
            let mut voxel_mask = vec![false; m0];
            let mut sum = 0.0;
            for &v in &group {
                voxel_mask[v] = true;
                sum += heat[v];
            }
            out.push(VoxelPrediction {
                voxel_mask,
                class_id,
                confidence: probs[class_id] * sum / group.len() as f64,
            });
        }
    }
    Ok(out)
}

/// Expand a voxel mask to the points that fell into those voxels.
pub fn lift_to_points(voxel_mask: &[bool], point_to_voxel: &[usize]) -> Vec<bool> {
    point_to_voxel.iter().map(|&v| voxel_mask[v]).collect()
}

/// Full postprocessing pipeline to point-level predictions.
pub fn postprocess(
    heatmap: &[f64],
    class_logits: &[f64],
    k: usize,
    num_classes: usize,
    grid: &VoxelGrid,
    eps: f64,
    enable_dbscan: bool,
) -> Result<Vec<InstancePrediction>> {
    let voxels = postprocess_voxels(heatmap, class_logits, k, num_classes, grid, eps, enable_dbscan)?;
    Ok(voxels
        .into_iter()
        .map(|v| InstancePrediction {
            point_mask: lift_to_points(&v.voxel_mask, &grid.point_to_voxel),
            class_id: v.class_id,
            confidence: v.confidence,
        })
        .collect())
}

/// Greedy confidence-ranked duplicate suppression: walk predictions from the
/// most confident down and drop any whose mask overlaps an already-kept
/// same-class prediction with IoU >= `iou_threshold`. With non-parametric
/// queries, sampling more of them at inference re-detects the same object
/// several times; this collapses those near-identical detections. Ties in
/// confidence keep the earlier prediction.
pub fn suppress_duplicates(
    preds: &[InstancePrediction],
    iou_threshold: f64,
) -> Vec<InstancePrediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<InstancePrediction> = Vec::new();
    for i in order {
        let p = &preds[i];
        let dup = kept
            .iter()
            .any(|k| k.class_id == p.class_id && mask_iou(&k.point_mask, &p.point_mask) >= iou_threshold);
        if !dup {
            kept.push(p.clone());
        }
    }
    kept
}

/// Intersection over union of two binary masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching of one class's detections (globally ranked by confidence,
/// matched within their own scene) into TP/FP flags plus the GT count.
fn match_class(scenes: &[SceneEval], class_id: usize, iou_t: f64) -> (Vec<bool>, usize) {
    // (confidence, scene, pred index), ranked by confidence descending with
    // deterministic tie-breaking
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    let mut num_gt = 0usize;
    for (si, sc) in scenes.iter().enumerate() {
        num_gt += sc.gts.iter().filter(|g| g.class_id == class_id).count();
        for (pi, p) in sc.preds.iter().enumerate() {
            if p.class_id == class_id {
                dets.push((p.confidence, si, pi));
            }
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gt_used: Vec<Vec<bool>> = scenes
        .iter()
        .map(|sc| vec![false; sc.gts.len()])
        .collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &(_, si, pi) in &dets {
        let pred = &scenes[si].preds[pi];
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (gi, gt) in scenes[si].gts.iter().enumerate() {
            if gt.class_id != class_id || gt_used[si][gi] {
                continue;
            }
            let iou = mask_iou(&pred.point_mask, &gt.point_mask);
            if iou > best_iou {
                best_iou = iou;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best_iou >= iou_t => {
                gt_used[si][gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    (tp_flags, num_gt)
}

fn ap_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    // precision at every detection rank, then the all-point interpolation
    // (running max of precision from the tail)
    let n = tp_flags.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    ap
}

/// Per-class average precision at one IoU threshold. Classes without ground
/// truth are absent from the result.
pub fn average_precision(scenes: &[SceneEval], iou_t: f64) -> BTreeMap<usize, f64> {
    let mut classes: Vec<usize> = scenes
        .iter()
        .flat_map(|sc| sc.gts.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let (flags, num_gt) = match_class(scenes, c, iou_t);
            (c, ap_from_flags(&flags, num_gt))
        })
        .collect()
}

fn mean_ap(scenes: &[SceneEval], iou_t: f64) -> f64 {
    let per_class = average_precision(scenes, iou_t);
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

/// Confidence floor applied before the precision/recall counts.
pub const PREC_RECALL_MIN_CONFIDENCE: f64 = 0.8;

/// The full metric suite over a batch of scenes.
pub fn map_suite(scenes: &[SceneEval]) -> EvalReport {
    let any_gt = scenes.iter().any(|sc| !sc.gts.is_empty());
    let any_pred = scenes.iter().any(|sc| !sc.preds.is_empty());
    if !any_gt && !any_pred {
        return EvalReport {
            map: 1.0,
            map50: 1.0,
            map25: 1.0,
            per_class_ap50: BTreeMap::new(),
            mprec50: 1.0,
            mrec50: 1.0,
            degenerate: true,
        };
    }

    let thresholds: Vec<f64> = (0..10).map(|i| 0.50 + 0.05 * i as f64).collect();
    let map = thresholds.iter().map(|&t| mean_ap(scenes, t)).sum::<f64>() / thresholds.len() as f64;

    // precision/recall at IoU 0.5 over confident predictions, no ranking
    let confident: Vec<SceneEval> = scenes
        .iter()
        .map(|sc| SceneEval {
            preds: sc
                .preds
                .iter()
                .filter(|p| p.confidence >= PREC_RECALL_MIN_CONFIDENCE)
                .cloned()
                .collect(),
            gts: sc.gts.clone(),
        })
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut num_gt = 0usize;
    for sc in &confident {
        num_gt += sc.gts.len();
        let mut used = vec![false; sc.gts.len()];
        for p in &sc.preds {
            let mut best_iou = 0.0;
            let mut best = None;
            for (gi, g) in sc.gts.iter().enumerate() {
                if g.class_id != p.class_id || used[gi] {
                    continue;
                }
                let iou = mask_iou(&p.point_mask, &g.point_mask);
                if iou > best_iou {
                    best_iou = iou;
                    best = Some(gi);
                }
            }
            if best_iou >= 0.5 {
                used[best.unwrap()] = true;
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let mprec50 = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let mrec50 = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };

    EvalReport {
        map,
        map50: mean_ap(scenes, 0.50),
        map25: mean_ap(scenes, 0.25),
        per_class_ap50: average_precision(scenes, 0.50),
        mprec50,
        mrec50,
        degenerate: false,
    }
}
