//! Hungarian matching between queries and ground-truth instances, the
//! dice/BCE/cross-entropy losses, and the multi-layer training objective.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::decoder::PredictionSet;
use crate::error::{Error, Result};

/// One annotated instance: a binary mask over level-0 voxels plus its class.
#[derive(Clone, Debug)]
pub struct GroundTruthInstance {
    pub mask: Vec<bool>,
    pub class_id: usize,
}

impl GroundTruthInstance {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !self.mask.iter().any(|&b| b) {
            return Err(Error::Data("ground-truth instance with empty mask".into()));
        }
        if self.class_id >= num_classes {
            return Err(Error::Usage(format!(
                "instance class {} out of range (C = {})",
                self.class_id, num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub dice: f64,
    pub bce: f64,
    pub cl: f64,
    pub no_obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 2.0, bce: 5.0, cl: 2.0, no_obj: 0.1 }
    }
}

/// Result of one bipartite matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// (query, target) pairs, sorted by query index; |pairs| = min(K, K-hat).
    pub pairs: Vec<(usize, usize)>,
    /// Queries left without a target (supervised as no-object).
    pub unmatched_queries: Vec<usize>,
    /// Targets left without a query; non-empty only when K < K-hat, which
    /// signals a degenerate configuration.
    pub unmatched_targets: Vec<usize>,
    pub total_cost: f64,
}

const BCE_EPS: f64 = 1e-12;
const DICE_SMOOTHING: f64 = 1.0;

fn mask_tensor(shape: &[usize], mask: &[bool]) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

/// Soft dice loss 1 - (2 sum(p g) + s) / (sum p + sum g + s) with s = 1.
pub fn dice_loss(tape: &mut Tape, heatmap_row: TensorId, gt_mask: &[bool]) -> Result<TensorId> {
    if tape.value(heatmap_row).numel() != gt_mask.len() {
        return Err(Error::Dim(format!(
            "dice: heatmap has {} voxels, mask {}",
            tape.value(heatmap_row).numel(),
            gt_mask.len()
        )));
    }
    let g_sum = gt_mask.iter().filter(|&&b| b).count() as f64;
    let g = tape.constant(mask_tensor(tape.shape(heatmap_row), gt_mask));
    let pg = tape.mul(heatmap_row, g)?;
    let pg_sum = tape.sum(pg)?;
    let num = tape.scale(pg_sum, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTHING)?;
    let p_sum = tape.sum(heatmap_row)?;
    let den = tape.add_scalar(p_sum, g_sum + DICE_SMOOTHING)?;
    let inv = tape.recip(den)?;
    let frac = tape.mul(num, inv)?;
    let neg = tape.scale(frac, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean binary cross-entropy over all voxels, probabilities clamped away
/// from 0 and 1.
pub fn bce_mask_loss(tape: &mut Tape, heatmap_row: TensorId, gt_mask: &[bool]) -> Result<TensorId> {
    if tape.value(heatmap_row).numel() != gt_mask.len() {
        return Err(Error::Dim(format!(
            "bce: heatmap has {} voxels, mask {}",
            tape.value(heatmap_row).numel(),
            gt_mask.len()
        )));
    }
    let shape = tape.shape(heatmap_row).to_vec();
    let g = tape.constant(mask_tensor(&shape, gt_mask));
    let g_inv: Vec<bool> = gt_mask.iter().map(|&b| !b).collect();
    let gi = tape.constant(mask_tensor(&shape, &g_inv));
    let p = tape.clamp(heatmap_row, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(p)?;
    let one_minus = tape.scale(heatmap_row, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let q = tape.clamp(one_minus, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(g, log_p)?;
    let neg = tape.mul(gi, log_q)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both)?;
    tape.scale(m, -1.0)
}

/// Cross-entropy of one query's class logits; the no-object target (index C)
/// is down-weighted by lambda_no_obj.
pub fn class_ce_loss(
    tape: &mut Tape,
    class_logits: TensorId,
    row: usize,
    target: usize,
    num_classes: usize,
    weights: &LossWeights,
) -> Result<TensorId> {
    if target > num_classes {
        return Err(Error::Usage(format!(
            "class target {} out of range (no-object = {})",
            target, num_classes
        )));
    }
    let lsm = tape.log_softmax_rows(class_logits)?;
    let picked = tape.gather_elems(lsm, &[(row, target)])?;
    let w = if target == num_classes { weights.no_obj } else { 1.0 };
    tape.scale(picked, -w)
}

// -- detached per-pair costs --------------------------------------------------

fn dice_cost(p: &[f64], g: &[bool]) -> f64 {
    let mut pg = 0.0;
    let mut ps = 0.0;
    let mut gs = 0.0;
    for (pv, &gv) in p.iter().zip(g) {
        ps += pv;
        if gv {
            pg += pv;
            gs += 1.0;
        }
    }
    1.0 - (2.0 * pg + DICE_SMOOTHING) / (ps + gs + DICE_SMOOTHING)
}

fn bce_cost(p: &[f64], g: &[bool]) -> f64 {
    let mut s = 0.0;
    for (pv, &gv) in p.iter().zip(g) {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        s -= if gv { pc.ln() } else { (1.0 - pc).ln() };
    }
    s / p.len() as f64
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|v| v - lse).collect()
}

/// K x K-hat matching costs on detached values: 2 dice + 5 bce + 2 ce. The
/// classification term uses the target's class with no no-object scaling.
pub fn cost_matrix(
    tape: &Tape,
    pred: &PredictionSet,
    targets: &[GroundTruthInstance],
    weights: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let (k, m0) = tape.value(pred.heatmap).dims2()?;
    let (_, c1) = tape.value(pred.class_logits).dims2()?;
    let heat = tape.data(pred.heatmap);
    let logits = tape.data(pred.class_logits);
    let mut out = vec![vec![0.0; targets.len()]; k];
    for (qi, row) in out.iter_mut().enumerate() {
        let p = &heat[qi * m0..(qi + 1) * m0];
        let lsm = log_softmax_row(&logits[qi * c1..(qi + 1) * c1]);
        for (ti, t) in targets.iter().enumerate() {
            if t.mask.len() != m0 {
                return Err(Error::Dim(format!(
                    "target mask has {} voxels, heatmap {}",
                    t.mask.len(),
                    m0
                )));
            }
            row[ti] = weights.dice * dice_cost(p, &t.mask)
                + weights.bce * bce_cost(p, &t.mask)
                + weights.cl * -lsm[t.class_id];
        }
    }
    Ok(out)
}

/// Minimum-cost assignment of all rows for n <= m via the potential-based
/// O(n^2 m) shortest augmenting path method. Returns row -> column.
fn solve_rectangular(n: usize, m: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-indexed potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut p = vec![0usize; m + 1]; // column -> row (1-indexed, 0 = free)
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal injective matching of targets to queries. With K < K-hat the
/// excess targets go unmatched (degenerate configuration).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let k = cost.len();
    let k_hat = cost.first().map_or(0, |r| r.len());
    if k == 0 || k_hat == 0 {
        return Err(Error::Usage("hungarian: empty cost matrix".into()));
    }
    for row in cost {
        if row.len() != k_hat {
            return Err(Error::Dim("hungarian: ragged cost matrix".into()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("hungarian: non-finite cost".into()));
        }
    }
    let mut pairs: Vec<(usize, usize)> = if k_hat <= k {
        // rows = targets, all matched
        let t_to_q = solve_rectangular(k_hat, k, &|t, q| cost[q][t]);
        t_to_q.iter().enumerate().map(|(t, &q)| (q, t)).collect()
    } else {
        let q_to_t = solve_rectangular(k, k_hat, &|q, t| cost[q][t]);
        q_to_t.iter().enumerate().map(|(q, &t)| (q, t)).collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(q, t)| cost[q][t]).sum();
    let matched_q: Vec<bool> = {
        let mut v = vec![false; k];
        for &(q, _) in &pairs {
            v[q] = true;
        }
        v
    };
    let matched_t: Vec<bool> = {
        let mut v = vec![false; k_hat];
        for &(_, t) in &pairs {
            v[t] = true;
        }
        v
    };
    Ok(Assignment {
        pairs,
        unmatched_queries: (0..k).filter(|&q| !matched_q[q]).collect(),
        unmatched_targets: (0..k_hat).filter(|&t| !matched_t[t]).collect(),
        total_cost,
    })
}

/// One loss scalar per prediction set: each set is matched independently;
/// matched queries pay dice + BCE on their mask plus CE on their class,
/// unmatched queries pay down-weighted no-object CE.
pub fn layer_losses(
    tape: &mut Tape,
    preds: &[PredictionSet],
    targets: &[GroundTruthInstance],
    num_classes: usize,
    weights: &LossWeights,
) -> Result<Vec<TensorId>> {
    if preds.is_empty() {
        return Err(Error::Usage("layer_losses: no prediction sets".into()));
    }
    for t in targets {
        t.validate(num_classes)?;
    }
    let mut per_layer = Vec::with_capacity(preds.len());

    for pred in preds {
        let mut acc: Option<TensorId> = None;
        let mut add_term = |tape: &mut Tape, term: TensorId| -> Result<()> {
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
            Ok(())
        };
        let (k, _) = tape.value(pred.class_logits).dims2()?;
        let assignment = if targets.is_empty() {
            None
        } else {
            let cm = cost_matrix(tape, pred, targets, weights)?;
            Some(hungarian(&cm)?)
        };

        // per-query class targets and weights
        let mut class_target = vec![num_classes; k];
        if let Some(a) = &assignment {
            for &(q, t) in &a.pairs {
                class_target[q] = targets[t].class_id;

                // matched mask losses
                let row = tape.gather_rows(pred.heatmap, &[q])?;
                let d = dice_loss(tape, row, &targets[t].mask)?;
                let d = tape.scale(d, weights.dice)?;
                add_term(tape, d)?;
                let b = bce_mask_loss(tape, row, &targets[t].mask)?;
                let b = tape.scale(b, weights.bce)?;
                add_term(tape, b)?;
            }
        }

        let lsm = tape.log_softmax_rows(pred.class_logits)?;
        let idx: Vec<(usize, usize)> = class_target.iter().enumerate().map(|(q, &t)| (q, t)).collect();
        let picked = tape.gather_elems(lsm, &idx)?;
        let w_row: Vec<f64> = class_target
            .iter()
            .map(|&t| {
                let no_obj = if t == num_classes { weights.no_obj } else { 1.0 };
                -weights.cl * no_obj
            })
            .collect();
        let picked_shape = tape.shape(picked).to_vec();
        let w = tape.constant(Tensor::new(picked_shape, w_row)?);
        let weighted = tape.mul(picked, w)?;
        let ce = tape.sum(weighted)?;
        add_term(tape, ce)?;
        per_layer.push(acc.expect("at least the CE term"));
    }
    Ok(per_layer)
}

/// Multi-layer objective: the sum of every layer's matched loss.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[PredictionSet],
    targets: &[GroundTruthInstance],
    num_classes: usize,
    weights: &LossWeights,
) -> Result<TensorId> {
    let layers = layer_losses(tape, preds, targets, num_classes, weights)?;
    let mut acc = layers[0];
    for &l in &layers[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}
