//! Self-check suites runnable from the CLI: each re-derives expected results
//! with an independent method (finite differences, exhaustive matching,
//! from-scratch PR curves, naive geometry) and counts agreements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seg3d_core::backbone::BackboneConfig;
use seg3d_core::decoder::{DecoderConfig, Phase, QueryInit};
use seg3d_core::evaluation::{map_suite, GroundTruthObject, InstancePrediction, SceneEval};
use seg3d_core::geometry::{
    dbscan, farthest_point_sampling, voxelize, FpsStart, PointCloud,
};
use seg3d_core::model::{ground_truth_voxels, Model, ModelConfig};
use seg3d_core::scenegen::{generate_scene, SceneSpec};
use seg3d_core::supervision::{hungarian, total_loss, LossWeights};
use seg3d_core::{Error, Result};

pub struct SuiteOutcome {
    pub name: &'static str,
    pub checks: usize,
    pub failed: usize,
}

impl SuiteOutcome {
    pub fn report(&self) -> String {
        format!(
            "suite={} checks={} passed={} failed={}",
            self.name,
            self.checks,
            self.checks - self.failed,
            self.failed
        )
    }
}

pub fn run_suite(name: &str) -> Result<SuiteOutcome> {
    let outcome = match name {
        "grad" => grad_suite()?,
        "hungarian" => hungarian_suite()?,
        "metrics" => metrics_suite(),
        "geometry" => geometry_suite()?,
        other => {
            return Err(Error::Usage(format!(
                "unknown suite '{}': expected grad|hungarian|metrics|geometry",
                other
            )))
        }
    };
    if outcome.failed > 0 {
        println!("{}", outcome.report());
        return Err(Error::Numeric(format!(
            "{} suite: {}/{} checks failed",
            outcome.name, outcome.failed, outcome.checks
        )));
    }
    Ok(outcome)
}

/// Finite-difference check of the full loss gradient on a tiny model.
fn grad_suite() -> Result<SuiteOutcome> {
    let cfg = ModelConfig {
        backbone: BackboneConfig { widths: vec![8, 12], feature_dim: 12 },
        decoder: DecoderConfig {
            num_queries: 4,
            heads: 2,
            ffn_dim: 16,
            levels_attended: 1,
            iterations: 1,
            voxel_sample_limit: 4096,
            num_classes: 4,
            init_mode: QueryInit::FpsZeros,
            use_self_attention: true,
        },
        voxel_size: 0.4,
    };
    let spec = SceneSpec { instance_count: (2, 2), ..SceneSpec::default() };
    let scene = generate_scene(&spec, 11)?;
    let weights = LossWeights::default();

    let loss_of = |model: &Model| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = model.forward(&scene, Phase::Infer, None, &mut rng)?;
        let gts = ground_truth_voxels(&scene, &out.grid)?;
        let l = total_loss(&mut out.tape, &out.preds, &gts, cfg.decoder.num_classes, &weights)?;
        Ok(out.tape.data(l)[0])
    };

    let mut model = Model::init(cfg.clone(), 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = model.forward(&scene, Phase::Infer, None, &mut rng)?;
    let gts = ground_truth_voxels(&scene, &out.grid)?;
    let l = total_loss(&mut out.tape, &out.preds, &gts, cfg.decoder.num_classes, &weights)?;
    out.tape.backward(l)?;
    let mut analytic: Vec<(String, usize, f64)> = Vec::new();
    for (name, &id) in out.binder.bound() {
        if let Some(g) = out.tape.grad(id) {
            for (i, &gi) in g.iter().enumerate() {
                analytic.push((name.clone(), i, gi));
            }
        }
    }
    drop(out);
    // bound() iterates a HashMap; sort so sampled coordinates are stable
    analytic.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut pick = ChaCha8Rng::seed_from_u64(2);
    let mut failed = 0;
    let checks = 20;
    let h = 1e-5;
    for _ in 0..checks {
        let (name, i, g) = analytic[pick.gen_range(0..analytic.len())].clone();
        let orig = model.params.map.get(&name).unwrap().data[i];
        model.params.map.get_mut(&name).unwrap().data[i] = orig + h;
        let up = loss_of(&model)?;
        model.params.map.get_mut(&name).unwrap().data[i] = orig - h;
        let down = loss_of(&model)?;
        model.params.map.get_mut(&name).unwrap().data[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        if rel >= 1e-4 {
            println!("grad mismatch {}[{}]: analytic {} vs fd {} (rel {})", name, i, g, fd, rel);
            failed += 1;
        }
    }
    Ok(SuiteOutcome { name: "grad", checks, failed })
}

/// Exhaustive minimum-cost assignment over all injections of the smaller
/// side into the larger one.
fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost[0].len();
    let (rows, transposed) = if n <= m { (n, false) } else { (m, true) };
    let cols = if transposed { n } else { m };
    let at = |r: usize, c: usize| if transposed { cost[c][r] } else { cost[r][c] };
    let mut best = f64::INFINITY;
    let mut used = vec![false; cols];
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        acc: f64,
        used: &mut Vec<bool>,
        best: &mut f64,
        at: &dyn Fn(usize, usize) -> f64,
    ) {
        if r == rows {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(r + 1, rows, cols, acc + at(r, c), used, best, at);
                used[c] = false;
            }
        }
    }
    rec(0, rows, cols, 0.0, &mut used, &mut best, &at);
    best
}

fn hungarian_suite() -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let checks = 1000;
    let mut failed = 0;
    for _ in 0..checks {
        let n = rng.gen_range(1..=7);
        let m = rng.gen_range(1..=7);
        let cost: Vec<Vec<f64>> =
            (0..n).map(|_| (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let a = hungarian(&cost)?;
        let oracle = brute_force_cost(&cost);
        if (a.total_cost - oracle).abs() > 1e-9 {
            failed += 1;
        }
    }
    Ok(SuiteOutcome { name: "hungarian", checks, failed })
}

/// From-scratch AP@0.5: own IoU, own global ranking, own interpolation.
fn oracle_map50(scenes: &[SceneEval]) -> f64 {
    let mut classes: Vec<usize> =
        scenes.iter().flat_map(|s| s.gts.iter().map(|g| g.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let iou = |a: &[bool], b: &[bool]| -> f64 {
        let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count() as f64;
        let uni = a.iter().zip(b).filter(|(&x, &y)| x || y).count() as f64;
        if uni == 0.0 {
            0.0
        } else {
            inter / uni
        }
    };
    let mut total = 0.0;
    for &cls in &classes {
        // (confidence, scene, prediction index) pooled over scenes
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (s, sc) in scenes.iter().enumerate() {
            for (p, pr) in sc.preds.iter().enumerate() {
                if pr.class_id == cls {
                    dets.push((pr.confidence, s, p));
                }
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let num_gt: usize =
            scenes.iter().map(|s| s.gts.iter().filter(|g| g.class_id == cls).count()).sum();
        let mut taken: Vec<Vec<bool>> =
            scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
        let mut tp_flags = Vec::with_capacity(dets.len());
        for &(_, s, p) in &dets {
            let pred = &scenes[s].preds[p];
            let mut best = None;
            let mut best_iou = 0.5;
            for (g, gt) in scenes[s].gts.iter().enumerate() {
                if gt.class_id == cls && !taken[s][g] {
                    let v = iou(&pred.point_mask, &gt.point_mask);
                    if v >= best_iou {
                        best_iou = v;
                        best = Some(g);
                    }
                }
            }
            match best {
                Some(g) => {
                    taken[s][g] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        // AP = sum over TP ranks of the best precision at or after that rank
        let mut ap = 0.0;
        if num_gt > 0 {
            let mut tp_so_far = 0usize;
            let precisions: Vec<f64> = tp_flags
                .iter()
                .enumerate()
                .map(|(i, &f)| {
                    if f {
                        tp_so_far += 1;
                    }
                    tp_so_far as f64 / (i + 1) as f64
                })
                .collect();
            for (i, &f) in tp_flags.iter().enumerate() {
                if f {
                    let peak =
                        precisions[i..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    ap += peak / num_gt as f64;
                }
            }
        }
        total += ap;
    }
    total / classes.len() as f64
}

fn random_scene_eval(rng: &mut ChaCha8Rng) -> SceneEval {
    let n = rng.gen_range(8..24);
    let classes = 3;
    let rand_mask = |rng: &mut ChaCha8Rng| -> Vec<bool> {
        let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        m[rng.gen_range(0..n)] = true;
        m
    };
    let gts = (0..rng.gen_range(0..4))
        .map(|_| GroundTruthObject { point_mask: rand_mask(rng), class_id: rng.gen_range(0..classes) })
        .collect();
    let preds = (0..rng.gen_range(0..5))
        .map(|_| InstancePrediction {
            point_mask: rand_mask(rng),
            class_id: rng.gen_range(0..classes),
            confidence: rng.gen_range(0.0..1.0),
        })
        .collect();
    SceneEval { preds, gts }
}

fn metrics_suite() -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let checks = 200;
    let mut failed = 0;
    for _ in 0..checks {
        let scenes: Vec<SceneEval> =
            (0..rng.gen_range(1..4)).map(|_| random_scene_eval(&mut rng)).collect();
        if !scenes.iter().any(|s| !s.gts.is_empty()) {
            continue; // degenerate case has its own convention
        }
        let report = map_suite(&scenes);
        let oracle = oracle_map50(&scenes);
        if (report.map50 - oracle).abs() > 1e-9 {
            failed += 1;
        }
    }
    SuiteOutcome { name: "metrics", checks, failed }
}

/// Naive O(n^2) density clustering via union-find over eps-neighbors.
fn naive_clusters(points: &[[f64; 3]], eps: f64) -> Vec<usize> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 =
                (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum();
            if d2 <= eps * eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

fn geometry_suite() -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checks = 0;
    let mut failed = 0;

    // dbscan with min_size 1 must equal eps-connectivity components
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)])
            .collect();
        let eps = rng.gen_range(0.3..1.5);
        let got = dbscan(&pts, eps, 1)?;
        let want = naive_clusters(&pts, eps);
        let same = (0..n).all(|i| {
            (0..n).all(|j| (got.labels[i] == got.labels[j]) == (want[i] == want[j]))
        });
        checks += 1;
        if !same {
            failed += 1;
        }
    }

    // fps: every pick must maximize the min distance to the chosen set
    for _ in 0..150 {
        let n = rng.gen_range(2..60);
        let k = rng.gen_range(1..=n.min(10));
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)])
            .collect();
        let sel = farthest_point_sampling(&pts, k, FpsStart::LowestIndex)?;
        let d2 = |a: usize, b: usize| -> f64 {
            (0..3).map(|x| (pts[a][x] - pts[b][x]).powi(2)).sum()
        };
        let mut ok = sel[0] == 0;
        for step in 1..sel.len() {
            let chosen = &sel[..step];
            let score = |c: usize| chosen.iter().map(|&s| d2(c, s)).fold(f64::INFINITY, f64::min);
            let best = (0..n).map(score).fold(f64::NEG_INFINITY, f64::max);
            if score(sel[step]) < best - 1e-12 {
                ok = false;
            }
        }
        checks += 1;
        if !ok {
            failed += 1;
        }
    }

    // voxelize vs a naive group-by on floored coordinates
    for t in 0..150 {
        let n = rng.gen_range(1..80);
        let cloud = PointCloud {
            positions: (0..n)
                .map(|_| {
                    [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.0)]
                })
                .collect(),
            colors: (0..n).map(|_| [0.5; 3]).collect(),
            semantic_id: None,
            instance_id: None,
        };
        let vs = rng.gen_range(0.1..0.6);
        let grid = voxelize(&cloud, vs)?;
        let mut groups = std::collections::BTreeMap::new();
        for p in &cloud.positions {
            let key = [
                (p[0] / vs).floor() as i64,
                (p[1] / vs).floor() as i64,
                (p[2] / vs).floor() as i64,
            ];
            *groups.entry(key).or_insert(0usize) += 1;
        }
        let mut ok = grid.num_voxels() == groups.len();
        for (i, &v) in grid.point_to_voxel.iter().enumerate() {
            let p = cloud.positions[i];
            let key = [
                (p[0] / vs).floor() as i64,
                (p[1] / vs).floor() as i64,
                (p[2] / vs).floor() as i64,
            ];
            if grid.coords[v] != key {
                ok = false;
            }
        }
        checks += 1;
        if !ok {
            failed += 1;
            println!("voxelize mismatch on trial {}", t);
        }
    }

    Ok(SuiteOutcome { name: "geometry", checks, failed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for name in ["hungarian", "metrics", "geometry", "grad"] {
            let out = run_suite(name).unwrap();
            assert_eq!(out.failed, 0, "suite {} failed", name);
            assert!(out.checks > 0);
        }
    }

    #[test]
    fn unknown_suite_is_a_usage_error() {
        assert!(matches!(run_suite("nope"), Err(Error::Usage(_))));
    }
}
