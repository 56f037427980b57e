//! Point-cloud and voxel-space algorithms: voxelization, farthest point
//! sampling, Fourier positional encodings, DBSCAN, and mask pooling across
//! resolutions.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const NO_INSTANCE: i32 = -1;

/// A colored point cloud with optional per-point semantic/instance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// N×3 positions in meters, flattened row-major.
    pub positions: Vec<[f64; 3]>,
    /// N×3 colors in [0,1].
    pub colors: Vec<[f64; 3]>,
    /// Semantic class per point, in [0, C).
    pub semantic_id: Option<Vec<i32>>,
    /// Instance id per point (>= 0), or NO_INSTANCE for unannotated points.
    pub instance_id: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Data("point cloud is empty".into()));
        }
        if self.colors.len() != n {
            return Err(Error::Data("colors length differs from positions".into()));
        }
        if self.colors.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Data("colors must lie in [0,1]".into()));
        }
        if let Some(s) = &self.semantic_id {
            if s.len() != n {
                return Err(Error::Data("semantic_id length differs".into()));
            }
            if s.iter().any(|&c| c < 0 || c as usize >= num_classes) {
                return Err(Error::Data("semantic_id out of class range".into()));
            }
        }
        if let Some(ids) = &self.instance_id {
            if ids.len() != n {
                return Err(Error::Data("instance_id length differs".into()));
            }
            // each instance maps to exactly one semantic class
            if let Some(sem) = &self.semantic_id {
                let mut seen: HashMap<i32, i32> = HashMap::new();
                for (&inst, &cls) in ids.iter().zip(sem) {
                    if inst == NO_INSTANCE {
                        continue;
                    }
                    match seen.insert(inst, cls) {
                        Some(prev) if prev != cls => {
                            return Err(Error::Data(format!(
                                "instance {} spans classes {} and {}",
                                inst, prev, cls
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box (min, max).
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Occupied voxels of a quantized point cloud, in lexicographic coord order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// M₀ unique integer grid coordinates, sorted lexicographically.
    pub coords: Vec<[i64; 3]>,
    /// Mean color of the points inside each voxel.
    pub feats: Vec<[f64; 3]>,
    /// Index of the containing voxel for every input point.
    pub point_to_voxel: Vec<usize>,
}

impl VoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.coords.len()
    }

    /// World-space center of voxel `v`.
    pub fn center(&self, v: usize) -> [f64; 3] {
        let c = self.coords[v];
        [
            (c[0] as f64 + 0.5) * self.voxel_size,
            (c[1] as f64 + 0.5) * self.voxel_size,
            (c[2] as f64 + 0.5) * self.voxel_size,
        ]
    }
}

/// Floor-quantize a point cloud into a voxel grid, merging duplicate cells
/// and averaging colors.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if voxel_size <= 0.0 {
        return Err(Error::Usage(format!("voxel_size must be > 0, got {}", voxel_size)));
    }
    if cloud.is_empty() {
        return Err(Error::Usage("cannot voxelize an empty point cloud".into()));
    }
    let quantized: Vec<[i64; 3]> = cloud
        .positions
        .iter()
        .map(|p| {
            [
                (p[0] / voxel_size).floor() as i64,
                (p[1] / voxel_size).floor() as i64,
                (p[2] / voxel_size).floor() as i64,
            ]
        })
        .collect();
    let mut coords: Vec<[i64; 3]> = quantized.clone();
    coords.sort_unstable();
    coords.dedup();
    let index: HashMap<[i64; 3], usize> =
        coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let point_to_voxel: Vec<usize> = quantized.iter().map(|c| index[c]).collect();
    let mut feats = vec![[0.0; 3]; coords.len()];
    let mut counts = vec![0usize; coords.len()];
    for (pi, &vi) in point_to_voxel.iter().enumerate() {
        for a in 0..3 {
            feats[vi][a] += cloud.colors[pi][a];
        }
        counts[vi] += 1;
    }
    for (f, &c) in feats.iter_mut().zip(&counts) {
        for a in 0..3 {
            f[a] /= c as f64;
        }
    }
    Ok(VoxelGrid { voxel_size, coords, feats, point_to_voxel })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Start rule for farthest point sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Deterministic: begin at the lowest index.
    LowestIndex,
    /// Begin at an index drawn from the given seed.
    Seeded(u64),
}

/// Greedy max-min subset selection: each pick maximizes the minimum distance
/// to the already selected set, ties broken by lowest index.
pub fn farthest_point_sampling(
    positions: &[[f64; 3]],
    k: usize,
    start: FpsStart,
) -> Result<Vec<usize>> {
    let n = positions.len();
    if k == 0 || k > n {
        return Err(Error::Usage(format!("fps: need 1 <= k <= n, got k={} n={}", k, n)));
    }
    let first = match start {
        FpsStart::LowestIndex => 0,
        FpsStart::Seeded(seed) => {
            use rand::{Rng, SeedableRng};
            rand_chacha::ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)
        }
    };
    let mut selected = Vec::with_capacity(k);
    selected.push(first);
    let mut min_d2: Vec<f64> = positions
        .iter()
        .map(|p| dist2(p, &positions[first]))
        .collect();
    while selected.len() < k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&positions[i], &positions[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Sin/cos features at geometrically spaced frequencies, per axis. `dim`
/// must be divisible by 6 (3 axes x sin/cos); frequencies run pi, 2pi, 4pi,
/// ... Inputs must already be scaled to [-1,1].
pub fn fourier_positional_encoding(positions: &[[f64; 3]], dim: usize) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || dim % 6 != 0 {
        return Err(Error::Usage(format!(
            "encoding dim must be a positive multiple of 6, got {}",
            dim
        )));
    }
    let n_freq = dim / 6;
    let freqs: Vec<f64> = (0..n_freq)
        .map(|j| std::f64::consts::PI * (1u64 << j) as f64)
        .collect();
    let mut out = Vec::with_capacity(positions.len());
    for p in positions {
        if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Usage(format!(
                "positional encoding input {:?} outside [-1,1]",
                p
            )));
        }
        let mut enc = Vec::with_capacity(dim);
        for axis in 0..3 {
            for &f in &freqs {
                enc.push((f * p[axis]).sin());
                enc.push((f * p[axis]).cos());
            }
        }
        out.push(enc);
    }
    Ok(out)
}

/// Cluster labels, contiguous from 0, ordered by first member index.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLabels {
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

/// DBSCAN with a uniform spatial hash grid of cell size eps for neighborhood
/// queries. With min_size = 1 every point is labeled and the result equals
/// the connected components of the eps-neighborhood graph.
pub fn dbscan(points: &[[f64; 3]], eps: f64, min_size: usize) -> Result<ClusterLabels> {
    if eps <= 0.0 {
        return Err(Error::Usage(format!("dbscan eps must be > 0, got {}", eps)));
    }
    let n = points.len();
    if n == 0 {
        return Ok(ClusterLabels { labels: Vec::new(), num_clusters: 0 });
    }
    let min_size = min_size.max(1);
    let cell = |p: &[f64; 3]| -> [i64; 3] {
        [
            (p[0] / eps).floor() as i64,
            (p[1] / eps).floor() as i64,
            (p[2] / eps).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        let c = cell(&points[i]);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cands) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &j in cands {
                            if dist2(&points[i], &points[j]) <= eps2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
        }
        out
    };

    const UNVISITED: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let mut labels = vec![UNVISITED; n];
    let mut next = 0usize;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let nbrs = neighbors(i);
        if nbrs.len() < min_size {
            labels[i] = NOISE;
            continue;
        }
        let cluster = next;
        next += 1;
        labels[i] = cluster;
        let mut queue: Vec<usize> = nbrs;
        while let Some(j) = queue.pop() {
            if labels[j] == NOISE {
                labels[j] = cluster;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let jn = neighbors(j);
            if jn.len() >= min_size {
                queue.extend(jn);
            }
        }
    }
    // With min_size = 1 every point is a core point, so NOISE never survives.
    debug_assert!(min_size > 1 || labels.iter().all(|&l| l < n));
    Ok(ClusterLabels { labels, num_clusters: next })
}

/// Average-pool a full-resolution binary mask to a coarser level: a coarse
/// voxel is active iff the mean of its children's mask values exceeds 0.5.
/// `fine_to_coarse[i]` is the coarse index of fine voxel i.
pub fn pool_mask_to_resolution(
    fine_mask: &[bool],
    fine_to_coarse: &[usize],
    num_coarse: usize,
) -> Result<Vec<bool>> {
    if fine_mask.len() != fine_to_coarse.len() {
        return Err(Error::Data(format!(
            "mask length {} differs from mapping length {}",
            fine_mask.len(),
            fine_to_coarse.len()
        )));
    }
    let mut active = vec![0usize; num_coarse];
    let mut total = vec![0usize; num_coarse];
    for (i, &parent) in fine_to_coarse.iter().enumerate() {
        if parent >= num_coarse {
            return Err(Error::Data(format!(
                "fine voxel {} maps to coarse index {} out of {}",
                i, parent, num_coarse
            )));
        }
        total[parent] += 1;
        if fine_mask[i] {
            active[parent] += 1;
        }
    }
    if total.iter().any(|&t| t == 0) {
        return Err(Error::Data("coarse voxel without children in mapping".into()));
    }
    Ok((0..num_coarse)
        .map(|v| active[v] as f64 / total[v] as f64 > 0.5)
        .collect())
}

/// Map positions to [-1,1] per axis using a bounding box. Degenerate axes
/// (zero extent) map to 0.
#[derive(Clone, Copy, Debug)]
pub struct BoxNormalizer {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl BoxNormalizer {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        BoxNormalizer { lo, hi }
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        BoxNormalizer { lo, hi }
    }

    /// Normalize with clamping; coarse voxel centers can fall slightly
    /// outside the level-0 box.
    pub fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let extent = self.hi[a] - self.lo[a];
            out[a] = if extent > 0.0 {
                (2.0 * (p[a] - self.lo[a]) / extent - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
        out
    }
}
