//! Multi-resolution feature pyramid over occupied voxels: a symmetric
//! encoder-decoder where sparse convolution is realized as gather-based
//! aggregation over 3x3x3 occupied-voxel neighborhoods with learned
//! per-offset weights.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;

pub const NUM_OFFSETS: usize = 27;

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    /// Channel width per pyramid level (fine to coarse); depth R = len - 1.
    pub widths: Vec<usize>,
    /// Common projection width D.
    pub feature_dim: usize,
}

impl BackboneConfig {
    /// Desk-scale default: 4 levels, D = 32.
    pub fn desk() -> Self {
        BackboneConfig { widths: vec![16, 16, 24, 32], feature_dim: 32 }
    }

    /// Widths from the full-scale reference configuration.
    pub fn full() -> Self {
        BackboneConfig { widths: vec![96, 96, 128, 256, 256], feature_dim: 128 }
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        Ok(())
    }
}

/// Voxel coordinates per level plus fine-to-coarse index maps.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    /// coords[r]: occupied voxel coordinates at level r (level 0 keeps the
    /// grid's ordering; coarser levels are sorted lexicographically).
    pub coords: Vec<Vec<[i64; 3]>>,
    /// child_maps[r][i] = index at level r+1 of the parent of voxel i at
    /// level r; one entry per level transition.
    pub child_maps: Vec<Vec<usize>>,
}

impl Hierarchy {
    pub fn num_levels(&self) -> usize {
        self.coords.len()
    }

    pub fn level_size(&self, r: usize) -> usize {
        self.coords[r].len()
    }

    /// Children (level-r indices) of every level-(r+1) voxel.
    pub fn groups(&self, r: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.coords[r + 1].len()];
        for (child, &parent) in self.child_maps[r].iter().enumerate() {
            groups[parent].push(child);
        }
        groups
    }

    /// Composed map from level-0 voxels to their ancestor at level r.
    pub fn map_from_level0(&self, r: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.coords[0].len()).collect();
        for level in 0..r {
            for m in map.iter_mut() {
                *m = self.child_maps[level][*m];
            }
        }
        map
    }
}

fn halve(c: &[i64; 3]) -> [i64; 3] {
    // floor division keeps negative coordinates consistent
    [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]
}

/// Build R extra levels above the grid by integer-halving coordinates.
pub fn build_hierarchy(grid: &VoxelGrid, depth: usize) -> Result<Hierarchy> {
    if depth == 0 {
        return Err(Error::Config("hierarchy depth must be >= 1".into()));
    }
    let mut coords = vec![grid.coords.clone()];
    let mut child_maps = Vec::new();
    for r in 0..depth {
        let halved: Vec<[i64; 3]> = coords[r].iter().map(halve).collect();
        let mut level: Vec<[i64; 3]> = halved.clone();
        level.sort_unstable();
        level.dedup();
        let index: HashMap<[i64; 3], usize> =
            level.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        child_maps.push(halved.iter().map(|c| index[c]).collect());
        coords.push(level);
    }
    Ok(Hierarchy { coords, child_maps })
}

/// For each of the 27 integer offsets, the occupied-neighbor index of every
/// voxel (None where the neighbor cell is empty).
pub fn neighbor_table(coords: &[[i64; 3]]) -> Vec<Vec<Option<usize>>> {
    let index: HashMap<[i64; 3], usize> =
        coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut table = Vec::with_capacity(NUM_OFFSETS);
    for dx in -1..=1i64 {
        for dy in -1..=1i64 {
            for dz in -1..=1i64 {
                let col: Vec<Option<usize>> = coords
                    .iter()
                    .map(|c| index.get(&[c[0] + dx, c[1] + dy, c[2] + dz]).copied())
                    .collect();
                table.push(col);
            }
        }
    }
    table
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: vec![rows, cols], data }
}

fn init_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, w_in: usize, w_out: usize) {
    for o in 0..NUM_OFFSETS {
        // scale the per-offset fan-in so the 27-way sum stays unit-variance
        let mut w = xavier(rng, w_in, w_out);
        for v in w.data.iter_mut() {
            *v /= (NUM_OFFSETS as f64).sqrt();
        }
        store.insert(format!("{}/w{}", prefix, o), w);
    }
    store.insert(format!("{}/b", prefix), Tensor::zeros(vec![w_out]));
    store.insert(format!("{}/ln_g", prefix), Tensor::new(vec![w_out], vec![1.0; w_out]).unwrap());
    store.insert(format!("{}/ln_b", prefix), Tensor::zeros(vec![w_out]));
}

/// Register all backbone parameters on a fresh store.
pub fn init_params(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let r_max = cfg.depth();
    init_block(store, rng, "backbone/enc0", 3, cfg.widths[0]);
    for r in 1..=r_max {
        init_block(store, rng, &format!("backbone/enc{}", r), cfg.widths[r - 1], cfg.widths[r]);
    }
    init_block(store, rng, &format!("backbone/dec{}", r_max), cfg.widths[r_max], cfg.widths[r_max]);
    for r in (0..r_max).rev() {
        store.insert(
            format!("backbone/up{}/w", r),
            xavier(rng, cfg.widths[r + 1], cfg.widths[r]),
        );
        store.insert(format!("backbone/up{}/b", r), Tensor::zeros(vec![cfg.widths[r]]));
        init_block(store, rng, &format!("backbone/dec{}", r), cfg.widths[r], cfg.widths[r]);
    }
    for r in 0..=r_max {
        store.insert(
            format!("backbone/proj{}/w", r),
            xavier(rng, cfg.widths[r], cfg.feature_dim),
        );
        store.insert(format!("backbone/proj{}/b", r), Tensor::zeros(vec![cfg.feature_dim]));
    }
}

/// Binds named parameters to tape leaves, one leaf per name per forward pass.
pub struct Binder {
    ids: HashMap<String, TensorId>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { ids: HashMap::new() }
    }

    pub fn get(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let t = store.get(name)?.clone();
        let id = tape.leaf(t);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// name -> tape id for every parameter bound during this pass.
    pub fn bound(&self) -> &HashMap<String, TensorId> {
        &self.ids
    }
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape ids of the per-level features produced by one backbone pass.
pub struct FeaturePyramid {
    /// Decoder output at each level, native width.
    pub feats_raw: Vec<TensorId>,
    /// Same features linearly projected to the common width D.
    pub feats_proj: Vec<TensorId>,
}

fn conv_block(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    neighbors: &[Vec<Option<usize>>],
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (o, idx) in neighbors.iter().enumerate() {
        let w = binder.get(tape, store, &format!("{}/w{}", prefix, o))?;
        let gathered = tape.gather_rows_or_zero(x, idx)?;
        let term = tape.matmul(gathered, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let b = binder.get(tape, store, &format!("{}/b", prefix))?;
    let y = tape.add_row(acc.expect("27 offsets"), b)?;
    let g = binder.get(tape, store, &format!("{}/ln_g", prefix))?;
    let lb = binder.get(tape, store, &format!("{}/ln_b", prefix))?;
    let y = tape.layer_norm(y, g, lb)?;
    tape.relu(y)
}

/// Full encoder-decoder pass. `input` is the M0 x 3 mean-color features of
/// the grid; returns per-level decoder features plus common-width
/// projections, all recorded on the tape.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    cfg: &BackboneConfig,
    hierarchy: &Hierarchy,
    input: TensorId,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let r_max = cfg.depth();
    if hierarchy.num_levels() != r_max + 1 {
        return Err(Error::Config(format!(
            "hierarchy has {} levels but backbone expects {}",
            hierarchy.num_levels(),
            r_max + 1
        )));
    }
    if tape.shape(input) != [hierarchy.level_size(0), 3] {
        return Err(Error::Config(format!(
            "backbone input must be {}x3, got {:?}",
            hierarchy.level_size(0),
            tape.shape(input)
        )));
    }
    let tables: Vec<Vec<Vec<Option<usize>>>> = hierarchy
        .coords
        .iter()
        .map(|c| neighbor_table(c))
        .collect();

    // encoder
    let mut enc = Vec::with_capacity(r_max + 1);
    enc.push(conv_block(tape, binder, store, "backbone/enc0", input, &tables[0])?);
    for r in 1..=r_max {
        let groups = hierarchy.groups(r - 1);
        let pooled = tape.pool_rows(enc[r - 1], &groups)?;
        enc.push(conv_block(
            tape,
            binder,
            store,
            &format!("backbone/enc{}", r),
            pooled,
            &tables[r],
        )?);
    }

    // decoder with skip connections
    let mut dec = vec![0usize; r_max + 1];
    dec[r_max] = conv_block(
        tape,
        binder,
        store,
        &format!("backbone/dec{}", r_max),
        enc[r_max],
        &tables[r_max],
    )?;
    for r in (0..r_max).rev() {
        let up_idx: Vec<usize> = hierarchy.child_maps[r].clone();
        let up = tape.gather_rows(dec[r + 1], &up_idx)?;
        let w = binder.get(tape, store, &format!("backbone/up{}/w", r))?;
        let b = binder.get(tape, store, &format!("backbone/up{}/b", r))?;
        let up = tape.linear(up, w, b)?;
        let merged = tape.add(up, enc[r])?;
        dec[r] = conv_block(
            tape,
            binder,
            store,
            &format!("backbone/dec{}", r),
            merged,
            &tables[r],
        )?;
    }

    // per-level projection to the common width
    let mut feats_proj = Vec::with_capacity(r_max + 1);
    for (r, &d) in dec.iter().enumerate() {
        let w = binder.get(tape, store, &format!("backbone/proj{}/w", r))?;
        let b = binder.get(tape, store, &format!("backbone/proj{}/b", r))?;
        feats_proj.push(tape.linear(d, w, b)?);
    }
    Ok(FeaturePyramid { feats_raw: dec, feats_proj })
}
