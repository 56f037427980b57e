//! Masked-attention Transformer decoder: instance query initialization,
//! cross-attention restricted to each query's current mask, self-attention,
//! FFN, the mask module, and the coarse-to-fine refinement schedule.

use rand::seq::index::sample as sample_without_replacement;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, TensorId, NEG_INF};
use crate::backbone::{Binder, FeaturePyramid, Hierarchy};
use crate::error::{Error, Result};
use crate::geometry::{
    farthest_point_sampling, fourier_positional_encoding, pool_mask_to_resolution, BoxNormalizer,
    FpsStart,
};

use crate::autodiff::ParamStore;
use rand::Rng;

/// How the K instance queries are seeded before refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryInit {
    /// Learned query features and positional embeddings; K is fixed.
    Parametric,
    /// Positions from farthest point sampling, features start at zero.
    FpsZeros,
    /// Positions from farthest point sampling, features copied from the
    /// sampled voxels.
    FpsFeatures,
}

impl QueryInit {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryInit::Parametric => "parametric",
            QueryInit::FpsZeros => "fps-zeros",
            QueryInit::FpsFeatures => "fps-features",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(QueryInit::Parametric),
            "fps-zeros" => Ok(QueryInit::FpsZeros),
            "fps-features" => Ok(QueryInit::FpsFeatures),
            other => Err(Error::Config(format!("unknown query init mode '{}'", other))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Attend to this many of the coarsest pyramid levels; level 0 is
    /// reserved for the mask module.
    pub levels_attended: usize,
    /// Refinement sweeps over the attended levels; layer weights are shared
    /// across sweeps.
    pub iterations: usize,
    /// Cross-attention samples at most this many voxels per level while
    /// training; inference always uses all of them.
    pub voxel_sample_limit: usize,
    /// Instance classes (the extra no-object slot is added internally).
    pub num_classes: usize,
    pub init_mode: QueryInit,
    /// Self-attention can be ablated for diagnostics.
    pub use_self_attention: bool,
}

impl DecoderConfig {
    /// Desk-scale default matching the 4-level desk backbone.
    pub fn desk() -> Self {
        DecoderConfig {
            num_queries: 20,
            heads: 8,
            ffn_dim: 128,
            levels_attended: 3,
            iterations: 3,
            voxel_sample_limit: 1024,
            num_classes: 4,
            init_mode: QueryInit::FpsZeros,
            use_self_attention: true,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.levels_attended * self.iterations
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("query count must be positive".into()));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature dim {} must be divisible by head count {}",
                dim, self.heads
            )));
        }
        if self.levels_attended == 0 {
            return Err(Error::Config("must attend to at least one level".into()));
        }
        if self.voxel_sample_limit == 0 {
            return Err(Error::Config("voxel sample limit must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        Ok(())
    }
}

/// Query features plus their fixed positional embeddings.
pub struct InstanceQuerySet {
    /// K x D query features (refined in place by the decoder).
    pub x: TensorId,
    /// K x D positional embeddings, never updated during refinement.
    pub pos_emb: TensorId,
}

/// One round of per-query outputs: class logits, mask heatmap, binary mask.
pub struct PredictionSet {
    /// K x (C+1); the final column is the no-object class.
    pub class_logits: TensorId,
    /// K x M0 sigmoid heatmap over full-resolution voxels.
    pub heatmap: TensorId,
    /// heatmap > 0.5 elementwise (strict), row-major K x M0.
    pub binary_mask: Vec<bool>,
}

/// Fourier encoding padded with zeros up to `dim` (the backbone width need
/// not be a multiple of 6).
pub fn padded_fourier(positions: &[[f64; 3]], dim: usize) -> Result<Vec<Vec<f64>>> {
    let used = dim / 6 * 6;
    if used == 0 {
        return Err(Error::Config(format!(
            "feature dim {} too small for positional encoding",
            dim
        )));
    }
    let mut enc = fourier_positional_encoding(positions, used)?;
    for row in enc.iter_mut() {
        row.resize(dim, 0.0);
    }
    Ok(enc)
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor {
        shape: vec![rows.len(), cols],
        data: rows.iter().flatten().copied().collect(),
    }
}

/// Voxel centers at pyramid level r in world units.
pub fn level_centers(hierarchy: &Hierarchy, r: usize, voxel_size: f64) -> Vec<[f64; 3]> {
    let size = voxel_size * (1u64 << r) as f64;
    hierarchy.coords[r]
        .iter()
        .map(|c| {
            [
                (c[0] as f64 + 0.5) * size,
                (c[1] as f64 + 0.5) * size,
                (c[2] as f64 + 0.5) * size,
            ]
        })
        .collect()
}

/// Seed K queries. FPS modes sample level-0 voxel centers; candidates are
/// visited in lexicographic coordinate order so the result does not depend
/// on voxel ordering.
pub fn init_queries(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    cfg: &DecoderConfig,
    dim: usize,
    k: usize,
    hierarchy: &Hierarchy,
    voxel_size: f64,
    normalizer: &BoxNormalizer,
    feats0_proj: TensorId,
) -> Result<InstanceQuerySet> {
    if cfg.init_mode == QueryInit::Parametric {
        if k != cfg.num_queries {
            return Err(Error::Usage(
                "parametric queries cannot change count at inference".into(),
            ));
        }
        let x = binder.get(tape, store, "decoder/query_x")?;
        let pos_emb = binder.get(tape, store, "decoder/query_pe")?;
        return Ok(InstanceQuerySet { x, pos_emb });
    }

    let centers = level_centers(hierarchy, 0, voxel_size);
    let m0 = centers.len();
    if k > m0 {
        return Err(Error::Usage(format!(
            "cannot sample {} queries from {} voxels",
            k, m0
        )));
    }
    // canonical candidate order: lexicographic by voxel coordinate
    let mut order: Vec<usize> = (0..m0).collect();
    order.sort_unstable_by_key(|&i| hierarchy.coords[0][i]);
    let sorted_centers: Vec<[f64; 3]> = order.iter().map(|&i| centers[i]).collect();
    let picked = farthest_point_sampling(&sorted_centers, k, FpsStart::LowestIndex)?;
    let voxel_indices: Vec<usize> = picked.iter().map(|&p| order[p]).collect();
    let norm_pos: Vec<[f64; 3]> = picked
        .iter()
        .map(|&p| normalizer.normalize(&sorted_centers[p]))
        .collect();
    let pos_emb = tape.constant(rows_tensor(&padded_fourier(&norm_pos, dim)?));

    let x = match cfg.init_mode {
        QueryInit::FpsZeros => tape.constant(Tensor::zeros(vec![k, dim])),
        QueryInit::FpsFeatures => tape.gather_rows(feats0_proj, &voxel_indices)?,
        QueryInit::Parametric => unreachable!(),
    };
    Ok(InstanceQuerySet { x, pos_emb })
}

/// Class head plus mask head: heatmap = sigma(f_mask(X) . F0^T).
pub fn mask_module(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    x: TensorId,
    feats0_proj: TensorId,
) -> Result<PredictionSet> {
    let w1 = binder.get(tape, store, "decoder/fmask/w1")?;
    let b1 = binder.get(tape, store, "decoder/fmask/b1")?;
    let w2 = binder.get(tape, store, "decoder/fmask/w2")?;
    let b2 = binder.get(tape, store, "decoder/fmask/b2")?;
    let w3 = binder.get(tape, store, "decoder/fmask/w3")?;
    let b3 = binder.get(tape, store, "decoder/fmask/b3")?;
    let h = tape.linear(x, w1, b1)?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, w2, b2)?;
    let h = tape.relu(h)?;
    let fm = tape.linear(h, w3, b3)?;

    let logits = tape.matmul_nt(fm, feats0_proj)?;
    let heatmap = tape.sigmoid(logits)?;
    let binary_mask: Vec<bool> = tape.data(heatmap).iter().map(|&v| v > 0.5).collect();

    let wc = binder.get(tape, store, "decoder/class/w")?;
    let bc = binder.get(tape, store, "decoder/class/b")?;
    let class_logits = tape.linear(x, wc, bc)?;
    Ok(PredictionSet { class_logits, heatmap, binary_mask })
}

/// Multi-head attention; `open` (queries x keys, true = attend) restricts
/// the softmax. A row with nothing open falls back to attending everywhere.
fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    open: Option<&[bool]>,
) -> Result<TensorId> {
    let dim = tape.shape(q_in)[1];
    let dh = dim / heads;
    let wq = binder.get(tape, store, &format!("{}/wq", prefix))?;
    let wk = binder.get(tape, store, &format!("{}/wk", prefix))?;
    let wv = binder.get(tape, store, &format!("{}/wv", prefix))?;
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(k_in, wk)?;
    let v = tape.matmul(v_in, wv)?;

    let n_q = tape.shape(q)[0];
    let n_k = tape.shape(k)[0];
    let mask_id = open.map(|open| {
        debug_assert_eq!(open.len(), n_q * n_k);
        let mut data = vec![0.0; n_q * n_k];
        for qi in 0..n_q {
            let row = &open[qi * n_k..(qi + 1) * n_k];
            if row.iter().any(|&a| a) {
                for (j, &a) in row.iter().enumerate() {
                    if !a {
                        data[qi * n_k + j] = NEG_INF;
                    }
                }
            }
            // otherwise the row stays fully open (empty-mask fallback)
        }
        tape.constant(Tensor { shape: vec![n_q, n_k], data })
    });

    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let weights = match mask_id {
            Some(m) => tape.masked_softmax(logits, m)?,
            None => tape.softmax_rows(logits)?,
        };
        parts.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&parts)?;
    let wo = binder.get(tape, store, &format!("{}/wo", prefix))?;
    let bo = binder.get(tape, store, &format!("{}/bo", prefix))?;
    tape.linear(concat, wo, bo)
}

/// Pre-norm masked cross-attention block. Positional encodings are added to
/// the key/query inputs before projection; values carry no encoding.
pub fn masked_cross_attention(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    x: TensorId,
    query_pe: TensorId,
    feats: TensorId,
    voxel_pe: TensorId,
    open: Option<&[bool]>,
) -> Result<TensorId> {
    let g = binder.get(tape, store, &format!("{}/ln_g", prefix))?;
    let b = binder.get(tape, store, &format!("{}/ln_b", prefix))?;
    let h = tape.layer_norm(x, g, b)?;
    let q_in = tape.add(h, query_pe)?;
    let k_in = tape.add(feats, voxel_pe)?;
    let out = attention(tape, binder, store, prefix, heads, q_in, k_in, feats, open)?;
    tape.add(x, out)
}

/// Pre-norm self-attention block over the queries; the positional encoding
/// goes into both keys and queries.
pub fn self_attention(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    x: TensorId,
    query_pe: TensorId,
) -> Result<TensorId> {
    let g = binder.get(tape, store, &format!("{}/ln_g", prefix))?;
    let b = binder.get(tape, store, &format!("{}/ln_b", prefix))?;
    let h = tape.layer_norm(x, g, b)?;
    let qk_in = tape.add(h, query_pe)?;
    let out = attention(tape, binder, store, prefix, heads, qk_in, qk_in, h, None)?;
    tape.add(x, out)
}

fn ffn_block(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let g = binder.get(tape, store, &format!("{}/ln_g", prefix))?;
    let b = binder.get(tape, store, &format!("{}/ln_b", prefix))?;
    let h = tape.layer_norm(x, g, b)?;
    let w1 = binder.get(tape, store, &format!("{}/w1", prefix))?;
    let b1 = binder.get(tape, store, &format!("{}/b1", prefix))?;
    let w2 = binder.get(tape, store, &format!("{}/w2", prefix))?;
    let b2 = binder.get(tape, store, &format!("{}/b2", prefix))?;
    let h = tape.linear(h, w1, b1)?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, w2, b2)?;
    tape.add(x, h)
}

/// Training samples voxels per layer; inference uses all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Index subset for sampled cross-attention: everything if it fits (or when
/// not training), otherwise a fresh uniform draw without replacement.
pub fn sample_voxels(
    m: usize,
    limit: usize,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if phase == Phase::Infer || m <= limit {
        return (0..m).collect();
    }
    let mut idx = sample_without_replacement(rng, m, limit).into_vec();
    idx.sort_unstable();
    idx
}

/// The coarse-to-fine visitation order: the `levels_attended` coarsest
/// levels, repeated `iterations` times. Level 0 is never attended.
pub fn schedule(cfg: &DecoderConfig, pyramid_levels: usize) -> Result<Vec<usize>> {
    let r_max = pyramid_levels - 1;
    if cfg.levels_attended > r_max {
        return Err(Error::Config(format!(
            "cannot attend {} levels with a {}-level pyramid (level 0 is reserved)",
            cfg.levels_attended, pyramid_levels
        )));
    }
    let mut order = Vec::with_capacity(cfg.num_layers());
    for _ in 0..cfg.iterations {
        for s in 0..cfg.levels_attended {
            order.push(r_max - s);
        }
    }
    Ok(order)
}

/// Run the full refinement loop. Returns L+1 prediction sets: the one from
/// the initial queries plus one after every decoder layer. Layer weights are
/// keyed by attended level, so the three sweeps share parameters.
pub fn refine(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    cfg: &DecoderConfig,
    hierarchy: &Hierarchy,
    voxel_size: f64,
    normalizer: &BoxNormalizer,
    pyramid: &FeaturePyramid,
    queries: &InstanceQuerySet,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PredictionSet>> {
    let dim = tape.shape(queries.x)[1];
    cfg.validate(dim)?;
    let order = schedule(cfg, hierarchy.num_levels())?;
    let k = tape.shape(queries.x)[0];

    // fixed per-level voxel encodings, shared across sweeps
    let mut voxel_pe: Vec<Option<TensorId>> = vec![None; hierarchy.num_levels()];
    for &r in &order {
        if voxel_pe[r].is_none() {
            let centers = level_centers(hierarchy, r, voxel_size);
            let norm: Vec<[f64; 3]> = centers.iter().map(|c| normalizer.normalize(c)).collect();
            voxel_pe[r] = Some(tape.constant(rows_tensor(&padded_fourier(&norm, dim)?)));
        }
    }

    let mut x = queries.x;
    let mut preds = vec![mask_module(tape, binder, store, x, pyramid.feats_proj[0])?];

    for &r in &order {
        let m_r = hierarchy.level_size(r);
        let map0 = hierarchy.map_from_level0(r);
        let prev = preds.last().unwrap();
        let m0 = prev.binary_mask.len() / k;
        let mut pooled = Vec::with_capacity(k * m_r);
        for q in 0..k {
            let row = &prev.binary_mask[q * m0..(q + 1) * m0];
            pooled.extend(pool_mask_to_resolution(row, &map0, m_r)?);
        }

        let picked = sample_voxels(m_r, cfg.voxel_sample_limit, phase, rng);
        let (feats, pe, open): (TensorId, TensorId, Vec<bool>) = if picked.len() == m_r {
            (pyramid.feats_proj[r], voxel_pe[r].unwrap(), pooled)
        } else {
            let f = tape.gather_rows(pyramid.feats_proj[r], &picked)?;
            let p = tape.gather_rows(voxel_pe[r].unwrap(), &picked)?;
            let mut open = Vec::with_capacity(k * picked.len());
            for q in 0..k {
                open.extend(picked.iter().map(|&j| pooled[q * m_r + j]));
            }
            (f, p, open)
        };

        let prefix = format!("decoder/lvl{}", r);
        x = masked_cross_attention(
            tape,
            binder,
            store,
            &format!("{}/cross", prefix),
            cfg.heads,
            x,
            queries.pos_emb,
            feats,
            pe,
            Some(&open),
        )?;
        if cfg.use_self_attention {
            x = self_attention(
                tape,
                binder,
                store,
                &format!("{}/self", prefix),
                cfg.heads,
                x,
                queries.pos_emb,
            )?;
        }
        x = ffn_block(tape, binder, store, &format!("{}/ffn", prefix), x)?;
        preds.push(mask_module(tape, binder, store, x, pyramid.feats_proj[0])?);
    }
    Ok(preds)
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: vec![rows, cols], data }
}

fn init_attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{}/{}", prefix, name), xavier(rng, dim, dim));
    }
    store.insert(format!("{}/bo", prefix), Tensor::zeros(vec![dim]));
    store.insert(format!("{}/ln_g", prefix), Tensor::new(vec![dim], vec![1.0; dim]).unwrap());
    store.insert(format!("{}/ln_b", prefix), Tensor::zeros(vec![dim]));
}

/// Register decoder parameters for a pyramid with levels 0..=r_max.
pub fn init_params(
    cfg: &DecoderConfig,
    dim: usize,
    r_max: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    for s in 0..cfg.levels_attended {
        let r = r_max - s;
        init_attn(store, rng, &format!("decoder/lvl{}/cross", r), dim);
        init_attn(store, rng, &format!("decoder/lvl{}/self", r), dim);
        let ffn = format!("decoder/lvl{}/ffn", r);
        store.insert(format!("{}/w1", ffn), xavier(rng, dim, cfg.ffn_dim));
        store.insert(format!("{}/b1", ffn), Tensor::zeros(vec![cfg.ffn_dim]));
        store.insert(format!("{}/w2", ffn), xavier(rng, cfg.ffn_dim, dim));
        store.insert(format!("{}/b2", ffn), Tensor::zeros(vec![dim]));
        store.insert(format!("{}/ln_g", ffn), Tensor::new(vec![dim], vec![1.0; dim]).unwrap());
        store.insert(format!("{}/ln_b", ffn), Tensor::zeros(vec![dim]));
    }
    for (w, b, rows) in [("w1", "b1", dim), ("w2", "b2", dim)] {
        store.insert(format!("decoder/fmask/{}", w), xavier(rng, rows, dim));
        store.insert(format!("decoder/fmask/{}", b), Tensor::zeros(vec![dim]));
    }
    store.insert("decoder/fmask/w3", xavier(rng, dim, dim));
    store.insert("decoder/fmask/b3", Tensor::zeros(vec![dim]));
    store.insert("decoder/class/w", xavier(rng, dim, cfg.num_classes + 1));
    store.insert("decoder/class/b", Tensor::zeros(vec![cfg.num_classes + 1]));
    if cfg.init_mode == QueryInit::Parametric {
        store.insert("decoder/query_x", xavier(rng, cfg.num_queries, dim));
        store.insert("decoder/query_pe", xavier(rng, cfg.num_queries, dim));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{self, BackboneConfig};
    use crate::geometry::VoxelGrid;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    const DIM: usize = 12;

    fn tiny_cfg() -> DecoderConfig {
        DecoderConfig {
            num_queries: 4,
            heads: 2,
            ffn_dim: 16,
            levels_attended: 1,
            iterations: 2,
            voxel_sample_limit: 1024,
            num_classes: 3,
            init_mode: QueryInit::FpsZeros,
            use_self_attention: true,
        }
    }

    fn random_grid(r: &mut ChaCha8Rng, n: usize, span: i64) -> VoxelGrid {
        let mut coords: Vec<[i64; 3]> = (0..n * 2)
            .map(|_| [r.gen_range(0..span), r.gen_range(0..span), r.gen_range(0..span)])
            .collect();
        coords.sort_unstable();
        coords.dedup();
        coords.truncate(n);
        let m = coords.len();
        let feats = (0..m)
            .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)])
            .collect();
        VoxelGrid { voxel_size: 0.5, coords, feats, point_to_voxel: (0..m).collect() }
    }

    struct Scene {
        grid: VoxelGrid,
        hierarchy: Hierarchy,
        store: ParamStore,
        bb_cfg: BackboneConfig,
    }

    fn scene(seed: u64, n: usize, cfg: &DecoderConfig) -> Scene {
        let mut r = rng(seed);
        let bb_cfg = BackboneConfig { widths: vec![6, 8], feature_dim: DIM };
        let grid = random_grid(&mut r, n, 6);
        let hierarchy = backbone::build_hierarchy(&grid, bb_cfg.depth()).unwrap();
        let mut store = ParamStore::new();
        backbone::init_params(&bb_cfg, &mut store, &mut r);
        init_params(cfg, DIM, bb_cfg.depth(), &mut store, &mut r);
        Scene { grid, hierarchy, store, bb_cfg }
    }

    fn run_pyramid(sc: &Scene, tape: &mut Tape, binder: &mut Binder) -> FeaturePyramid {
        let input = tape.constant(Tensor {
            shape: vec![sc.grid.num_voxels(), 3],
            data: sc.grid.feats.iter().flatten().copied().collect(),
        });
        backbone::forward(tape, binder, &sc.store, &sc.bb_cfg, &sc.hierarchy, input).unwrap()
    }

    fn normalizer(sc: &Scene) -> BoxNormalizer {
        BoxNormalizer::from_points(&level_centers(&sc.hierarchy, 0, sc.grid.voxel_size))
    }

    #[test]
    fn fps_zeros_mode_starts_at_zero() {
        let cfg = tiny_cfg();
        let sc = scene(1, 20, &cfg);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pyr = run_pyramid(&sc, &mut tape, &mut binder);
        let norm = normalizer(&sc);
        let q = init_queries(
            &mut tape, &mut binder, &sc.store, &cfg, DIM, 4, &sc.hierarchy,
            sc.grid.voxel_size, &norm, pyr.feats_proj[0],
        )
        .unwrap();
        assert!(tape.data(q.x).iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(q.pos_emb), [4, DIM]);
    }

    #[test]
    fn fps_with_k_equal_n_covers_every_center() {
        let cfg = tiny_cfg();
        let sc = scene(2, 10, &cfg);
        let m0 = sc.grid.num_voxels();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pyr = run_pyramid(&sc, &mut tape, &mut binder);
        let norm = normalizer(&sc);
        let q = init_queries(
            &mut tape, &mut binder, &sc.store, &cfg, DIM, m0, &sc.hierarchy,
            sc.grid.voxel_size, &norm, pyr.feats_proj[0],
        )
        .unwrap();
        // every center's encoding appears exactly once
        let centers = level_centers(&sc.hierarchy, 0, sc.grid.voxel_size);
        let norm_pos: Vec<[f64; 3]> = centers.iter().map(|c| norm.normalize(c)).collect();
        let want = padded_fourier(&norm_pos, DIM).unwrap();
        let got = tape.value(q.pos_emb);
        for row in &want {
            let found = (0..m0).any(|i| {
                got.row(i).iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(found);
        }
    }

    #[test]
    fn fps_features_mode_copies_voxel_features() {
        let mut cfg = tiny_cfg();
        cfg.init_mode = QueryInit::FpsFeatures;
        let sc = scene(3, 20, &cfg);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pyr = run_pyramid(&sc, &mut tape, &mut binder);
        let norm = normalizer(&sc);
        let q = init_queries(
            &mut tape, &mut binder, &sc.store, &cfg, DIM, 4, &sc.hierarchy,
            sc.grid.voxel_size, &norm, pyr.feats_proj[0],
        )
        .unwrap();
        // each query row must be some level-0 feature row, found by lookup
        let f0 = tape.value(pyr.feats_proj[0]).clone();
        let qx = tape.value(q.x);
        for qi in 0..4 {
            let found = (0..sc.grid.num_voxels())
                .any(|i| f0.row(i) == qx.row(qi));
            assert!(found, "query {} is not a voxel feature", qi);
        }
    }

    #[test]
    fn fps_k_larger_than_n_is_usage_error() {
        let cfg = tiny_cfg();
        let sc = scene(4, 5, &cfg);
        let m0 = sc.grid.num_voxels();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pyr = run_pyramid(&sc, &mut tape, &mut binder);
        let norm = normalizer(&sc);
        let err = init_queries(
            &mut tape, &mut binder, &sc.store, &cfg, DIM, m0 + 1, &sc.hierarchy,
            sc.grid.voxel_size, &norm, pyr.feats_proj[0],
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn parametric_mode_rejects_count_override() {
        let mut cfg = tiny_cfg();
        cfg.init_mode = QueryInit::Parametric;
        let sc = scene(5, 12, &cfg);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pyr = run_pyramid(&sc, &mut tape, &mut binder);
        let norm = normalizer(&sc);
        let err = init_queries(
            &mut tape, &mut binder, &sc.store, &cfg, DIM, cfg.num_queries + 1,
            &sc.hierarchy, sc.grid.voxel_size, &norm, pyr.feats_proj[0],
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn mask_module_orthogonal_features_give_half_heatmap() {
        let cfg = tiny_cfg();
        let mut r = rng(6);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        // zero the final f_mask layer: f_mask(X) = 0, orthogonal to all rows
        store.insert("decoder/fmask/w3", Tensor::zeros(vec![DIM, DIM]));
        store.insert("decoder/fmask/b3", Tensor::zeros(vec![DIM]));
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(xavier(&mut r, 3, DIM));
        let f0 = tape.constant(xavier(&mut r, 7, DIM));
        let p = mask_module(&mut tape, &mut binder, &store, x, f0).unwrap();
        assert!(tape.data(p.heatmap).iter().all(|&v| v == 0.5));
        assert!(p.binary_mask.iter().all(|&b| !b)); // strict > 0.5
    }

    #[test]
    fn mask_module_matches_naive_pairwise_oracle() {
        let cfg = tiny_cfg();
        let mut r = rng(7);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(xavier(&mut r, 4, DIM));
        let f0 = tape.constant(xavier(&mut r, 9, DIM));
        let p = mask_module(&mut tape, &mut binder, &store, x, f0).unwrap();

        // naive recomputation with plain loops
        let relu = |v: f64| v.max(0.0);
        let apply = |inp: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let d_out = b.data.len();
            (0..d_out)
                .map(|j| {
                    b.data[j]
                        + (0..inp.len()).map(|i| inp[i] * w.data[i * d_out + j]).sum::<f64>()
                })
                .collect()
        };
        let w1 = store.get("decoder/fmask/w1").unwrap();
        let b1 = store.get("decoder/fmask/b1").unwrap();
        let w2 = store.get("decoder/fmask/w2").unwrap();
        let b2 = store.get("decoder/fmask/b2").unwrap();
        let w3 = store.get("decoder/fmask/w3").unwrap();
        let b3 = store.get("decoder/fmask/b3").unwrap();
        let xs = tape.value(x).clone();
        let fs = tape.value(f0).clone();
        for q in 0..4 {
            let h1: Vec<f64> = apply(xs.row(q), w1, b1).into_iter().map(relu).collect();
            let h2: Vec<f64> = apply(&h1, w2, b2).into_iter().map(relu).collect();
            let fm = apply(&h2, w3, b3);
            for v in 0..9 {
                let dot: f64 = fm.iter().zip(fs.row(v)).map(|(a, b)| a * b).sum();
                let want = 1.0 / (1.0 + (-dot).exp());
                let got = tape.data(p.heatmap)[q * 9 + v];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_open_mask_equals_unmasked_attention() {
        let cfg = tiny_cfg();
        let mut r = rng(8);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let k = 4;
        let m = 7;
        let x0 = xavier(&mut r, k, DIM);
        let pe_q = xavier(&mut r, k, DIM);
        let f = xavier(&mut r, m, DIM);
        let pe_v = xavier(&mut r, m, DIM);

        let run = |open: Option<Vec<bool>>| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.constant(x0.clone());
            let pq = tape.constant(pe_q.clone());
            let fv = tape.constant(f.clone());
            let pv = tape.constant(pe_v.clone());
            let out = masked_cross_attention(
                &mut tape, &mut binder, &store, "decoder/lvl1/cross", cfg.heads,
                x, pq, fv, pv, open.as_deref(),
            )
            .unwrap();
            tape.data(out).to_vec()
        };
        let masked = run(Some(vec![true; k * m]));
        let unmasked = run(None);
        for (a, b) in masked.iter().zip(&unmasked) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_open_voxel_gets_full_attention_weight() {
        let cfg = tiny_cfg();
        let mut r = rng(9);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let k = 3;
        let m = 6;
        let x0 = xavier(&mut r, k, DIM);
        let pe_q = xavier(&mut r, k, DIM);
        let f = xavier(&mut r, m, DIM);
        let pe_v = xavier(&mut r, m, DIM);
        // query q may only see voxel 2q
        let mut open = vec![false; k * m];
        for q in 0..k {
            open[q * m + 2 * q] = true;
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(x0.clone());
        let pq = tape.constant(pe_q.clone());
        let fv = tape.constant(f.clone());
        let pv = tape.constant(pe_v.clone());
        let out = masked_cross_attention(
            &mut tape, &mut binder, &store, "decoder/lvl1/cross", cfg.heads,
            x, pq, fv, pv, Some(&open),
        )
        .unwrap();

        // with weight 1 on a single voxel, output = x + Wo.(Wv f_j) + bo
        let wv = store.get("decoder/lvl1/cross/wv").unwrap();
        let wo = store.get("decoder/lvl1/cross/wo").unwrap();
        let bo = store.get("decoder/lvl1/cross/bo").unwrap();
        for q in 0..k {
            let fj = f.row(2 * q);
            let v: Vec<f64> = (0..DIM)
                .map(|j| (0..DIM).map(|i| fj[i] * wv.data[i * DIM + j]).sum::<f64>())
                .collect();
            for j in 0..DIM {
                let proj: f64 =
                    (0..DIM).map(|i| v[i] * wo.data[i * DIM + j]).sum::<f64>() + bo.data[j];
                let want = x0.row(q)[j] + proj;
                let got = tape.data(out)[q * DIM + j];
                assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn empty_mask_row_falls_back_to_all_voxels() {
        let cfg = tiny_cfg();
        let mut r = rng(10);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let k = 2;
        let m = 5;
        let x0 = xavier(&mut r, k, DIM);
        let pe_q = xavier(&mut r, k, DIM);
        let f = xavier(&mut r, m, DIM);
        let pe_v = xavier(&mut r, m, DIM);
        let run = |open: Vec<bool>| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.constant(x0.clone());
            let pq = tape.constant(pe_q.clone());
            let fv = tape.constant(f.clone());
            let pv = tape.constant(pe_v.clone());
            let out = masked_cross_attention(
                &mut tape, &mut binder, &store, "decoder/lvl1/cross", cfg.heads,
                x, pq, fv, pv, Some(&open),
            )
            .unwrap();
            tape.data(out).to_vec()
        };
        // query 0 closed everywhere -> behaves as fully open
        let mut open = vec![true; k * m];
        for j in 0..m {
            open[j] = false;
        }
        let with_fallback = run(open);
        let fully_open = run(vec![true; k * m]);
        for j in 0..DIM {
            assert!((with_fallback[j] - fully_open[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_single_query_is_value_plus_residual() {
        let cfg = tiny_cfg();
        let mut r = rng(11);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let x0 = xavier(&mut r, 1, DIM);
        let pe = xavier(&mut r, 1, DIM);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(x0.clone());
        let p = tape.constant(pe.clone());
        let out = self_attention(&mut tape, &mut binder, &store, "decoder/lvl1/self", cfg.heads, x, p)
            .unwrap();

        // K = 1: softmax weight is 1, so out = x + Wo.(Wv ln(x)) + bo
        let g = store.get("decoder/lvl1/self/ln_g").unwrap();
        let b = store.get("decoder/lvl1/self/ln_b").unwrap();
        let mean = x0.data.iter().sum::<f64>() / DIM as f64;
        let var = x0.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / DIM as f64;
        let ln: Vec<f64> = x0
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g.data[i] + b.data[i])
            .collect();
        let wv = store.get("decoder/lvl1/self/wv").unwrap();
        let wo = store.get("decoder/lvl1/self/wo").unwrap();
        let bo = store.get("decoder/lvl1/self/bo").unwrap();
        let v: Vec<f64> = (0..DIM)
            .map(|j| (0..DIM).map(|i| ln[i] * wv.data[i * DIM + j]).sum::<f64>())
            .collect();
        for j in 0..DIM {
            let proj: f64 =
                (0..DIM).map(|i| v[i] * wo.data[i * DIM + j]).sum::<f64>() + bo.data[j];
            let want = x0.data[j] + proj;
            let got = tape.data(out)[j];
            assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let mut r = rng(12);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let k = 5;
        let x0 = xavier(&mut r, k, DIM);
        let pe = xavier(&mut r, k, DIM);
        let run = |x_t: &Tensor, p_t: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.constant(x_t.clone());
            let p = tape.constant(p_t.clone());
            let out =
                self_attention(&mut tape, &mut binder, &store, "decoder/lvl1/self", cfg.heads, x, p)
                    .unwrap();
            tape.value(out).clone()
        };
        let base = run(&x0, &pe);
        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];
        let permute = |t: &Tensor| -> Tensor {
            Tensor {
                shape: t.shape.clone(),
                data: perm.iter().flat_map(|&i| t.row(i).to_vec()).collect(),
            }
        };
        let permuted = run(&permute(&x0), &permute(&pe));
        for (new_i, &old_i) in perm.iter().enumerate() {
            for (a, b) in permuted.row(new_i).iter().zip(base.row(old_i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_attention_matches_naive_oracle() {
        let mut cfg = tiny_cfg();
        cfg.heads = 1;
        let mut r = rng(13);
        let mut store = ParamStore::new();
        init_params(&cfg, DIM, 1, &mut store, &mut r);
        let k = 3;
        let x0 = xavier(&mut r, k, DIM);
        let pe = xavier(&mut r, k, DIM);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(x0.clone());
        let p = tape.constant(pe.clone());
        let out = self_attention(&mut tape, &mut binder, &store, "decoder/lvl1/self", 1, x, p)
            .unwrap();

        // naive single-head attention on pre-normed inputs
        let g = store.get("decoder/lvl1/self/ln_g").unwrap();
        let bn = store.get("decoder/lvl1/self/ln_b").unwrap();
        let ln_row = |row: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / DIM as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / DIM as f64;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g.data[i] + bn.data[i])
                .collect()
        };
        let matvec = |inp: &[f64], w: &Tensor| -> Vec<f64> {
            (0..DIM)
                .map(|j| (0..DIM).map(|i| inp[i] * w.data[i * DIM + j]).sum::<f64>())
                .collect()
        };
        let wq = store.get("decoder/lvl1/self/wq").unwrap();
        let wk = store.get("decoder/lvl1/self/wk").unwrap();
        let wv = store.get("decoder/lvl1/self/wv").unwrap();
        let wo = store.get("decoder/lvl1/self/wo").unwrap();
        let bo = store.get("decoder/lvl1/self/bo").unwrap();
        let h: Vec<Vec<f64>> = (0..k).map(|i| ln_row(x0.row(i))).collect();
        let qk_in: Vec<Vec<f64>> = (0..k)
            .map(|i| h[i].iter().zip(pe.row(i)).map(|(a, b)| a + b).collect())
            .collect();
        let qs: Vec<Vec<f64>> = qk_in.iter().map(|r| matvec(r, wq)).collect();
        let ks: Vec<Vec<f64>> = qk_in.iter().map(|r| matvec(r, wk)).collect();
        let vs: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, wv)).collect();
        for i in 0..k {
            let logits: Vec<f64> = (0..k)
                .map(|j| {
                    qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>()
                        / (DIM as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; DIM];
            for j in 0..k {
                for d in 0..DIM {
                    ctx[d] += exps[j] / z * vs[j][d];
                }
            }
            for d in 0..DIM {
                let proj: f64 =
                    (0..DIM).map(|e| ctx[e] * wo.data[e * DIM + d]).sum::<f64>() + bo.data[d];
                let want = x0.row(i)[d] + proj;
                let got = tape.data(out)[i * DIM + d];
                assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn sample_voxels_returns_all_when_under_limit() {
        let mut r = rng(14);
        assert_eq!(sample_voxels(10, 20, Phase::Train, &mut r), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sample_voxels_draws_distinct_subset() {
        let mut r = rng(15);
        let idx = sample_voxels(100, 30, Phase::Train, &mut r);
        assert_eq!(idx.len(), 30);
        let mut dedup = idx.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 30);
        assert!(idx.iter().all(|&i| i < 100));
    }

    #[test]
    fn inference_never_samples() {
        let mut r = rng(16);
        assert_eq!(sample_voxels(100, 30, Phase::Infer, &mut r).len(), 100);
    }

    #[test]
    fn consecutive_draws_differ_across_seeds() {
        let mut identical = 0;
        for seed in 0..100 {
            let mut r = rng(seed);
            let a = sample_voxels(100, 30, Phase::Train, &mut r);
            let b = sample_voxels(100, 30, Phase::Train, &mut r);
            if a == b {
                identical += 1;
            }
        }
        assert_eq!(identical, 0);
    }

    #[test]
    fn schedule_visits_coarse_to_fine_repeatedly() {
        let mut cfg = tiny_cfg();
        cfg.levels_attended = 4;
        cfg.iterations = 3;
        let order = schedule(&cfg, 5).unwrap();
        assert_eq!(order, vec![4, 3, 2, 1, 4, 3, 2, 1, 4, 3, 2, 1]);
    }

    #[test]
    fn schedule_rejects_shallow_pyramid() {
        let mut cfg = tiny_cfg();
        cfg.levels_attended = 2;
        assert!(matches!(schedule(&cfg, 2), Err(Error::Config(_))));
    }

    fn full_refine(sc: &Scene, cfg: &DecoderConfig, phase: Phase) -> (Tape, Vec<PredictionSet>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pyr = run_pyramid(sc, &mut tape, &mut binder);
        let norm = normalizer(sc);
        let q = init_queries(
            &mut tape, &mut binder, &sc.store, cfg, DIM, cfg.num_queries,
            &sc.hierarchy, sc.grid.voxel_size, &norm, pyr.feats_proj[0],
        )
        .unwrap();
        let mut r = rng(99);
        let preds = refine(
            &mut tape, &mut binder, &sc.store, cfg, &sc.hierarchy, sc.grid.voxel_size,
            &norm, &pyr, &q, phase, &mut r,
        )
        .unwrap();
        (tape, preds)
    }

    #[test]
    fn zero_iterations_yield_single_prediction() {
        let mut cfg = tiny_cfg();
        cfg.iterations = 0;
        let sc = scene(17, 20, &cfg);
        let (_, preds) = full_refine(&sc, &cfg, Phase::Infer);
        assert_eq!(preds.len(), 1);
    }

    #[test]
    fn refine_returns_one_prediction_per_layer_plus_initial() {
        let cfg = tiny_cfg();
        let sc = scene(18, 20, &cfg);
        let (tape, preds) = full_refine(&sc, &cfg, Phase::Infer);
        assert_eq!(preds.len(), cfg.num_layers() + 1);
        let m0 = sc.grid.num_voxels();
        for p in &preds {
            assert_eq!(tape.shape(p.heatmap), [cfg.num_queries, m0]);
            assert_eq!(tape.shape(p.class_logits), [cfg.num_queries, cfg.num_classes + 1]);
            // binary mask consistent with strict threshold
            for (i, &v) in tape.data(p.heatmap).iter().enumerate() {
                assert_eq!(p.binary_mask[i], v > 0.5);
            }
        }
    }

    #[test]
    fn shared_weights_affect_every_iteration() {
        let cfg = tiny_cfg(); // 1 attended level, 2 iterations
        let sc = scene(19, 20, &cfg);
        let (tape_a, preds_a) = full_refine(&sc, &cfg, Phase::Infer);

        let mut sc_b = scene(19, 20, &cfg);
        let name = "decoder/lvl1/cross/wv";
        let mut t = sc_b.store.get(name).unwrap().clone();
        for v in t.data.iter_mut() {
            *v += 0.05;
        }
        sc_b.store.insert(name, t);
        let (tape_b, preds_b) = full_refine(&sc_b, &cfg, Phase::Infer);

        // every post-layer prediction must move, in both sweeps
        for l in 1..preds_a.len() {
            let a = tape_a.data(preds_a[l].heatmap);
            let b = tape_b.data(preds_b[l].heatmap);
            let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-9, "layer {} unchanged by shared-weight perturbation", l);
        }
        // the initial prediction (no attention yet) must be identical
        assert_eq!(
            tape_a.data(preds_a[0].heatmap),
            tape_b.data(preds_b[0].heatmap)
        );
    }

    #[test]
    fn duplicate_queries_stay_identical_without_self_attention() {
        let mut cfg = tiny_cfg();
        cfg.use_self_attention = false;
        cfg.init_mode = QueryInit::Parametric;
        cfg.num_queries = 3;
        let mut sc = scene(20, 20, &cfg);
        // force queries 0 and 1 (features and positions) identical
        for name in ["decoder/query_x", "decoder/query_pe"] {
            let mut t = sc.store.get(name).unwrap().clone();
            let row: Vec<f64> = t.row(0).to_vec();
            t.data[DIM..2 * DIM].copy_from_slice(&row);
            sc.store.insert(name, t);
        }
        let (tape, preds) = full_refine(&sc, &cfg, Phase::Infer);
        let last = tape.value(preds.last().unwrap().heatmap);
        assert_eq!(last.row(0), last.row(1));
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = tiny_cfg();
        let sc = scene(21, 25, &cfg);
        let (tape_a, preds_a) = full_refine(&sc, &cfg, Phase::Infer);
        let (tape_b, preds_b) = full_refine(&sc, &cfg, Phase::Infer);
        for (a, b) in preds_a.iter().zip(&preds_b) {
            assert_eq!(tape_a.data(a.heatmap), tape_b.data(b.heatmap));
            assert_eq!(tape_a.data(a.class_logits), tape_b.data(b.class_logits));
        }
    }

    #[test]
    fn training_samples_voxels_when_over_limit() {
        let mut cfg = tiny_cfg();
        cfg.voxel_sample_limit = 4; // force sampling at the attended level
        let sc = scene(22, 40, &cfg);
        // must still run without error and emit full-resolution masks
        let (tape, preds) = full_refine(&sc, &cfg, Phase::Train);
        let m0 = sc.grid.num_voxels();
        assert_eq!(tape.shape(preds.last().unwrap().heatmap), [cfg.num_queries, m0]);
    }

    #[test]
    fn refine_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let sc = scene(23, 15, &cfg);
        let name = "decoder/fmask/w2";

        let eval = |store: &ParamStore, want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let input = tape.constant(Tensor {
                shape: vec![sc.grid.num_voxels(), 3],
                data: sc.grid.feats.iter().flatten().copied().collect(),
            });
            let pyr = backbone::forward(&mut tape, &mut binder, store, &sc.bb_cfg, &sc.hierarchy, input)
                .unwrap();
            let norm = normalizer(&sc);
            let q = init_queries(
                &mut tape, &mut binder, store, &cfg, DIM, cfg.num_queries,
                &sc.hierarchy, sc.grid.voxel_size, &norm, pyr.feats_proj[0],
            )
            .unwrap();
            let mut r = rng(99);
            let preds = refine(
                &mut tape, &mut binder, store, &cfg, &sc.hierarchy, sc.grid.voxel_size,
                &norm, &pyr, &q, Phase::Infer, &mut r,
            )
            .unwrap();
            let root = tape.mean(preds.last().unwrap().heatmap).unwrap();
            let val = tape.data(root)[0];
            let grad = if want_grad {
                tape.backward(root).unwrap();
                Some(tape.grad(binder.bound()[name]).unwrap().to_vec())
            } else {
                None
            };
            (val, grad)
        };

        let (_, grad) = eval(&sc.store, true);
        let grad = grad.unwrap();
        let h = 1e-5;
        for &e in &[0usize, 5, 17] {
            let f = |delta: f64| -> f64 {
                let mut s = sc.store.clone();
                let mut t = s.get(name).unwrap().clone();
                t.data[e] += delta;
                s.insert(name, t);
                eval(&s, false).0
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let denom = fd.abs().max(grad[e].abs()).max(1e-10);
            assert!(
                ((grad[e] - fd) / denom).abs() < 1e-5,
                "elem {}: analytic {} vs fd {}",
                e,
                grad[e],
                fd
            );
        }
    }
}
