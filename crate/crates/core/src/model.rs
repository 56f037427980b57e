//! End-to-end model assembly: voxelize, run the backbone pyramid, seed
//! queries, refine, and derive voxel-level ground truth for supervision.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::backbone::{self, BackboneConfig, Binder, FeaturePyramid, Hierarchy};
use crate::decoder::{self, DecoderConfig, Phase, PredictionSet};
use crate::error::{Error, Result};
use crate::geometry::{voxelize, BoxNormalizer, PointCloud, VoxelGrid, NO_INSTANCE};
use crate::supervision::GroundTruthInstance;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub voxel_size: f64,
}

impl ModelConfig {
    /// Desk-scale default: 4-level pyramid, D = 32, K = 20, C = 4.
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            decoder: DecoderConfig::desk(),
            voxel_size: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate(self.backbone.feature_dim)?;
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        if self.decoder.levels_attended > self.backbone.depth() {
            return Err(Error::Config(format!(
                "decoder attends {} levels but the backbone only has {} above level 0",
                self.decoder.levels_attended,
                self.backbone.depth()
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Everything produced by one forward pass, tape included so callers can
/// attach losses and run backward.
pub struct ForwardOutput {
    pub tape: Tape,
    pub binder: Binder,
    pub grid: VoxelGrid,
    pub hierarchy: Hierarchy,
    pub pyramid: FeaturePyramid,
    /// Initial prediction plus one per decoder layer.
    pub preds: Vec<PredictionSet>,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&cfg.backbone, &mut params, &mut rng);
        decoder::init_params(
            &cfg.decoder,
            cfg.backbone.feature_dim,
            cfg.backbone.depth(),
            &mut params,
            &mut rng,
        );
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// One full pass over a scene. `k_override` changes the query count for
    /// non-parametric init modes; `rng` drives voxel sampling in training.
    pub fn forward(
        &self,
        cloud: &PointCloud,
        phase: Phase,
        k_override: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let grid = voxelize(cloud, self.cfg.voxel_size)?;
        let hierarchy = backbone::build_hierarchy(&grid, self.cfg.backbone.depth())?;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let input = tape.constant(Tensor {
            shape: vec![grid.num_voxels(), 3],
            data: grid.feats.iter().flatten().copied().collect(),
        });
        let pyramid = backbone::forward(
            &mut tape,
            &mut binder,
            &self.params,
            &self.cfg.backbone,
            &hierarchy,
            input,
        )?;
        let centers = decoder::level_centers(&hierarchy, 0, grid.voxel_size);
        let normalizer = BoxNormalizer::from_points(&centers);
        let k = k_override.unwrap_or(self.cfg.decoder.num_queries);
        let queries = decoder::init_queries(
            &mut tape,
            &mut binder,
            &self.params,
            &self.cfg.decoder,
            self.cfg.backbone.feature_dim,
            k,
            &hierarchy,
            grid.voxel_size,
            &normalizer,
            pyramid.feats_proj[0],
        )?;
        let preds = decoder::refine(
            &mut tape,
            &mut binder,
            &self.params,
            &self.cfg.decoder,
            &hierarchy,
            grid.voxel_size,
            &normalizer,
            &pyramid,
            &queries,
            phase,
            rng,
        )?;
        Ok(ForwardOutput { tape, binder, grid, hierarchy, pyramid, preds })
    }
}

/// Voxel-level ground truth: each voxel goes to the instance owning the
/// majority of its points (ties to the lowest id); unlabeled/floor points
/// count against instance ownership.
pub fn ground_truth_voxels(cloud: &PointCloud, grid: &VoxelGrid) -> Result<Vec<GroundTruthInstance>> {
    let (Some(sem), Some(inst)) = (&cloud.semantic_id, &cloud.instance_id) else {
        return Err(Error::Data("scene has no instance annotations".into()));
    };
    let m0 = grid.num_voxels();
    // votes[voxel] : instance id -> point count (NO_INSTANCE as background)
    let mut votes: Vec<HashMap<i32, usize>> = vec![HashMap::new(); m0];
    for (p, &v) in grid.point_to_voxel.iter().enumerate() {
        *votes[v].entry(inst[p]).or_insert(0) += 1;
    }
    let mut owner: Vec<i32> = Vec::with_capacity(m0);
    for vote in &votes {
        let mut best = NO_INSTANCE;
        let mut best_n = 0usize;
        for (&id, &n) in vote {
            if n > best_n || (n == best_n && id != NO_INSTANCE && (best == NO_INSTANCE || id < best)) {
                best = id;
                best_n = n;
            }
        }
        owner.push(best);
    }

    let mut ids: Vec<i32> = owner.iter().copied().filter(|&i| i != NO_INSTANCE).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mask: Vec<bool> = owner.iter().map(|&o| o == id).collect();
        // the instance's class comes from any of its points
        let class = cloud
            .positions
            .iter()
            .enumerate()
            .find_map(|(p, _)| (inst[p] == id).then(|| sem[p]))
            .expect("instance id came from a point");
        if class < 0 {
            return Err(Error::Data(format!("negative class on instance {}", id)));
        }
        out.push(GroundTruthInstance { mask, class_id: class as usize });
    }
    Ok(out)
}

/// Ground truth at point level for metric computation.
pub fn ground_truth_points(cloud: &PointCloud) -> Result<Vec<crate::evaluation::GroundTruthObject>> {
    let (Some(sem), Some(inst)) = (&cloud.semantic_id, &cloud.instance_id) else {
        return Err(Error::Data("scene has no instance annotations".into()));
    };
    let mut ids: Vec<i32> = inst.iter().copied().filter(|&i| i != NO_INSTANCE).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| {
            let mask: Vec<bool> = inst.iter().map(|&i| i == id).collect();
            let class = sem[inst.iter().position(|&i| i == id).unwrap()] as usize;
            crate::evaluation::GroundTruthObject { point_mask: mask, class_id: class }
        })
        .collect())
}
