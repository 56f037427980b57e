//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]`, and
//! `[eval]` sections. Every field has a default; unknown keys are rejected.
//! A 64-bit FNV-1a hash of the canonical serialization identifies the config
//! in checkpoints and prediction files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seg3d_core::backbone::BackboneConfig;
use seg3d_core::decoder::{DecoderConfig, QueryInit};
use seg3d_core::model::ModelConfig;
use seg3d_core::scenegen::SceneSpec;
use seg3d_core::supervision::LossWeights;
use seg3d_core::trainer::TrainConfig;
use seg3d_core::{Error, Result};

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Per-level channel widths, finest first.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub queries: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub levels_attended: usize,
    pub iterations: usize,
    pub voxel_sample_limit: usize,
    pub num_classes: usize,
    /// "parametric" | "fps-zeros" | "fps-features"
    pub init_mode: String,
    pub use_self_attention: bool,
    pub loss_dice: f64,
    pub loss_bce: f64,
    pub loss_class: f64,
    pub loss_no_object: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::desk();
        let d = DecoderConfig::desk();
        let w = LossWeights::default();
        ModelSection {
            widths: b.widths,
            feature_dim: b.feature_dim,
            queries: d.num_queries,
            heads: d.heads,
            ffn_dim: d.ffn_dim,
            levels_attended: d.levels_attended,
            iterations: d.iterations,
            voxel_sample_limit: d.voxel_sample_limit,
            num_classes: d.num_classes,
            init_mode: d.init_mode.as_str().to_string(),
            use_self_attention: d.use_self_attention,
            loss_dice: w.dice,
            loss_bce: w.bce,
            loss_class: w.cl,
            loss_no_object: w.no_obj,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_rotate_z: bool,
    pub augment_scale: bool,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            peak_lr: t.peak_lr,
            weight_decay: t.weight_decay,
            seed: t.seed,
            augment_flip: t.augment_flip,
            augment_rotate_z: t.augment_rotate_z,
            augment_scale: t.augment_scale,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub voxel_size: f64,
    /// Square scene footprint in meters.
    pub extent: f64,
    /// Inclusive instance count range.
    pub instance_count: [usize; 2],
    /// Inclusive surface-sample count range per instance.
    pub points_per_instance: [usize; 2],
    /// Floor points per square meter.
    pub floor_density: f64,
    /// Stddev of Gaussian RGB jitter.
    pub color_noise: f64,
    /// Probability of corrupting a point's semantic label.
    pub label_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        DataSection {
            voxel_size: 0.25,
            extent: s.extent,
            instance_count: [s.instance_count.0, s.instance_count.1],
            points_per_instance: [s.points_per_instance.0, s.points_per_instance.1],
            floor_density: s.floor_density,
            color_noise: s.color_noise,
            label_noise: s.label_noise,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// DBSCAN neighborhood radius for mask splitting.
    pub dbscan_eps: f64,
    pub enable_dbscan: bool,
    /// Predictions below this confidence are dropped at inference time.
    pub min_confidence: f64,
    /// Collapse same-class detections overlapping above this IoU; 0 disables.
    pub dedup_iou: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { dbscan_eps: 0.9, enable_dbscan: true, min_confidence: 0.0, dedup_iou: 0.0 }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {}", e)))?;
        cfg.model_config()?.validate()?;
        cfg.scene_spec().validate()?;
        if !(cfg.eval.dbscan_eps > 0.0) {
            return Err(Error::Config("eval.dbscan_eps must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: BackboneConfig {
                widths: self.model.widths.clone(),
                feature_dim: self.model.feature_dim,
            },
            decoder: DecoderConfig {
                num_queries: self.model.queries,
                heads: self.model.heads,
                ffn_dim: self.model.ffn_dim,
                levels_attended: self.model.levels_attended,
                iterations: self.model.iterations,
                voxel_sample_limit: self.model.voxel_sample_limit,
                num_classes: self.model.num_classes,
                init_mode: QueryInit::parse(&self.model.init_mode)?,
                use_self_attention: self.model.use_self_attention,
            },
            voxel_size: self.data.voxel_size,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            dice: self.model.loss_dice,
            bce: self.model.loss_bce,
            cl: self.model.loss_class,
            no_obj: self.model.loss_no_object,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            peak_lr: self.train.peak_lr,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            augment_flip: self.train.augment_flip,
            augment_rotate_z: self.train.augment_rotate_z,
            augment_scale: self.train.augment_scale,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            extent: self.data.extent,
            instance_count: (self.data.instance_count[0], self.data.instance_count[1]),
            points_per_instance: (
                self.data.points_per_instance[0],
                self.data.points_per_instance[1],
            ),
            floor_density: self.data.floor_density,
            color_noise: self.data.color_noise,
            label_noise: self.data.label_noise,
            ..SceneSpec::default()
        }
    }

    /// FNV-1a over the canonical (re-serialized) form, so the hash depends on
    /// effective values rather than formatting or key order.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canonical.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{:016x}", h)
    }
}
