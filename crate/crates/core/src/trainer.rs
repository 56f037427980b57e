//! Training loop: deterministic scene cycling, geometric augmentation,
//! one-cycle learning rate schedule, AdamW updates, and checkpointing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::optim::{adamw_step, AdamConfig, AdamState};
use crate::decoder::Phase;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{ground_truth_voxels, Model};
use crate::supervision::{layer_losses, LossWeights};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    /// One-cycle peak learning rate.
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_rotate_z: bool,
    pub augment_scale: bool,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            peak_lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            augment_flip: true,
            augment_rotate_z: true,
            augment_scale: true,
            checkpoint_every: 0,
        }
    }
}

/// One-cycle schedule: linear warmup over the first 10% of steps to the peak
/// rate, then cosine decay down to peak/100.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64) -> f64 {
    let floor = peak / 100.0;
    if total_steps == 0 {
        return peak;
    }
    let warmup = (total_steps as f64 * 0.1).ceil() as usize;
    if step < warmup {
        // start at the floor rather than 0 so step 0 still moves
        let t = (step + 1) as f64 / warmup as f64;
        floor + (peak - floor) * t
    } else {
        let t = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Geometric augmentation: horizontal flip, rotation about the z axis, and
/// uniform scaling, all around the scene's bounding-box center.
pub fn augment(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> PointCloud {
    let (lo, hi) = cloud.bbox();
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    let flip = cfg.augment_flip && rng.gen_bool(0.5);
    let angle = if cfg.augment_rotate_z {
        rng.gen_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let scale = if cfg.augment_scale { rng.gen_range(0.9..1.1) } else { 1.0 };
    let (sin, cos) = angle.sin_cos();
    let positions = cloud
        .positions
        .iter()
        .map(|p| {
            let mut x = p[0] - cx;
            let y = p[1] - cy;
            if flip {
                x = -x;
            }
            let (rx, ry) = (x * cos - y * sin, x * sin + y * cos);
            [cx + scale * rx, cy + scale * ry, p[2] * scale]
        })
        .collect();
    PointCloud {
        positions,
        colors: cloud.colors.clone(),
        semantic_id: cloud.semantic_id.clone(),
        instance_id: cloud.instance_id.clone(),
    }
}

/// Per-step record for the loss-curve log.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Total loss summed over all decoder layers.
    pub loss: f64,
    /// Auxiliary loss of each prediction set (initial + one per layer).
    pub layer_losses: Vec<f64>,
}

pub struct TrainOutcome {
    pub losses: Vec<StepLog>,
    pub final_checkpoint: Checkpoint,
}

/// Build the checkpoint for the model's current parameters.
pub fn make_checkpoint(model: &Model, config_hash: &str) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("init_mode".to_string(), model.cfg.decoder.init_mode.as_str().to_string());
    meta.insert("num_queries".to_string(), model.cfg.decoder.num_queries.to_string());
    meta.insert("config_hash".to_string(), config_hash.to_string());
    Checkpoint { meta, params: model.params.clone() }
}

/// Run the training loop. Scenes are visited in a fixed cyclic order;
/// every step is deterministic given (config, seed). `on_step` receives each
/// step's log entry; `on_checkpoint` fires per periodic snapshot.
pub fn train(
    model: &mut Model,
    scenes: &[PointCloud],
    cfg: &TrainConfig,
    weights: &LossWeights,
    config_hash: &str,
    mut on_step: impl FnMut(&StepLog),
    mut on_checkpoint: impl FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x617567);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x73616d70);
    let mut adam = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let scene = &scenes[step % scenes.len()];
        let scene = augment(scene, cfg, &mut aug_rng);
        let mut out = model.forward(&scene, Phase::Train, None, &mut sample_rng)?;
        let gts = ground_truth_voxels(&scene, &out.grid)?;
        let layers = layer_losses(
            &mut out.tape,
            &out.preds,
            &gts,
            model.cfg.decoder.num_classes,
            weights,
        )?;
        let layer_vals: Vec<f64> = layers.iter().map(|&l| out.tape.data(l)[0]).collect();
        let mut loss_id = layers[0];
        for &l in &layers[1..] {
            loss_id = out.tape.add(loss_id, l)?;
        }
        let loss = out.tape.data(loss_id)[0];
        if !loss.is_finite() {
            let bad = layer_vals.iter().position(|v| !v.is_finite());
            return Err(Error::Numeric(format!(
                "non-finite loss {} at step {} (layer {:?})",
                loss, step, bad
            )));
        }
        out.tape.backward(loss_id)?;

        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, &id) in out.binder.bound() {
            if let Some(g) = out.tape.grad(id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        let lr = one_cycle_lr(step, cfg.steps, cfg.peak_lr);
        let adam_cfg = AdamConfig { lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
        adamw_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;

        let entry = StepLog { step, lr, loss, layer_losses: layer_vals };
        on_step(&entry);
        losses.push(entry);

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps
        {
            on_checkpoint(step + 1, &make_checkpoint(model, config_hash))?;
        }
    }
    Ok(TrainOutcome { losses, final_checkpoint: make_checkpoint(model, config_hash) })
}
