//! Implementations of the CLI verbs. Each command is deterministic given
//! (config, seed) and embeds the config hash in everything it writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seg3d_core::autodiff::checkpoint::Checkpoint;
use seg3d_core::decoder::{Phase, QueryInit};
use seg3d_core::evaluation::{map_suite, postprocess, suppress_duplicates, SceneEval};
use seg3d_core::geometry::PointCloud;
use seg3d_core::model::{ground_truth_points, Model};
use seg3d_core::scenegen::{export_ply, generate_scene, load_scene, save_scene};
use seg3d_core::trainer::train;
use seg3d_core::{Error, Result};

use crate::config::RunConfig;
use crate::predictions::PredictionFile;

/// Sorted list of `.scene` files in a directory.
fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "scene"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .scene files in {}", dir.display())));
    }
    Ok(files)
}

fn load_scenes(dir: &Path) -> Result<Vec<PointCloud>> {
    scene_files(dir)?
        .iter()
        .map(|p| load_scene(p).map(|(cloud, _)| cloud))
        .collect()
}

pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path, count: usize, seed: u64) -> Result<()> {
    let spec = cfg.scene_spec();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    for i in 0..count {
        let cloud = generate_scene(&spec, seed.wrapping_add(i as u64))?;
        let path = out_dir.join(format!("scene_{:04}.scene", i));
        save_scene(&cloud, spec.num_classes(), &path)?;
        println!("wrote {} ({} points)", path.display(), cloud.len());
    }
    Ok(())
}

pub fn cmd_train(
    cfg: &RunConfig,
    scenes_dir: &Path,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let scenes = load_scenes(scenes_dir)?;
    let hash = cfg.hash();
    let mut model = Model::init(cfg.model_config()?, cfg.train.seed)?;
    let mut log: Option<fs::File> = match log_path {
        Some(p) => Some(
            fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?,
        ),
        None => None,
    };
    let outcome = train(
        &mut model,
        &scenes,
        &cfg.train_config(),
        &cfg.loss_weights(),
        &hash,
        |s| {
            let layers: Vec<String> =
                s.layer_losses.iter().map(|l| format!("{:.6}", l)).collect();
            let line = format!(
                "step={} lr={:.8} loss={:.6} layers={}",
                s.step,
                s.lr,
                s.loss,
                layers.join(",")
            );
            println!("{}", line);
            if let Some(f) = &mut log {
                let _ = writeln!(f, "{}", line);
            }
        },
        |step, ckpt| {
            let path = out.with_extension(format!("step{}.ckpt", step));
            ckpt.save(&path)?;
            println!("checkpoint {}", path.display());
            Ok(())
        },
    )?;
    outcome.final_checkpoint.save(out)?;
    println!("final checkpoint {} (config_hash={})", out.display(), hash);
    Ok(())
}

/// Load a checkpoint and rebuild the model, insisting the config matches.
fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let hash = cfg.hash();
    if let Some(h) = ckpt.meta.get("config_hash") {
        if *h != hash {
            return Err(Error::Config(format!(
                "checkpoint was trained with config {} but the given config hashes to {}",
                h, hash
            )));
        }
    }
    Model::from_params(cfg.model_config()?, ckpt.params)
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene: &Path,
    out: &Path,
    queries: Option<usize>,
    no_dbscan: bool,
    seed: u64,
) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    if queries.is_some()
        && queries != Some(model.cfg.decoder.num_queries)
        && model.cfg.decoder.init_mode == QueryInit::Parametric
    {
        return Err(Error::Usage(
            "--queries cannot override the query count in parametric init mode; \
             use fps-zeros or fps-features"
                .into(),
        ));
    }
    let (cloud, _) = load_scene(scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_fwd = model.forward(&cloud, Phase::Infer, queries, &mut rng)?;
    let last = out_fwd.preds.last().expect("refine yields predictions");
    let k = queries.unwrap_or(model.cfg.decoder.num_queries);
    let preds = postprocess(
        out_fwd.tape.data(last.heatmap),
        out_fwd.tape.data(last.class_logits),
        k,
        model.cfg.decoder.num_classes,
        &out_fwd.grid,
        cfg.eval.dbscan_eps,
        cfg.eval.enable_dbscan && !no_dbscan,
    )?;
    let instances: Vec<_> = preds
        .into_iter()
        .filter(|p| p.confidence >= cfg.eval.min_confidence)
        .collect();
    let instances = if cfg.eval.dedup_iou > 0.0 {
        suppress_duplicates(&instances, cfg.eval.dedup_iou)
    } else {
        instances
    };
    let file = PredictionFile {
        config_hash: cfg.hash(),
        num_points: cloud.len(),
        instances,
    };
    file.save(out)?;
    println!("wrote {} ({} instances)", out.display(), file.instances.len());
    Ok(())
}

/// Pair prediction files with scene files. Both arguments may be a single
/// file or a directory; directories are matched by file stem.
fn eval_pairs(predictions: &Path, scenes: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if predictions.is_file() && scenes.is_file() {
        return Ok(vec![(predictions.to_path_buf(), scenes.to_path_buf())]);
    }
    if !(predictions.is_dir() && scenes.is_dir()) {
        return Err(Error::Usage(
            "predictions and scenes must both be files or both be directories".into(),
        ));
    }
    let mut pairs = Vec::new();
    for scene in scene_files(scenes)? {
        let stem = scene.file_stem().unwrap().to_string_lossy().into_owned();
        let pred = predictions.join(format!("{}.preds", stem));
        if !pred.is_file() {
            return Err(Error::Data(format!("no predictions for {}", scene.display())));
        }
        pairs.push((pred, scene));
    }
    Ok(pairs)
}

pub fn cmd_eval(predictions: &Path, scenes: &Path, out: Option<&Path>) -> Result<()> {
    let mut evals = Vec::new();
    for (pred_path, scene_path) in eval_pairs(predictions, scenes)? {
        let (cloud, _) = load_scene(&scene_path)?;
        let preds = PredictionFile::load(&pred_path)?;
        if preds.num_points != cloud.len() {
            return Err(Error::Data(format!(
                "{} has {} points but {} was written for {}",
                scene_path.display(),
                cloud.len(),
                pred_path.display(),
                preds.num_points
            )));
        }
        evals.push(SceneEval { preds: preds.instances, gts: ground_truth_points(&cloud)? });
    }
    let report = map_suite(&evals);
    let text = report.to_text();
    print!("{}", text);
    if let Some(p) = out {
        fs::write(p, &text).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    Ok(())
}

pub fn cmd_export(predictions: &Path, scene: &Path, out: &Path) -> Result<()> {
    let (cloud, _) = load_scene(scene)?;
    let preds = PredictionFile::load(predictions)?;
    if preds.num_points != cloud.len() {
        return Err(Error::Data(format!(
            "predictions cover {} points but the scene has {}",
            preds.num_points,
            cloud.len()
        )));
    }
    let instances: Vec<Vec<usize>> = preds
        .instances
        .iter()
        .map(|p| {
            p.point_mask
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect()
        })
        .collect();
    export_ply(&cloud, &instances, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use seg3d_core::trainer::make_checkpoint;
    use tempfile::tempdir;

    fn small_cfg() -> RunConfig {
        RunConfig::parse(
            "[model]\nwidths = [8, 12]\nfeature_dim = 12\nqueries = 6\nheads = 2\n\
             ffn_dim = 16\nlevels_attended = 1\niterations = 1\n\
             [train]\nsteps = 2\n\
             [data]\nvoxel_size = 0.4\ninstance_count = [2, 3]\n",
        )
        .unwrap()
    }

    #[test]
    fn generate_train_infer_eval_export_pipeline() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let scenes = dir.path().join("scenes");
        cmd_generate(&cfg, &scenes, 2, 7).unwrap();
        assert_eq!(scene_files(&scenes).unwrap().len(), 2);

        let ckpt = dir.path().join("model.ckpt");
        cmd_train(&cfg, &scenes, &ckpt, Some(&dir.path().join("loss.log"))).unwrap();
        assert!(ckpt.is_file());
        let log = fs::read_to_string(dir.path().join("loss.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.starts_with("step=0 lr="));

        let scene0 = scenes.join("scene_0000.scene");
        let preds = dir.path().join("scene_0000.preds");
        cmd_infer(&cfg, &ckpt, &scene0, &preds, None, false, 0).unwrap();
        let pf = PredictionFile::load(&preds).unwrap();
        assert_eq!(pf.config_hash, cfg.hash());

        cmd_eval(&preds, &scene0, Some(&dir.path().join("report.txt"))).unwrap();
        let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(report.starts_with("map="));

        let ply = dir.path().join("scene.ply");
        cmd_export(&preds, &scene0, &ply).unwrap();
        assert!(fs::read_to_string(&ply).unwrap().starts_with("ply"));
    }

    #[test]
    fn infer_rejects_query_override_for_parametric_mode() {
        let mut cfg = small_cfg();
        cfg.model.init_mode = "parametric".into();
        let dir = tempdir().unwrap();
        let scenes = dir.path().join("scenes");
        cmd_generate(&cfg, &scenes, 1, 3).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        let model = Model::init(cfg.model_config().unwrap(), 0).unwrap();
        make_checkpoint(&model, &cfg.hash()).save(&ckpt).unwrap();
        let scene0 = scenes.join("scene_0000.scene");
        let err = cmd_infer(&cfg, &ckpt, &scene0, &dir.path().join("o"), Some(9), false, 0)
            .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        // fps modes accept the same override
        cmd_infer(&small_cfg(), &ckpt, &scene0, &dir.path().join("o"), Some(9), false, 0)
            .unwrap_err(); // hash mismatch, not usage
    }

    #[test]
    fn infer_rejects_checkpoint_from_other_config() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let scenes = dir.path().join("scenes");
        cmd_generate(&cfg, &scenes, 1, 3).unwrap();
        let model = Model::init(cfg.model_config().unwrap(), 0).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        make_checkpoint(&model, "0000000000000000").save(&ckpt).unwrap();
        let err = cmd_infer(
            &cfg,
            &ckpt,
            &scenes.join("scene_0000.scene"),
            &dir.path().join("o"),
            None,
            false,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
