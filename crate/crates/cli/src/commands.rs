use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use panoptic4d::autodiff::{load_checkpoint, save_checkpoint};
use panoptic4d::labels::{ClassPalette, PanopticLabeling};
use panoptic4d::metrics::{evaluate_scenes, oracle_check, MetricConfig, MetricReport};
use panoptic4d::model::{Model, ModelConfig};
use panoptic4d::par::{self, Exec};
use panoptic4d::supervision::{train_stage1, training_clips, StepLog};
use panoptic4d::synthworld::{generate_dataset, read_dataset, write_atomic, Dataset, DatasetIndex, Scene};
use panoptic4d::tracking::{read_predictions, run_sequence, train_stage2, write_predictions, Tam};

use crate::config::RunConfig;
use crate::error::{io, CliError};
use crate::manifest::{sha256_file, tree_hash, Recorder};

pub const MODEL_CKPT: &str = "model.ckpt";
pub const MODEL_META: &str = "model.json";
pub const TAM_CKPT: &str = "tam.ckpt";
pub const TAM_META: &str = "tam.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ModelConfig,
    palette: ClassPalette,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TamMeta {
    dim: usize,
    seed: u64,
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(|e| io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Scene directories named by a path: a dataset root (with an index) or a
/// single scene directory.
fn scene_dirs(path: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if path.join(DatasetIndex::FILE).exists() {
        let ds = Dataset::open(path)?;
        return Ok(ds.index.scenes.iter().enumerate().map(|(i, s)| (s.clone(), ds.scene_dir(i))).collect());
    }
    if path.join("manifest.json").exists() {
        let name = path.file_name().map_or_else(|| "scene".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, path.to_path_buf())]);
    }
    Err(CliError::Io(format!("{}: neither a dataset nor a scene directory", path.display())))
}

fn load_scenes(path: &Path) -> Result<Vec<(String, Scene)>, CliError> {
    let dirs = scene_dirs(path)?;
    let loaded = par::map_slice(Exec::Parallel, &dirs, |(n, d)| read_dataset(d).map(|s| (n.clone(), s)));
    loaded.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let mut rec = Recorder::new("generate", cfg, cfg.data.seed);
    rec.phase("generate");
    generate_dataset(&cfg.data.scene, cfg.data.seed, cfg.data.scenes, out)?;
    let hash = tree_hash(out)?;
    rec.finish(out)?;
    Ok(hash)
}

fn save_model(model: &Model, seed: u64, out: &Path) -> Result<(), CliError> {
    save_checkpoint(&model.store, &out.join(MODEL_CKPT))?;
    let meta = ModelMeta { config: model.config.clone(), palette: model.palette.clone(), seed };
    write_text(&out.join(MODEL_META), &serde_json::to_string_pretty(&meta).expect("meta serializes"))
}

/// Stage-1 checkpoint directory → model. Missing files are a usage error.
pub fn load_model(dir: &Path) -> Result<Model, CliError> {
    let (meta_path, ckpt) = (dir.join(MODEL_META), dir.join(MODEL_CKPT));
    if !meta_path.exists() || !ckpt.exists() {
        return Err(CliError::Config(format!("{}: no stage-1 checkpoint ({MODEL_CKPT}, {MODEL_META})", dir.display())));
    }
    let meta: ModelMeta = read_json(&meta_path)?;
    let mut model = Model::new(meta.config, meta.palette, meta.seed)?;
    load_checkpoint(&mut model.store, &ckpt)?;
    Ok(model)
}

pub fn load_tam(dir: &Path) -> Result<Tam, CliError> {
    let (meta_path, ckpt) = (dir.join(TAM_META), dir.join(TAM_CKPT));
    if !meta_path.exists() || !ckpt.exists() {
        return Err(CliError::Config(format!("{}: no TAM checkpoint ({TAM_CKPT}, {TAM_META})", dir.display())));
    }
    let meta: TamMeta = read_json(&meta_path)?;
    let mut tam = Tam::new(meta.dim, meta.seed);
    load_checkpoint(&mut tam.store, &ckpt)?;
    Ok(tam)
}

fn dataset_palette(scenes: &[(String, Scene)]) -> Result<ClassPalette, CliError> {
    let first = scenes.first().ok_or_else(|| CliError::Mismatch("dataset has no scenes".into()))?;
    if let Some((n, _)) = scenes.iter().find(|(_, s)| s.palette != first.1.palette) {
        return Err(CliError::Mismatch(format!("scene `{n}` uses a different class palette")));
    }
    Ok(first.1.palette.clone())
}

/// Returns the SHA-256 of the final checkpoint.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String, CliError> {
    let mut rec = Recorder::new("train", cfg, cfg.training.seed);
    rec.phase("load");
    rec.input(tree_hash(data)?);
    let scenes = load_scenes(data)?;
    let palette = dataset_palette(&scenes)?;
    let mut model = Model::new(cfg.model.clone(), palette, cfg.training.seed)?;
    let scenes: Vec<Scene> = scenes.into_iter().map(|(_, s)| s).collect();
    let clips = training_clips(&scenes);
    create_dir(out)?;
    rec.phase("train");
    let logs = train_stage1(&mut model, &clips, &cfg.training, |l: &StepLog| {
        if l.step % 10 == 0 {
            log::info!("step {} epoch {} loss {:.5}", l.step, l.epoch, l.total);
        }
    })?;
    rec.phase("save");
    let mut csv = String::from(StepLog::CSV_HEADER);
    csv.push('\n');
    for l in &logs {
        csv.push_str(&l.csv_row());
        csv.push('\n');
    }
    write_text(&out.join("train_log.csv"), &csv)?;
    save_model(&model, cfg.training.seed, out)?;
    let hash = sha256_file(&out.join(MODEL_CKPT))?;
    rec.finish(out)?;
    Ok(hash)
}

pub fn train_tam(cfg: &RunConfig, data: &Path, model_dir: &Path, out: &Path) -> Result<String, CliError> {
    let model = load_model(model_dir)?;
    let mut rec = Recorder::new("train-tam", cfg, cfg.tam_training.seed);
    rec.phase("load");
    rec.input(tree_hash(data)?);
    let scenes: Vec<Scene> = load_scenes(data)?.into_iter().map(|(_, s)| s).collect();
    create_dir(out)?;
    let mut tam = Tam::new(model.config.dim, cfg.tam_training.seed);
    rec.phase("train");
    let losses = train_stage2(&mut tam, &model, &scenes, &cfg.tam_training, |step, loss| {
        if step % 10 == 0 {
            log::info!("tam step {step} loss {loss:.5}");
        }
    })?;
    rec.phase("save");
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write_text(&out.join("tam_log.csv"), &csv)?;
    save_checkpoint(&tam.store, &out.join(TAM_CKPT))?;
    let meta = TamMeta { dim: tam.dim, seed: cfg.tam_training.seed };
    write_text(&out.join(TAM_META), &serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    let hash = sha256_file(&out.join(TAM_CKPT))?;
    rec.finish(out)?;
    Ok(hash)
}

/// Writes `out/<scene>/pred_<t>.bin` for every scene; returns the scene names.
pub fn infer(cfg: &RunConfig, model_dir: &Path, tam_dir: Option<&Path>, data: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let tracking = &cfg.tracking;
    let model = load_model(model_dir)?;
    let tam = match (tracking.baseline_iou, tam_dir) {
        (true, _) => None,
        (false, Some(d)) => Some(load_tam(d)?),
        (false, None) => return Err(CliError::Config("TAM association needs --tam (or use --baseline-iou)".into())),
    };
    let mut rec = Recorder::new("infer", cfg, 0);
    rec.phase("load");
    let dirs = scene_dirs(data)?;
    rec.input(tree_hash(data)?);
    create_dir(out)?;
    rec.phase("infer");
    let association = if tracking.baseline_iou { "mask_iou" } else { "tam" };
    // scenes are independent; each has its own bank
    let results = par::map_slice(Exec::Parallel, &dirs, |(name, dir)| -> Result<(), CliError> {
        let scene = read_dataset(dir)?;
        let labels = run_sequence(&model, tam.as_ref(), &scene, tracking)?;
        write_predictions(&out.join(name), &scene.name, association, &labels)?;
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    rec.finish(out)?;
    Ok(dirs.into_iter().map(|(n, _)| n).collect())
}

#[derive(Debug, Serialize)]
struct OracleEntry {
    scene: String,
    points: usize,
    max_discrepancy: Option<f64>,
    worst: Option<String>,
    compared: usize,
}

pub const ORACLE_TOLERANCE: f64 = 1e-9;

pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path, oracle: bool) -> Result<MetricReport, CliError> {
    let mut rec = Recorder::new("eval", cfg, 0);
    rec.phase("load");
    let scenes = load_scenes(gt)?;
    let palette = dataset_palette(&scenes)?;
    let mut pairs: Vec<(PanopticLabeling, PanopticLabeling)> = Vec::with_capacity(scenes.len());
    for (name, scene) in &scenes {
        let dir = if pred.join("pred_manifest.json").exists() && scenes.len() == 1 { pred.to_path_buf() } else { pred.join(name) };
        if !dir.join("pred_manifest.json").exists() {
            return Err(CliError::Mismatch(format!("no predictions for scene `{name}` in {}", pred.display())));
        }
        let (_, labels) = read_predictions(&dir)?;
        pairs.push((labels, scene.labeling()));
    }
    create_dir(out)?;
    rec.phase("evaluate");
    let metric_cfg = MetricConfig { palette, ignore_class: cfg.eval.ignore_class };
    let report = evaluate_scenes(&pairs, &metric_cfg)?;
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let mut csv = format!("scene,{}\n", MetricReport::csv_header());
    for ((name, _), (p, g)) in scenes.iter().zip(&pairs) {
        let r = evaluate_scenes(&[(p.clone(), g.clone())], &metric_cfg)?;
        let _ = writeln!(csv, "{name},{}", r.csv_row());
    }
    let _ = writeln!(csv, "all,{}", report.csv_row());
    write_text(&out.join("report.csv"), &csv)?;

    if oracle {
        rec.phase("oracle");
        let mut entries = Vec::new();
        let mut worst: Option<(String, f64)> = None;
        for ((name, _), (p, g)) in scenes.iter().zip(&pairs) {
            let points: usize = g.frames.iter().map(|f| f.len()).sum();
            if points > cfg.eval.oracle_max_points {
                log::warn!("oracle skipped for `{name}`: {points} points");
                entries.push(OracleEntry { scene: name.clone(), points, max_discrepancy: None, worst: None, compared: 0 });
                continue;
            }
            let r = oracle_check(p, g, &metric_cfg)?;
            if r.max_discrepancy > worst.as_ref().map_or(ORACLE_TOLERANCE, |w| w.1) {
                worst = Some((format!("{name}: {}", r.worst), r.max_discrepancy));
            }
            entries.push(OracleEntry {
                scene: name.clone(),
                points,
                max_discrepancy: Some(r.max_discrepancy),
                worst: Some(r.worst),
                compared: r.compared,
            });
        }
        write_text(&out.join("oracle.json"), &serde_json::to_string_pretty(&entries).expect("oracle serializes"))?;
        if let Some((what, d)) = worst {
            return Err(CliError::Mismatch(format!("oracle disagrees on {what} by {d:e}")));
        }
    }
    rec.finish(out)?;
    Ok(report)
}
