use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, OptimizerState, ParamGroup, Tensor};
use crate::decoder::ClipAssembly;
use crate::labels::{FrameLabels, PanopticLabeling};
use crate::model::Model;
use crate::nn::ModelError;
use crate::supervision::{bce_mask_loss, TrainError};
use crate::synthworld::{read_label_file, write_atomic, write_label_file, PointCloudClip, Scene, SynthError};

use super::{associate, build_tam_features, pair_attributes, update_bank, Association, BankEntry, Tam, TrackMemoryBank, Tracklet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Minimum TAM score for association.
    pub tau: f64,
    /// Frames a track stays in the memory bank after its last sighting.
    pub history: usize,
    /// Associate by single-frame mask IoU instead of the TAM.
    pub baseline_iou: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig { tau: 0.5, history: 4, baseline_iou: false }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.tau.is_finite() {
            return Err(ModelError::InvalidConfig { field: "tau", detail: "must be finite".into() });
        }
        if self.history == 0 {
            return Err(ModelError::InvalidConfig { field: "history", detail: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// Sliding-window tracker state: the memory bank plus the labels emitted so
/// far.
#[derive(Debug, Clone)]
pub struct SequenceTracker {
    pub bank: TrackMemoryBank,
    pub frames: Vec<FrameLabels>,
    history: usize,
}

impl SequenceTracker {
    pub fn new(scene: &Scene, history: usize) -> Self {
        let frames = scene.frames.iter().map(|f| FrameLabels::new(vec![0; f.points.len()], vec![0; f.points.len()])).collect();
        SequenceTracker { bank: TrackMemoryBank::new(), frames, history }
    }

    /// Associate the assembly of clip `(t−1, t)` and write labels for frame
    /// `t` (and frame 0 when `t == 1`). Returns the id of each tracklet.
    pub fn step(&mut self, clip: &PointCloudClip, assembly: &ClipAssembly, method: Association, tau: f64) -> Result<Vec<u32>, ModelError> {
        let t = clip.frames[1];
        self.bank.prune(t, self.history);
        let ids = associate(&mut self.bank, &assembly.tracklets, method, tau)?;
        update_bank(&mut self.bank, &ids, &assembly.tracklets, t, self.history);
        for (i, &(f, j)) in clip.source.iter().enumerate() {
            if f == t || (t == 1 && f == 0) {
                self.frames[f].class[j] = assembly.class[i];
                self.frames[f].track[j] = assembly.tracklet[i].map_or(0, |k| ids[k]);
            }
        }
        Ok(ids)
    }

    pub fn finish(self) -> PanopticLabeling {
        PanopticLabeling::new(self.frames)
    }
}

/// Slide over the clips `(t−1, t)`, associate each clip's tracklets against
/// the bank, and emit labels for frame `t` (plus frame 0 from the first clip).
pub fn run_sequence(model: &Model, tam: Option<&Tam>, scene: &Scene, cfg: &TrackingConfig) -> Result<PanopticLabeling, ModelError> {
    cfg.validate()?;
    if scene.num_frames() < 2 {
        return Err(ModelError::InvalidInput(format!("scene `{}` has fewer than 2 frames", scene.name)));
    }
    let method = match (cfg.baseline_iou, tam) {
        (true, _) => Association::MaskIou,
        (false, Some(t)) => Association::Tam(t),
        (false, None) => return Err(ModelError::InvalidInput("TAM association requested without a TAM".into())),
    };
    let mut tracker = SequenceTracker::new(scene, cfg.history);
    for t in 1..scene.num_frames() {
        let clip = scene.clip(t);
        let pred = model.predict(&clip)?;
        tracker.step(&clip, &pred.assembly, method, cfg.tau)?;
    }
    Ok(tracker.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamTrainConfig {
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Clip separations used to form pairs.
    pub max_gap: usize,
}

impl Default for TamTrainConfig {
    fn default() -> Self {
        TamTrainConfig { epochs: 30, max_steps: None, batch: 64, lr: 1e-3, weight_decay: 1e-4, seed: 0, max_gap: 4 }
    }
}

impl TamTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, detail: &str| Err(TrainError::InvalidConfig { field, detail: detail.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if self.max_gap == 0 {
            return bad("max_gap", "must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TamPair {
    pub features: Vec<f64>,
    /// 1 when both tracklets belong to the same ground-truth track.
    pub label: f64,
}

/// Ground-truth track covering more than half of the tracklet's points.
pub fn majority_track(scene: &Scene, t: &Tracklet) -> Option<u32> {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    let mut total = 0;
    for (f, mask) in &t.masks {
        for &j in mask {
            let id = scene.frames[*f].labels.track[j];
            total += 1;
            match counts.iter_mut().find(|c| c.0 == id) {
                Some(c) => c.1 += 1,
                None => counts.push((id, 1)),
            }
        }
    }
    counts.into_iter().find(|&(id, c)| id > 0 && 2 * c > total).map(|(id, _)| id)
}

/// Labeled tracklet pairs from clips `gap ∈ 1..=max_gap` apart, using the
/// frozen model's predictions.
pub fn tam_pairs(model: &Model, scene: &Scene, max_gap: usize) -> Result<Vec<TamPair>, ModelError> {
    let mut per_clip: Vec<Vec<(Tracklet, Option<u32>)>> = Vec::new();
    for t in 1..scene.num_frames() {
        let pred = model.predict(&scene.clip(t))?;
        per_clip.push(
            pred.assembly
                .tracklets
                .into_iter()
                .map(|tr| {
                    let gt = majority_track(scene, &tr);
                    (tr, gt)
                })
                .collect(),
        );
    }
    if per_clip.iter().all(Vec::is_empty) {
        log::warn!("scene `{}` produced no tracklets; skipped", scene.name);
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for a in 0..per_clip.len() {
        for b in a + 1..per_clip.len().min(a + max_gap + 1) {
            for (ta, ga) in &per_clip[a] {
                let entry = BankEntry::from_tracklet(0, ta);
                for (tb, gb) in &per_clip[b] {
                    let (gap, iou) = pair_attributes(&entry, tb);
                    let label = matches!((ga, gb), (Some(x), Some(y)) if x == y) as u8 as f64;
                    pairs.push(TamPair { features: build_tam_features(&entry, tb, gap, iou), label });
                }
            }
        }
    }
    Ok(pairs)
}

/// Stage 2: fit the TAM on pairs from the frozen segmentation model with a
/// binary cross-entropy loss. Returns the loss per step; empty when no scene
/// yields a tracklet pair.
pub fn train_stage2(
    tam: &mut Tam,
    model: &Model,
    scenes: &[Scene],
    cfg: &TamTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    if cfg.epochs == 0 || budget == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for s in scenes {
        pairs.extend(tam_pairs(model, s, cfg.max_gap)?);
    }
    if pairs.is_empty() {
        log::warn!("no tracklet pairs; the TAM keeps its initial weights");
        return Ok(Vec::new());
    }
    train_on_pairs(tam, &pairs, cfg, &mut on_step)
}

pub fn train_on_pairs(tam: &mut Tam, pairs: &[TamPair], cfg: &TamTrainConfig, on_step: &mut impl FnMut(usize, f64)) -> Result<Vec<f64>, TrainError> {
    let width = tam.feature_len();
    if let Some(p) = pairs.iter().find(|p| p.features.len() != width) {
        return Err(ModelError::InvalidInput(format!("pair features of length {}, expected {width}", p.features.len())).into());
    }
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = OptimizerState::new(adam, &tam.store).with_group_lr(ParamGroup::Tracker, cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::new();
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if losses.len() >= budget {
                break 'outer;
            }
            let step = losses.len();
            let x: Vec<f64> = chunk.iter().flat_map(|&i| pairs[i].features.iter().copied()).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| pairs[i].label).collect();
            let mut g = tam.store.bind(true);
            let xn = g.constant(Tensor::matrix(chunk.len(), width, x));
            let yn = g.constant(Tensor::matrix(chunk.len(), 1, y));
            let logits = tam.logits(&mut g, xn)?;
            let loss = bce_mask_loss(&mut g, logits, yn)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            g.backward(loss)?;
            let grads = tam.store.grads_from(&g);
            opt.adamw_step(&mut tam.store, &grads, 1.0)?;
            on_step(step, value);
            losses.push(value);
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionManifest {
    pub format: String,
    pub version: u32,
    pub scene: String,
    pub association: String,
    pub frames: Vec<PredictionFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFrame {
    pub file: String,
    pub num_points: usize,
}

pub const PREDICTION_FORMAT: &str = "panoptic4d-predictions";

/// `pred_<t>.bin` per frame, then `pred_manifest.json`.
pub fn write_predictions(dir: &Path, scene: &str, association: &str, labels: &PanopticLabeling) -> Result<PredictionManifest, SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| SynthError::Io { path: dir.display().to_string(), source: e })?;
    let mut frames = Vec::with_capacity(labels.num_frames());
    for (t, f) in labels.frames.iter().enumerate() {
        let file = format!("pred_{t}.bin");
        write_label_file(&dir.join(&file), f)?;
        frames.push(PredictionFrame { file, num_points: f.len() });
    }
    let manifest = PredictionManifest { format: PREDICTION_FORMAT.into(), version: 1, scene: scene.into(), association: association.into(), frames };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("pred_manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_predictions(dir: &Path) -> Result<(PredictionManifest, PanopticLabeling), SynthError> {
    let path = dir.join("pred_manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SynthError::MissingFile(path.display().to_string()),
        _ => SynthError::Io { path: path.display().to_string(), source: e },
    })?;
    let manifest: PredictionManifest = serde_json::from_slice(&bytes).map_err(|e| SynthError::Format {
        file: path.display().to_string(),
        offset: e.column(),
        detail: e.to_string(),
    })?;
    if manifest.format != PREDICTION_FORMAT {
        return Err(SynthError::Format { file: path.display().to_string(), offset: 0, detail: format!("unknown format `{}`", manifest.format) });
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let p = dir.join(&f.file);
        let labels = read_label_file(&p)?;
        if labels.len() != f.num_points {
            return Err(SynthError::Format {
                file: p.display().to_string(),
                offset: 4,
                detail: format!("{} points, manifest says {}", labels.len(), f.num_points),
            });
        }
        frames.push(labels);
    }
    Ok((manifest, PanopticLabeling::new(frames)))
}
