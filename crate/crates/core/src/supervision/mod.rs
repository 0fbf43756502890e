//! Stage-1 training: bipartite matching of queries to targets, mask and
//! class losses with deep supervision, and the training loop.

mod losses;
mod matching;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, AdamWConfig, AutodiffError, Graph, NodeId, OptimizerState, ParamGroup, StepDecay, Tensor};
use crate::labels::{ClassPalette, FrameLabels};
use crate::model::{ForwardOutput, Model};
use crate::nn::ModelError;
use crate::synthworld::{augment_clip, AugmentParams, PointCloudClip, Scene, SynthError};

pub use crate::encoder::pseudo_fusion_loss;
pub use losses::{bce_mask_loss, cls_loss, dice_loss, dice_on_probs, total_loss, BlockLosses, LossReport, LossWeights, DICE_EPS};
pub use matching::{build_cost, hungarian_match, mask_iou, MatchResult, Target};

/// Thing tracks of the clip (by track id) followed by one segment per stuff
/// class present (by class id).
pub fn build_targets(labels: &FrameLabels, palette: &ClassPalette) -> Vec<Target> {
    let n = labels.len();
    let mut tracks: Vec<(u32, u16)> = Vec::new();
    let mut stuff: Vec<u16> = Vec::new();
    for (&c, &t) in labels.class.iter().zip(&labels.track) {
        if palette.is_thing(c) && t > 0 {
            if !tracks.iter().any(|x| x.0 == t) {
                tracks.push((t, c));
            }
        } else if !palette.is_thing(c) && !stuff.contains(&c) {
            stuff.push(c);
        }
    }
    tracks.sort_unstable();
    stuff.sort_unstable();
    let mut out: Vec<Target> = tracks
        .iter()
        .map(|&(t, c)| Target { class: c, track: t, mask: (0..n).map(|i| labels.track[i] == t && labels.class[i] == c).collect() })
        .collect();
    out.extend(stuff.iter().map(|&c| Target { class: c, track: 0, mask: (0..n).map(|i| labels.class[i] == c && !palette.is_thing(c)).collect() }));
    out
}

/// Matching and losses for every block of a forward pass. Each block is
/// matched independently; unmatched queries only get the "no object"
/// classification term.
pub fn clip_losses(
    g: &mut Graph,
    out: &ForwardOutput,
    targets: &[Target],
    no_object: usize,
    no_object_weight: f64,
    weights: LossWeights,
) -> Result<(NodeId, LossReport), AutodiffError> {
    let n = targets.first().map_or(0, |t| t.mask.len());
    let mut blocks = Vec::with_capacity(out.masks.len());
    let mut total = out.encoder.pf_loss;
    for (&m, &c) in out.masks.iter().zip(&out.classes) {
        let mv = g.value(m);
        let mask_probs = Tensor::new(mv.shape().to_vec(), mv.data().iter().map(|&x| kernels::sigmoid(x)).collect());
        let cv = g.value(c);
        let class_probs = Tensor::new(cv.shape().to_vec(), kernels::softmax_rows(cv.data(), cv.cols()));
        let t = cv.rows();
        let matching = hungarian_match(&build_cost(&mask_probs, &class_probs, targets));

        let qs: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
        let mut tgt = Vec::with_capacity(qs.len() * n);
        for &(_, k) in &matching.pairs {
            tgt.extend(targets[k].mask.iter().map(|&b| b as u8 as f64));
        }
        let mt = g.transpose(m);
        let sel = g.gather_rows(mt, &qs)?;
        let tgt = g.constant(Tensor::matrix(qs.len(), n, tgt));
        let ce = bce_mask_loss(g, sel, tgt)?;
        let dice = dice_loss(g, sel, tgt)?;

        let mut cls_t = vec![no_object; t];
        let mut cls_w = vec![no_object_weight; t];
        for &(q, k) in &matching.pairs {
            cls_t[q] = targets[k].class as usize;
            cls_w[q] = 1.0;
        }
        let cls = cls_loss(g, c, &cls_t, &cls_w)?;
        blocks.push(BlockLosses { ce: g.value(ce).item(), dice: g.value(dice).item(), cls: g.value(cls).item() });

        let a = g.scale(ce, weights.ce);
        let b = g.scale(dice, weights.dice);
        let d = g.scale(cls, weights.cls);
        let ab = g.add(a, b)?;
        let abd = g.add(ab, d)?;
        total = g.add(total, abd)?;
    }
    let pf = g.value(out.encoder.pf_loss).item();
    let mut report = total_loss(&blocks, pf, weights);
    report.total = g.value(total).item();
    Ok((total, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    pub lr_lidar: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub decay: StepDecay,
    pub seed: u64,
    pub augment: AugmentParams,
    pub loss_weights: LossWeights,
    /// Classification weight of queries supervised toward "no object".
    pub no_object_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            max_steps: None,
            lr_lidar: 3e-3,
            lr_rest: 1e-4,
            weight_decay: 1e-4,
            decay: StepDecay::default(),
            seed: 0,
            augment: AugmentParams::default(),
            loss_weights: LossWeights::default(),
            no_object_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, detail: &str| Err(TrainError::InvalidConfig { field, detail: detail.into() });
        for (field, v) in [("lr_lidar", self.lr_lidar), ("lr_rest", self.lr_rest)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "must be positive and finite");
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.decay.factor > 0.0 && self.decay.factor <= 1.0) {
            return bad("decay.factor", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.no_object_weight) {
            return bad("no_object_weight", "must be in [0, 1]");
        }
        let w = self.loss_weights;
        if [w.ce, w.dice, w.cls].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss_weights", "must be non-negative");
        }
        self.augment.validate().map_err(|e| TrainError::InvalidConfig { field: "augment", detail: e.to_string() })
    }

    pub fn optimizer(&self, model: &Model) -> OptimizerState {
        let cfg = AdamWConfig { lr: self.lr_rest, weight_decay: self.weight_decay, ..AdamWConfig::default() };
        OptimizerState::new(cfg, &model.store).with_group_lr(ParamGroup::Lidar, self.lr_lidar).with_group_lr(ParamGroup::Rest, self.lr_rest)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("invalid training config `{field}`: {detail}")]
    InvalidConfig { field: &'static str, detail: String },
    #[error("no training clips")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Sums over blocks.
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    pub pf: f64,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,l_ce,l_dice,l_cls,l_pf,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.ce, self.dice, self.cls, self.pf, self.total)
    }
}

/// Every 2-frame clip `(t−1, t)` of every scene.
pub fn training_clips(scenes: &[Scene]) -> Vec<PointCloudClip> {
    scenes.iter().flat_map(|s| (1..s.num_frames()).map(move |t| s.clip(t))).collect()
}

/// One optimization step on a single clip. Returns the loss report before
/// the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    clip: &PointCloudClip,
    cfg: &TrainConfig,
    lr_scale: f64,
    step: usize,
) -> Result<LossReport, TrainError> {
    let geo = model.geometry(clip)?;
    let targets = build_targets(&clip.labels, &model.palette);
    let mut g = model.store.bind(true);
    let out = model.forward(&mut g, &geo)?;
    let (total, report) = clip_losses(&mut g, &out, &targets, model.decoder.no_object(), cfg.no_object_weight, cfg.loss_weights)?;
    if !report.total.is_finite() {
        return Err(TrainError::Diverged { step });
    }
    g.backward(total)?;
    let grads = model.store.grads_from(&g);
    opt.adamw_step(&mut model.store, &grads, lr_scale).map_err(|e| match e {
        AutodiffError::NonFiniteGradient(_) => TrainError::Diverged { step },
        e => e.into(),
    })?;
    Ok(report)
}

/// Stage-1 loop: per epoch, visit the clips in a seeded random order,
/// augment, forward, match per block, backpropagate and take an AdamW step.
pub fn train_stage1(
    model: &mut Model,
    clips: &[PointCloudClip],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate()?;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    if cfg.epochs == 0 || budget == 0 {
        return Ok(Vec::new());
    }
    if clips.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer(model);
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let scale = cfg.decay.scale(epoch);
        for &ci in &order {
            if logs.len() >= budget {
                break 'outer;
            }
            let step = logs.len();
            let clip = augment_clip(&clips[ci], &cfg.augment, rng.random())?;
            let r = train_step(model, &mut opt, &clip, cfg, scale, step)?;
            let log = StepLog { step, epoch, ce: r.sum_ce(), dice: r.sum_dice(), cls: r.sum_cls(), pf: r.pf, total: r.total };
            log::debug!("step {step} epoch {epoch} loss {:.5}", r.total);
            on_step(&log);
            logs.push(log);
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests;
