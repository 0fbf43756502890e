//! 4D panoptic evaluation: IoU/mIoU, PQ/SQ/RQ/PQ†, PTQ/sPTQ, LSTQ and PAT.
//!
//! Evaluation is streaming: [`MetricAccumulator::add_frame`] folds one
//! aligned (prediction, ground truth) frame into integer counts and
//! frame-ordered IoU sums, and [`MetricAccumulator::finish`] turns them into
//! a [`MetricReport`]. Batch evaluation is the same accumulator, so both give
//! bit-identical results.

mod oracle;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{ClassPalette, FrameLabels, PanopticLabeling};
use crate::par::{self, Exec};

pub use oracle::{oracle_check, oracle_report, OracleReport};

/// Segments match iff their IoU is strictly above this.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("frame count mismatch: prediction has {pred}, ground truth has {gt}")]
    FrameCount { pred: usize, gt: usize },
    #[error("frame {frame}: prediction has {pred} points, ground truth has {gt}")]
    PointCount { frame: usize, pred: usize, gt: usize },
    #[error("frame {frame}: class id {class} outside the palette")]
    UnknownClass { frame: usize, class: u16 },
    #[error("track ids of the pooled sequences exceed the 32-bit range")]
    TrackOverflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub palette: ClassPalette,
    /// Ground-truth class whose points are dropped from every count.
    pub ignore_class: Option<u16>,
}

impl MetricConfig {
    pub fn new(palette: ClassPalette) -> Self {
        MetricConfig { palette, ignore_class: None }
    }

    fn num_classes(&self) -> usize {
        self.palette.len()
    }

    /// Segment key of a labeled point: things split by track, stuff by class.
    fn segment_of(&self, class: u16, track: u32) -> (u16, u32) {
        if self.palette.is_thing(class) {
            (class, track)
        } else {
            (class, 0)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ClassCounts {
    sem_inter: u64,
    sem_pred: u64,
    sem_gt: u64,
    tp: u64,
    fp: u64,
    fn_: u64,
    iou_sum: f64,
    ids: u64,
    ids_iou: f64,
}

/// A thing match in one frame: gt track, predicted track, class, IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ThingMatch {
    gt: u32,
    pred: u32,
    class: u16,
    iou: f64,
}

/// Statistics of a single frame, independent of every other frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameStats {
    classes: Vec<ClassCounts>,
    matches: Vec<ThingMatch>,
    /// (gt track, pred track) → shared points.
    overlaps: Vec<((u32, u32), u64)>,
    gt_tracks: Vec<(u32, u64)>,
    pred_tracks: Vec<(u32, u64)>,
}

fn check_frame(idx: usize, pred: &FrameLabels, gt: &FrameLabels, cfg: &MetricConfig) -> Result<(), MetricsError> {
    if pred.len() != gt.len() || pred.track.len() != pred.class.len() || gt.track.len() != gt.class.len() {
        return Err(MetricsError::PointCount { frame: idx, pred: pred.len(), gt: gt.len() });
    }
    let n = cfg.num_classes();
    for (&p, &g) in pred.class.iter().zip(&gt.class) {
        if Some(g) == cfg.ignore_class {
            continue;
        }
        if let Some(&c) = [p, g].iter().find(|&&c| c as usize >= n) {
            return Err(MetricsError::UnknownClass { frame: idx, class: c });
        }
    }
    Ok(())
}

/// Per-frame statistics. Pure in its inputs, so frames can be processed in
/// any order or in parallel.
pub fn frame_stats(pred: &FrameLabels, gt: &FrameLabels, cfg: &MetricConfig) -> FrameStats {
    let nc = cfg.num_classes();
    let mut classes = vec![ClassCounts::default(); nc];
    let mut inter: HashMap<((u16, u32), (u16, u32)), u64> = HashMap::new();
    let mut pred_area: HashMap<(u16, u32), u64> = HashMap::new();
    let mut gt_area: HashMap<(u16, u32), u64> = HashMap::new();
    let mut overlaps: HashMap<(u32, u32), u64> = HashMap::new();
    let mut gt_tracks: HashMap<u32, u64> = HashMap::new();
    let mut pred_tracks: HashMap<u32, u64> = HashMap::new();

    for i in 0..gt.len() {
        let (gc, gtk) = (gt.class[i], gt.track[i]);
        if Some(gc) == cfg.ignore_class {
            continue;
        }
        let (pc, ptk) = (pred.class[i], pred.track[i]);
        classes[gc as usize].sem_gt += 1;
        classes[pc as usize].sem_pred += 1;
        if gc == pc {
            classes[gc as usize].sem_inter += 1;
        }
        let gs = cfg.segment_of(gc, gtk);
        let ps = cfg.segment_of(pc, ptk);
        *gt_area.entry(gs).or_default() += 1;
        *pred_area.entry(ps).or_default() += 1;
        if gs.0 == ps.0 {
            *inter.entry((ps, gs)).or_default() += 1;
        }
        if gtk > 0 {
            *gt_tracks.entry(gtk).or_default() += 1;
        }
        if ptk > 0 {
            *pred_tracks.entry(ptk).or_default() += 1;
        }
        if gtk > 0 && ptk > 0 {
            *overlaps.entry((gtk, ptk)).or_default() += 1;
        }
    }

    let mut pairs: Vec<(((u16, u32), (u16, u32)), u64)> = inter.into_iter().collect();
    pairs.sort_unstable_by_key(|p| p.0);
    let mut matched_pred = Vec::new();
    let mut matched_gt = Vec::new();
    let mut matches = Vec::new();
    for ((ps, gs), i) in pairs {
        let union = pred_area[&ps] + gt_area[&gs] - i;
        let iou = i as f64 / union as f64;
        if iou > MATCH_IOU {
            let c = &mut classes[gs.0 as usize];
            c.tp += 1;
            c.iou_sum += iou;
            matched_pred.push(ps);
            matched_gt.push(gs);
            if cfg.palette.is_thing(gs.0) {
                matches.push(ThingMatch { gt: gs.1, pred: ps.1, class: gs.0, iou });
            }
        }
    }
    for s in pred_area.keys() {
        if !matched_pred.contains(s) {
            classes[s.0 as usize].fp += 1;
        }
    }
    for s in gt_area.keys() {
        if !matched_gt.contains(s) {
            classes[s.0 as usize].fn_ += 1;
        }
    }
    matches.sort_unstable_by_key(|m| m.gt);

    let sorted = |m: HashMap<u32, u64>| {
        let mut v: Vec<(u32, u64)> = m.into_iter().collect();
        v.sort_unstable();
        v
    };
    let mut overlaps: Vec<((u32, u32), u64)> = overlaps.into_iter().collect();
    overlaps.sort_unstable();
    FrameStats { classes, matches, overlaps, gt_tracks: sorted(gt_tracks), pred_tracks: sorted(pred_tracks) }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct TrackRecord {
    points: u64,
    frames: u64,
    ids: u64,
    last_pred: Option<u32>,
}

/// Streaming evaluator state.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    cfg: MetricConfig,
    frames: usize,
    classes: Vec<ClassCounts>,
    gt_tracks: BTreeMap<u32, TrackRecord>,
    pred_tracks: BTreeMap<u32, u64>,
    overlaps: BTreeMap<(u32, u32), u64>,
}

impl MetricAccumulator {
    pub fn new(cfg: MetricConfig) -> Self {
        let n = cfg.num_classes();
        MetricAccumulator {
            cfg,
            frames: 0,
            classes: vec![ClassCounts::default(); n],
            gt_tracks: BTreeMap::new(),
            pred_tracks: BTreeMap::new(),
            overlaps: BTreeMap::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn add_frame(&mut self, pred: &FrameLabels, gt: &FrameLabels) -> Result<(), MetricsError> {
        check_frame(self.frames, pred, gt, &self.cfg)?;
        let stats = frame_stats(pred, gt, &self.cfg);
        self.absorb(&stats);
        Ok(())
    }

    /// Fold precomputed per-frame statistics; frames must arrive in order.
    pub fn absorb(&mut self, s: &FrameStats) {
        self.frames += 1;
        for (acc, c) in self.classes.iter_mut().zip(&s.classes) {
            acc.sem_inter += c.sem_inter;
            acc.sem_pred += c.sem_pred;
            acc.sem_gt += c.sem_gt;
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
            acc.iou_sum += c.iou_sum;
        }
        for &(t, n) in &s.gt_tracks {
            let r = self.gt_tracks.entry(t).or_default();
            r.points += n;
            r.frames += 1;
        }
        for &(t, n) in &s.pred_tracks {
            *self.pred_tracks.entry(t).or_default() += n;
        }
        for &(k, n) in &s.overlaps {
            *self.overlaps.entry(k).or_default() += n;
        }
        for m in &s.matches {
            let r = self.gt_tracks.entry(m.gt).or_default();
            if r.last_pred.is_some_and(|p| p != m.pred) {
                r.ids += 1;
                let c = &mut self.classes[m.class as usize];
                c.ids += 1;
                c.ids_iou += m.iou;
            }
            r.last_pred = Some(m.pred);
        }
    }

    pub fn finish(&self) -> MetricReport {
        let cfg = &self.cfg;
        let mut per_class = Vec::with_capacity(cfg.num_classes());
        for (i, c) in self.classes.iter().enumerate() {
            let info = &cfg.palette.classes[i];
            let sem_union = c.sem_pred + c.sem_gt - c.sem_inter;
            let iou = (sem_union > 0).then(|| c.sem_inter as f64 / sem_union as f64);
            let seg = c.tp + c.fp + c.fn_;
            let (mut pq, mut sq, mut rq, mut ptq, mut sptq, mut pq_dagger) = (None, None, None, None, None, None);
            if seg > 0 {
                let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
                let s = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
                let r = c.tp as f64 / denom;
                sq = Some(s);
                rq = Some(r);
                pq = Some(s * r);
                ptq = Some(((c.iou_sum - c.ids as f64) / denom).max(0.0));
                sptq = Some(((c.iou_sum - c.ids_iou) / denom).max(0.0));
                pq_dagger = if info.thing { pq } else { iou };
            }
            per_class.push(ClassMetrics {
                name: info.name.clone(),
                thing: info.thing,
                iou,
                pq,
                sq,
                rq,
                pq_dagger,
                ptq,
                sptq,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                ids: c.ids,
            });
        }
        let mean_of = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
            let v: Vec<f64> = per_class.iter().filter_map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let sub_mean = |thing: bool| {
            let v: Vec<f64> = per_class.iter().filter(|c| c.thing == thing).filter_map(|c| c.pq).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let miou = mean_of(&|c| c.iou);
        let pq = mean_of(&|c| c.pq);

        let (s_assoc, tq) = self.association();
        let s_cls = miou;
        let lstq = (s_assoc * s_cls).sqrt();
        let means = MeanMetrics {
            miou,
            pq,
            sq: mean_of(&|c| c.sq),
            rq: mean_of(&|c| c.rq),
            pq_dagger: mean_of(&|c| c.pq_dagger),
            pq_things: sub_mean(true),
            pq_stuff: sub_mean(false),
            ptq: mean_of(&|c| c.ptq),
            sptq: mean_of(&|c| c.sptq),
            s_assoc,
            s_cls,
            lstq,
            tq,
            pat: harmonic(pq, tq),
        };
        MetricReport { frames: self.frames, classes: per_class, means }
    }

    /// (S_assoc, TQ) over class-agnostic 4D track volumes.
    fn association(&self) -> (f64, f64) {
        if self.gt_tracks.values().all(|r| r.points == 0) {
            let empty = if self.pred_tracks.is_empty() { 1.0 } else { 0.0 };
            return (empty, empty);
        }
        let mut per_track: BTreeMap<u32, f64> = BTreeMap::new();
        for (&(g, p), &inter) in &self.overlaps {
            let gsize = self.gt_tracks[&g].points;
            let psize = self.pred_tracks[&p];
            let iou = inter as f64 / (gsize + psize - inter) as f64;
            *per_track.entry(g).or_default() += inter as f64 * iou;
        }
        let mut assoc_sum = 0.0;
        let mut tq_sum = 0.0;
        let mut count = 0usize;
        for (g, r) in &self.gt_tracks {
            if r.points == 0 {
                continue;
            }
            let aq = per_track.get(g).copied().unwrap_or(0.0) / r.points as f64;
            let switch_penalty = 1.0 - r.ids as f64 / (r.frames.saturating_sub(1)).max(1) as f64;
            assoc_sum += aq;
            tq_sum += (aq * switch_penalty.max(0.0)).sqrt();
            count += 1;
        }
        (assoc_sum / count as f64, tq_sum / count as f64)
    }
}

/// `2ab/(a+b)`, zero when both are zero.
pub fn harmonic(a: f64, b: f64) -> f64 {
    if a + b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub thing: bool,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub pq_dagger: Option<f64>,
    pub ptq: Option<f64>,
    pub sptq: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub ids: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub miou: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_dagger: f64,
    /// `None` when no class of that kind occurs.
    pub pq_things: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub ptq: f64,
    pub sptq: f64,
    pub s_assoc: f64,
    pub s_cls: f64,
    pub lstq: f64,
    pub tq: f64,
    pub pat: f64,
}

impl MeanMetrics {
    /// Name/value pairs in a fixed order (CSV columns, comparisons).
    pub fn named(&self) -> [(&'static str, f64); 12] {
        [
            ("miou", self.miou),
            ("pq", self.pq),
            ("sq", self.sq),
            ("rq", self.rq),
            ("pq_dagger", self.pq_dagger),
            ("ptq", self.ptq),
            ("sptq", self.sptq),
            ("s_assoc", self.s_assoc),
            ("s_cls", self.s_cls),
            ("lstq", self.lstq),
            ("tq", self.tq),
            ("pat", self.pat),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub classes: Vec<ClassMetrics>,
    pub means: MeanMetrics,
}

impl MetricReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["frames".to_string()];
        cols.extend(MeanMetrics::named(&MeanMetrics::zero()).iter().map(|(n, _)| n.to_string()));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.frames.to_string()];
        cols.extend(self.means.named().iter().map(|(_, v)| format!("{v:.6}")));
        cols.join(",")
    }
}

impl MeanMetrics {
    fn zero() -> Self {
        MeanMetrics {
            miou: 0.0,
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
            pq_dagger: 0.0,
            pq_things: None,
            pq_stuff: None,
            ptq: 0.0,
            sptq: 0.0,
            s_assoc: 0.0,
            s_cls: 0.0,
            lstq: 0.0,
            tq: 0.0,
            pat: 0.0,
        }
    }
}

/// Batch evaluation of a whole sequence. Per-frame statistics are computed
/// in parallel and folded in frame order.
pub fn evaluate(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<MetricReport, MetricsError> {
    let mut acc = MetricAccumulator::new(cfg.clone());
    evaluate_into(&mut acc, pred, gt, Exec::kernels())?;
    Ok(acc.finish())
}

/// Fold a whole sequence into an accumulator (e.g. one of several scenes).
pub fn evaluate_into(acc: &mut MetricAccumulator, pred: &PanopticLabeling, gt: &PanopticLabeling, exec: Exec) -> Result<(), MetricsError> {
    if pred.frames.len() != gt.frames.len() {
        return Err(MetricsError::FrameCount { pred: pred.frames.len(), gt: gt.frames.len() });
    }
    for (i, (p, g)) in pred.frames.iter().zip(&gt.frames).enumerate() {
        check_frame(acc.frames + i, p, g, &acc.cfg)?;
    }
    let cfg = acc.cfg.clone();
    let stats = par::map_range(exec, pred.frames.len(), |i| frame_stats(&pred.frames[i], &gt.frames[i], &cfg));
    for s in &stats {
        acc.absorb(s);
    }
    Ok(())
}

/// Pool several sequences into one report. Track ids are shifted per
/// sequence so that ids from different sequences never meet.
pub fn evaluate_scenes(scenes: &[(PanopticLabeling, PanopticLabeling)], cfg: &MetricConfig) -> Result<MetricReport, MetricsError> {
    let mut acc = MetricAccumulator::new(cfg.clone());
    let mut offset: u64 = 0;
    for (pred, gt) in scenes {
        let max_id = pred.frames.iter().chain(&gt.frames).flat_map(|f| f.track.iter().copied()).max().unwrap_or(0) as u64;
        if offset + max_id > u32::MAX as u64 {
            return Err(MetricsError::TrackOverflow);
        }
        let shift = |l: &PanopticLabeling| {
            let frames = l
                .frames
                .iter()
                .map(|f| FrameLabels::new(f.class.clone(), f.track.iter().map(|&t| if t == 0 { 0 } else { t + offset as u32 }).collect()))
                .collect();
            PanopticLabeling::new(frames)
        };
        evaluate_into(&mut acc, &shift(pred), &shift(gt), Exec::kernels())?;
        offset += max_id;
    }
    Ok(acc.finish())
}

/// Per-class IoU and mIoU.
pub fn semantic_iou(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<(Vec<Option<f64>>, f64), MetricsError> {
    let r = evaluate(pred, gt, cfg)?;
    Ok((r.classes.iter().map(|c| c.iou).collect(), r.means.miou))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_dagger: f64,
}

pub fn pq_family(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<PqSummary, MetricsError> {
    let m = evaluate(pred, gt, cfg)?.means;
    Ok(PqSummary { pq: m.pq, sq: m.sq, rq: m.rq, pq_dagger: m.pq_dagger })
}

/// (PTQ, sPTQ)
pub fn ptq(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<(f64, f64), MetricsError> {
    let m = evaluate(pred, gt, cfg)?.means;
    Ok((m.ptq, m.sptq))
}

/// (S_assoc, S_cls, LSTQ)
pub fn lstq(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<(f64, f64, f64), MetricsError> {
    let m = evaluate(pred, gt, cfg)?.means;
    Ok((m.s_assoc, m.s_cls, m.lstq))
}

/// (PAT, TQ, PQ)
pub fn pat(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<(f64, f64, f64), MetricsError> {
    let m = evaluate(pred, gt, cfg)?.means;
    Ok((m.pat, m.tq, m.pq))
}

#[cfg(test)]
mod tests;
