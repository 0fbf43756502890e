//! Brute-force re-derivation of every metric for tiny instances.
//!
//! Nothing here shares code with the streaming evaluator: segments, overlaps
//! and switch events are found by exhaustive scans over the raw point lists.

use serde::Serialize;

use crate::labels::PanopticLabeling;

use super::{evaluate, MetricConfig, MetricReport, MetricsError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    /// Largest absolute difference over all compared values.
    pub max_discrepancy: f64,
    /// Which value produced it.
    pub worst: String,
    pub compared: usize,
}

struct Point {
    frame: usize,
    pred_class: u16,
    pred_track: u32,
    gt_class: u16,
    gt_track: u32,
}

struct Oracle<'a> {
    cfg: &'a MetricConfig,
    points: Vec<Point>,
    frames: usize,
}

fn distinct<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

/// Per-class brute-force values.
#[derive(Debug, Default, Clone)]
struct OracleClass {
    iou: Option<f64>,
    pq: Option<f64>,
    sq: Option<f64>,
    rq: Option<f64>,
    ptq: Option<f64>,
    sptq: Option<f64>,
}

impl<'a> Oracle<'a> {
    fn new(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &'a MetricConfig) -> Self {
        let mut points = Vec::new();
        for (f, (p, g)) in pred.frames.iter().zip(&gt.frames).enumerate() {
            for i in 0..g.class.len() {
                if Some(g.class[i]) == cfg.ignore_class {
                    continue;
                }
                points.push(Point { frame: f, pred_class: p.class[i], pred_track: p.track[i], gt_class: g.class[i], gt_track: g.track[i] });
            }
        }
        Oracle { cfg, points, frames: gt.frames.len() }
    }

    fn pred_segment(&self, p: &Point) -> (u16, u32) {
        let thing = self.cfg.palette.classes[p.pred_class as usize].thing;
        (p.pred_class, if thing { p.pred_track } else { 0 })
    }

    fn gt_segment(&self, p: &Point) -> (u16, u32) {
        let thing = self.cfg.palette.classes[p.gt_class as usize].thing;
        (p.gt_class, if thing { p.gt_track } else { 0 })
    }

    /// Every (pred segment, gt segment, IoU) with IoU > 0.5 in a frame.
    fn frame_matches(&self, f: usize) -> (Vec<(u16, u32)>, Vec<(u16, u32)>, Vec<((u16, u32), (u16, u32), f64)>) {
        let pts: Vec<&Point> = self.points.iter().filter(|p| p.frame == f).collect();
        let preds = distinct(pts.iter().map(|p| self.pred_segment(p)));
        let gts = distinct(pts.iter().map(|p| self.gt_segment(p)));
        let mut matches = Vec::new();
        for &ps in &preds {
            for &gs in &gts {
                if ps.0 != gs.0 {
                    continue;
                }
                let mut inter = 0usize;
                let mut union = 0usize;
                for p in &pts {
                    let a = self.pred_segment(p) == ps;
                    let b = self.gt_segment(p) == gs;
                    inter += (a && b) as usize;
                    union += (a || b) as usize;
                }
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    matches.push((ps, gs, iou));
                }
            }
        }
        (preds, gts, matches)
    }

    fn classes(&self) -> Vec<OracleClass> {
        let nc = self.cfg.palette.len();
        let mut tp = vec![0usize; nc];
        let mut fp = vec![0usize; nc];
        let mut fn_ = vec![0usize; nc];
        let mut iou_sum = vec![0.0; nc];
        let mut ids = vec![0usize; nc];
        let mut ids_iou = vec![0.0; nc];
        // (gt track, last matched predicted track)
        let mut last: Vec<(u32, u32)> = Vec::new();
        for f in 0..self.frames {
            let (preds, gts, matches) = self.frame_matches(f);
            for m in &matches {
                tp[m.1 .0 as usize] += 1;
                iou_sum[m.1 .0 as usize] += m.2;
            }
            for ps in &preds {
                if !matches.iter().any(|m| m.0 == *ps) {
                    fp[ps.0 as usize] += 1;
                }
            }
            for gs in &gts {
                if !matches.iter().any(|m| m.1 == *gs) {
                    fn_[gs.0 as usize] += 1;
                }
            }
            for &(ps, gs, iou) in &matches {
                if !self.cfg.palette.classes[gs.0 as usize].thing {
                    continue;
                }
                match last.iter_mut().find(|e| e.0 == gs.1) {
                    Some(e) => {
                        if e.1 != ps.1 {
                            ids[gs.0 as usize] += 1;
                            ids_iou[gs.0 as usize] += iou;
                        }
                        e.1 = ps.1;
                    }
                    None => last.push((gs.1, ps.1)),
                }
            }
        }
        (0..nc)
            .map(|c| {
                let inter = self.points.iter().filter(|p| p.gt_class as usize == c && p.pred_class as usize == c).count();
                let union = self.points.iter().filter(|p| p.gt_class as usize == c || p.pred_class as usize == c).count();
                let mut out = OracleClass::default();
                if union > 0 {
                    out.iou = Some(inter as f64 / union as f64);
                }
                if tp[c] + fp[c] + fn_[c] > 0 {
                    let denom = tp[c] as f64 + fp[c] as f64 / 2.0 + fn_[c] as f64 / 2.0;
                    out.pq = Some(iou_sum[c] / denom);
                    out.sq = Some(if tp[c] == 0 { 0.0 } else { iou_sum[c] / tp[c] as f64 });
                    out.rq = Some(tp[c] as f64 / denom);
                    out.ptq = Some(f64::max(0.0, (iou_sum[c] - ids[c] as f64) / denom));
                    out.sptq = Some(f64::max(0.0, (iou_sum[c] - ids_iou[c]) / denom));
                }
                out
            })
            .collect()
    }

    /// (S_assoc, TQ)
    fn association(&self) -> (f64, f64) {
        let gt_ids = distinct(self.points.iter().filter(|p| p.gt_track > 0).map(|p| p.gt_track));
        let pred_ids = distinct(self.points.iter().filter(|p| p.pred_track > 0).map(|p| p.pred_track));
        if gt_ids.is_empty() {
            return if pred_ids.is_empty() { (1.0, 1.0) } else { (0.0, 0.0) };
        }
        let mut assoc = 0.0;
        let mut tq = 0.0;
        for &t in &gt_ids {
            let size_t = self.points.iter().filter(|p| p.gt_track == t).count();
            let mut aq = 0.0;
            for &s in &pred_ids {
                let inter = self.points.iter().filter(|p| p.gt_track == t && p.pred_track == s).count();
                if inter == 0 {
                    continue;
                }
                let union = self.points.iter().filter(|p| p.gt_track == t || p.pred_track == s).count();
                aq += inter as f64 * (inter as f64 / union as f64);
            }
            aq /= size_t as f64;
            assoc += aq;

            // Frame-by-frame replay of this trajectory's matches.
            let frames_present = (0..self.frames).filter(|&f| self.points.iter().any(|p| p.frame == f && p.gt_track == t)).count();
            let mut switches = 0usize;
            let mut prev: Option<u32> = None;
            for f in 0..self.frames {
                let (_, _, matches) = self.frame_matches(f);
                let hit = matches.iter().find(|m| m.1 .1 == t && self.cfg.palette.classes[m.1 .0 as usize].thing).map(|m| m.0 .1);
                if let Some(q) = hit {
                    if prev.is_some() && prev != Some(q) {
                        switches += 1;
                    }
                    prev = Some(q);
                }
            }
            let span = if frames_present > 1 { frames_present - 1 } else { 1 };
            let keep = 1.0 - switches as f64 / span as f64;
            tq += (aq * keep).sqrt();
        }
        (assoc / gt_ids.len() as f64, tq / gt_ids.len() as f64)
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Compare a report against the brute-force values.
pub fn oracle_report(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig, report: &MetricReport) -> OracleReport {
    let o = Oracle::new(pred, gt, cfg);
    let classes = o.classes();
    let things: Vec<bool> = cfg.palette.classes.iter().map(|c| c.thing).collect();
    let pq_dagger = |c: usize| if things[c] { classes[c].pq } else { classes[c].iou.filter(|_| classes[c].pq.is_some()) };

    let miou = mean(classes.iter().map(|c| c.iou));
    let pq = mean(classes.iter().map(|c| c.pq));
    let (s_assoc, tq) = o.association();
    let pat = if pq + tq == 0.0 { 0.0 } else { 2.0 * pq * tq / (pq + tq) };
    let mut expected: Vec<(String, Option<f64>, Option<f64>)> = vec![
        ("miou".into(), Some(miou), Some(report.means.miou)),
        ("pq".into(), Some(pq), Some(report.means.pq)),
        ("sq".into(), Some(mean(classes.iter().map(|c| c.sq))), Some(report.means.sq)),
        ("rq".into(), Some(mean(classes.iter().map(|c| c.rq))), Some(report.means.rq)),
        ("pq_dagger".into(), Some(mean((0..classes.len()).map(pq_dagger))), Some(report.means.pq_dagger)),
        ("ptq".into(), Some(mean(classes.iter().map(|c| c.ptq))), Some(report.means.ptq)),
        ("sptq".into(), Some(mean(classes.iter().map(|c| c.sptq))), Some(report.means.sptq)),
        ("s_assoc".into(), Some(s_assoc), Some(report.means.s_assoc)),
        ("s_cls".into(), Some(miou), Some(report.means.s_cls)),
        ("lstq".into(), Some((s_assoc * miou).sqrt()), Some(report.means.lstq)),
        ("tq".into(), Some(tq), Some(report.means.tq)),
        ("pat".into(), Some(pat), Some(report.means.pat)),
    ];
    for (i, (c, r)) in classes.iter().zip(&report.classes).enumerate() {
        let name = &r.name;
        expected.push((format!("{name}.iou"), c.iou, r.iou));
        expected.push((format!("{name}.pq"), c.pq, r.pq));
        expected.push((format!("{name}.sq"), c.sq, r.sq));
        expected.push((format!("{name}.rq"), c.rq, r.rq));
        expected.push((format!("{name}.pq_dagger"), pq_dagger(i), r.pq_dagger));
        expected.push((format!("{name}.ptq"), c.ptq, r.ptq));
        expected.push((format!("{name}.sptq"), c.sptq, r.sptq));
    }

    let mut out = OracleReport { max_discrepancy: 0.0, worst: String::new(), compared: 0 };
    for (name, want, got) in expected {
        let d = match (want, got) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => continue,
            _ => f64::INFINITY,
        };
        out.compared += 1;
        if d > out.max_discrepancy || (d.is_nan() && !out.max_discrepancy.is_nan()) {
            out.max_discrepancy = d;
            out.worst = name;
        }
    }
    out
}

/// Evaluate with the streaming evaluator and cross-check against the oracle.
pub fn oracle_check(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &MetricConfig) -> Result<OracleReport, MetricsError> {
    let report = evaluate(pred, gt, cfg)?;
    Ok(oracle_report(pred, gt, cfg, &report))
}
