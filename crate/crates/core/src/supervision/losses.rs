use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

pub const DICE_EPS: f64 = 1e-6;

/// Mean binary cross-entropy `softplus(x) − t·x` over all entries.
pub fn bce_mask_loss(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<NodeId> {
    if g.value(logits).is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let sp = g.softplus(logits);
    let tx = g.mul(target, logits)?;
    let l = g.sub(sp, tx)?;
    Ok(g.mean(l))
}

/// Row-wise `1 − 2Σ(p·t) / (Σp + Σt + ε)` on `p = sigmoid(logits)`,
/// averaged over rows.
pub fn dice_loss(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<NodeId> {
    let p = g.sigmoid(logits);
    dice_on_probs(g, p, target)
}

pub fn dice_on_probs(g: &mut Graph, p: NodeId, target: NodeId) -> Result<NodeId> {
    if g.value(p).rows() == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pt = g.mul(p, target)?;
    let num = g.sum_cols(pt);
    let sp = g.sum_cols(p);
    let st = g.sum_cols(target);
    let den = g.add(sp, st)?;
    let den = g.add_const(den, DICE_EPS);
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio);
    let m = g.scale(m, -2.0);
    Ok(g.add_const(m, 1.0))
}

/// Weighted categorical cross-entropy over the `1 + C` columns. Row `q` has
/// target class `targets[q]` and weight `weights[q]`.
pub fn cls_loss(g: &mut Graph, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
    let (t, c) = (g.value(logits).rows(), g.value(logits).cols());
    assert_eq!(targets.len(), t, "one target per query");
    let total: f64 = weights.iter().sum();
    if t == 0 || total <= 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut pick = vec![0.0; t * c];
    for (q, (&k, &w)) in targets.iter().zip(weights).enumerate() {
        pick[q * c + k] = -w / total;
    }
    let pick = g.constant(Tensor::matrix(t, c, pick));
    let lp = g.log_softmax(logits);
    let l = g.mul(pick, lp)?;
    Ok(g.sum(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 5.0, dice: 2.0, cls: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockLosses {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub blocks: Vec<BlockLosses>,
    pub pf: f64,
    pub total: f64,
}

impl LossReport {
    pub fn sum_ce(&self) -> f64 {
        self.blocks.iter().map(|b| b.ce).sum()
    }

    pub fn sum_dice(&self) -> f64 {
        self.blocks.iter().map(|b| b.dice).sum()
    }

    pub fn sum_cls(&self) -> f64 {
        self.blocks.iter().map(|b| b.cls).sum()
    }
}

/// `L_pf + Σ_b (w_ce·L_ce + w_dice·L_dice + w_cls·L_cls)`.
pub fn total_loss(blocks: &[BlockLosses], pf: f64, w: LossWeights) -> LossReport {
    let mut total = pf;
    for b in blocks {
        total += w.ce * b.ce + w.dice * b.dice + w.cls * b.cls;
    }
    LossReport { blocks: blocks.to_vec(), pf, total }
}
