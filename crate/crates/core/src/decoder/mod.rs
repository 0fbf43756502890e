//! Query-based panoptic decoder: learned queries refined by fusion blocks
//! with soft-masked cross-attention, mask and class heads, and per-clip
//! panoptic assembly into labels and tracklets.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, NodeId, ParamGroup, ParamId, ParamStore, RowMix, Tensor};
use crate::encoder::{ClipGeometry, EncoderOutput, NUM_LEVELS};
use crate::geometry::Vec3;
use crate::labels::ClassPalette;
use crate::nn::{Linear, Mlp, ModelError};

type Result<T> = std::result::Result<T, ModelError>;

pub const NUM_BLOCKS: usize = 4;
pub const ALPHA_INIT: f64 = 1.0;

/// Single-head attention projections, all `D × D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttnParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Rest;
        AttnParams {
            wq: store.add_weight(format!("{name}.wq"), g, dim, dim, rng),
            wk: store.add_weight(format!("{name}.wk"), g, dim, dim, rng),
            wv: store.add_weight(format!("{name}.wv"), g, dim, dim, rng),
        }
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.wq, self.wk, self.wv]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub voxel_attn: AttnParams,
    pub self_attn1: AttnParams,
    pub ffn1: Mlp,
    pub image_attn: AttnParams,
    pub self_attn2: AttnParams,
    pub ffn2: Mlp,
    /// `[1, 1]` mask-bias weight shared by both cross-attentions.
    pub alpha: ParamId,
}

impl BlockParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Rest;
        BlockParams {
            voxel_attn: AttnParams::new(store, &format!("{name}.voxel_attn"), dim, rng),
            self_attn1: AttnParams::new(store, &format!("{name}.self1"), dim, rng),
            ffn1: Mlp::new(store, &format!("{name}.ffn1"), g, &[dim, 2 * dim, dim], rng),
            image_attn: AttnParams::new(store, &format!("{name}.image_attn"), dim, rng),
            self_attn2: AttnParams::new(store, &format!("{name}.self2"), dim, rng),
            ffn2: Mlp::new(store, &format!("{name}.ffn2"), g, &[dim, 2 * dim, dim], rng),
            alpha: store.add(format!("{name}.alpha"), g, Tensor::full(vec![1, 1], ALPHA_INIT)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for a in [&self.voxel_attn, &self.self_attn1, &self.image_attn, &self.self_attn2] {
            v.extend(a.params());
        }
        v.extend(self.ffn1.params());
        v.extend(self.ffn2.params());
        v.push(self.alpha);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dim: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    /// `[T, D]` learned initial queries.
    pub queries: ParamId,
    pub blocks: Vec<BlockParams>,
    /// `D → 1 + C`; the last column scores "no object".
    pub class_head: Linear,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, num_queries: usize, num_classes: usize, rng: &mut R) -> Self {
        let queries = store.add_weight("dec.queries", ParamGroup::Rest, num_queries, dim, rng);
        let blocks = (0..NUM_BLOCKS).map(|b| BlockParams::new(store, &format!("dec.block{b}"), dim, rng)).collect();
        let class_head = Linear::new(store, "dec.class_head", ParamGroup::Rest, dim, num_classes + 1, rng);
        DecoderParams { dim, num_queries, num_classes, queries, blocks, class_head }
    }

    pub fn no_object(&self) -> usize {
        self.num_classes
    }
}

/// Mask bias `M_vᵀ` (`T × M`) and its weight `α` (`[1, 1]`).
#[derive(Debug, Clone, Copy)]
pub struct MaskBias {
    pub mask: NodeId,
    pub alpha: NodeId,
}

fn check_rows(g: &Graph, what: &str, node: NodeId, rows: usize, cols: usize) -> Result<()> {
    let s = g.value(node).shape();
    if g.value(node).rows() != rows || g.value(node).cols() != cols {
        return Err(ModelError::InvalidInput(format!("{what} has shape {s:?}, expected [{rows}, {cols}]")));
    }
    Ok(())
}

/// Attention weights `softmax((Q W_q (F W_k + E)ᵀ + α M_vᵀ) / √D)`.
pub fn attention_weights(g: &mut Graph, q: NodeId, feats: NodeId, enc: Option<NodeId>, bias: Option<MaskBias>, p: &AttnParams) -> Result<NodeId> {
    let (t, d) = (g.value(q).rows(), g.value(q).cols());
    let m = g.value(feats).rows();
    check_rows(g, "features", feats, m, d)?;
    if let Some(e) = enc {
        check_rows(g, "encodings", e, m, d)?;
    }
    if let Some(b) = bias {
        check_rows(g, "mask bias", b.mask, t, m)?;
        check_rows(g, "alpha", b.alpha, 1, 1)?;
    }
    let qp = g.matmul(q, p.wq.node())?;
    let mut k = g.matmul(feats, p.wk.node())?;
    if let Some(e) = enc {
        k = g.add(k, e)?;
    }
    let mut logits = g.matmul_nt(qp, k)?;
    if let Some(b) = bias {
        let scaled = g.mul_scalar(b.mask, b.alpha)?;
        logits = g.add(logits, scaled)?;
    }
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(g.softmax(logits))
}

/// Attention output before the residual: `weights · F W_v`.
pub fn attention(g: &mut Graph, q: NodeId, feats: NodeId, enc: Option<NodeId>, bias: Option<MaskBias>, p: &AttnParams) -> Result<NodeId> {
    let w = attention_weights(g, q, feats, enc, bias, p)?;
    let v = g.matmul(feats, p.wv.node())?;
    Ok(g.matmul(w, v)?)
}

/// Soft-masked cross-attention with residual and layer norm. With no
/// features the queries pass through unchanged.
pub fn soft_masked_xattn(g: &mut Graph, q: NodeId, feats: NodeId, enc: Option<NodeId>, bias: Option<MaskBias>, p: &AttnParams) -> Result<NodeId> {
    if g.value(feats).rows() == 0 {
        return Ok(q);
    }
    let a = attention(g, q, feats, enc, bias, p)?;
    let r = g.add(q, a)?;
    Ok(g.layer_norm(r))
}

pub fn self_attention(g: &mut Graph, q: NodeId, p: &AttnParams) -> Result<NodeId> {
    soft_masked_xattn(g, q, q, None, None, p)
}

pub fn feed_forward(g: &mut Graph, q: NodeId, mlp: &Mlp) -> Result<NodeId> {
    let h = mlp.forward(g, q)?;
    let r = g.add(q, h)?;
    Ok(g.layer_norm(r))
}

/// Inputs of one fusion block at a single stride.
#[derive(Debug, Clone)]
pub struct BlockInputs {
    /// `V_i`, `N_i × D`.
    pub voxels: NodeId,
    pub voxel_pe: NodeId,
    /// `F_i`, `M_i × D`, with the encodings of their source voxels.
    pub image: NodeId,
    pub image_pe: NodeId,
    /// Point features pooled to this stride (`N_i × D`), used for mask bias.
    pub pooled_z: NodeId,
    /// Voxels → image rows.
    pub tag_gather: Arc<RowMix>,
}

/// `[T, M]` bias rows: `Q · pool(Z)ᵀ`, detached from the graph.
fn mask_bias(g: &mut Graph, q: NodeId, keys_z: NodeId, alpha: ParamId) -> Result<MaskBias> {
    let q = g.detach(q);
    let m = g.matmul_nt(q, keys_z)?;
    Ok(MaskBias { mask: g.detach(m), alpha: alpha.node() })
}

/// voxel x-attn → self-attn → FFN → image x-attn → self-attn → FFN.
pub fn fusion_block(g: &mut Graph, q: NodeId, inputs: &BlockInputs, p: &BlockParams, use_mask_bias: bool) -> Result<NodeId> {
    let bias = if use_mask_bias { Some(mask_bias(g, q, inputs.pooled_z, p.alpha)?) } else { None };
    let q = soft_masked_xattn(g, q, inputs.voxels, Some(inputs.voxel_pe), bias, &p.voxel_attn)?;
    let q = self_attention(g, q, &p.self_attn1)?;
    let q = feed_forward(g, q, &p.ffn1)?;
    let bias = if use_mask_bias && g.value(inputs.image).rows() > 0 {
        let z_rows = g.mix(inputs.pooled_z, &inputs.tag_gather)?;
        Some(mask_bias(g, q, z_rows, p.alpha)?)
    } else {
        None
    };
    let q = soft_masked_xattn(g, q, inputs.image, Some(inputs.image_pe), bias, &p.image_attn)?;
    let q = self_attention(g, q, &p.self_attn2)?;
    feed_forward(g, q, &p.ffn2)
}

/// Per-stride block inputs from an encoder pass, stride 1 first.
pub fn block_inputs(g: &mut Graph, geo: &ClipGeometry, enc: &EncoderOutput) -> Result<Vec<BlockInputs>> {
    if enc.voxels.len() != NUM_LEVELS || geo.image_rows.len() != NUM_LEVELS {
        return Err(ModelError::InvalidInput(format!("decoder needs {NUM_LEVELS} voxel strides, got {}", enc.voxels.len())));
    }
    let z = g.detach(enc.z);
    let mut out = Vec::with_capacity(NUM_LEVELS);
    for l in 0..NUM_LEVELS {
        let rows = &geo.image_rows[l];
        let f4 = g.mix(enc.images.i4, &rows.from4)?;
        let f8 = g.mix(enc.images.i8, &rows.from8)?;
        let image = g.concat_rows(&[f4, f8])?;
        let pe = &geo.voxel_pe[l];
        let image_pe = g.constant(Tensor::matrix(rows.len(), pe.cols(), rows.tag_gather.apply(pe.data(), pe.cols())));
        out.push(BlockInputs {
            voxels: enc.voxels[l],
            voxel_pe: g.constant(pe.clone()),
            image,
            image_pe,
            pooled_z: g.mix(z, &geo.mask_pool[l])?,
            tag_gather: Arc::clone(&rows.tag_gather),
        });
    }
    Ok(out)
}

/// Run the blocks coarse to fine (stride 8, 4, 2, 1). Returns the query set
/// after every block; the last one is `Q′`.
pub fn decode(g: &mut Graph, inputs: &[BlockInputs], params: &DecoderParams, use_mask_bias: bool) -> Result<Vec<NodeId>> {
    if inputs.len() != NUM_LEVELS {
        return Err(ModelError::InvalidInput(format!("decoder needs {NUM_LEVELS} strides, got {}", inputs.len())));
    }
    let mut q = params.queries.node();
    let mut out = Vec::with_capacity(NUM_BLOCKS);
    for (b, level) in (0..NUM_LEVELS).rev().enumerate() {
        q = fusion_block(g, q, &inputs[level], &params.blocks[b], use_mask_bias)?;
        out.push(q);
    }
    Ok(out)
}

/// `M_p = Z · Q′ᵀ`, `N × T`.
pub fn predict_masks(g: &mut Graph, z: NodeId, q: NodeId) -> Result<NodeId> {
    Ok(g.matmul_nt(z, q)?)
}

pub fn predict_classes(g: &mut Graph, q: NodeId, head: &Linear) -> Result<NodeId> {
    Ok(head.forward(g, q)?)
}

/// An object instance mask spanning the frames of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub query: usize,
    pub embedding: Vec<f64>,
    pub class: u16,
    /// Point indices within each scene frame, sorted by frame.
    pub masks: Vec<(usize, Vec<usize>)>,
    /// Mean xyz of the mask at the most recent frame.
    pub centroid: Vec3,
    /// First and last scene frame with mask points.
    pub frames: (usize, usize),
}

impl Tracklet {
    pub fn mask_at(&self, frame: usize) -> &[usize] {
        self.masks.iter().find(|(f, _)| *f == frame).map_or(&[], |(_, m)| m.as_slice())
    }
}

/// Per-point result of assembling one clip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipAssembly {
    pub class: Vec<u16>,
    /// Index into `tracklets` for thing points.
    pub tracklet: Vec<Option<usize>>,
    pub tracklets: Vec<Tracklet>,
}

/// Turn mask and class logits into a total labeling of the clip's points.
///
/// A query is active when its argmax class is not "no object". Each point
/// goes to the active query maximizing `p_q(ĉ_q) · sigmoid(M_p[n, q])`,
/// ties to the lower query. Points of thing queries form tracklets; with no
/// active query every point gets `fallback`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_panoptic(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    queries: &Tensor,
    palette: &ClassPalette,
    fallback: u16,
    xyz: &[Vec3],
    source: &[(usize, usize)],
) -> ClipAssembly {
    let n = mask_logits.rows();
    let t = mask_logits.cols();
    let c1 = class_logits.cols();
    let probs = kernels::softmax_rows(class_logits.data(), c1);
    let mut active: Vec<(usize, u16, f64)> = Vec::new();
    for q in 0..t {
        let row = &probs[q * c1..(q + 1) * c1];
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        if best != c1 - 1 {
            active.push((q, best as u16, row[best]));
        }
    }

    let mut class = vec![fallback; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (a, &(q, _, p)) in active.iter().enumerate() {
            let s = p * kernels::sigmoid(mask_logits.get(i, q));
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((a, s));
            }
        }
        if let Some((a, _)) = best {
            class[i] = active[a].1;
            owner[i] = Some(a);
        }
    }

    let mut tracklets = Vec::new();
    let mut slot_of_active = vec![None; active.len()];
    for (a, &(q, c, _)) in active.iter().enumerate() {
        if !palette.is_thing(c) {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&i| owner[i] == Some(a)).collect();
        if members.is_empty() {
            continue;
        }
        let mut frames: Vec<usize> = members.iter().map(|&i| source[i].0).collect();
        frames.sort_unstable();
        frames.dedup();
        let masks: Vec<(usize, Vec<usize>)> = frames
            .iter()
            .map(|&f| {
                let mut m: Vec<usize> = members.iter().filter(|&&i| source[i].0 == f).map(|&i| source[i].1).collect();
                m.sort_unstable();
                (f, m)
            })
            .collect();
        let last = *frames.last().expect("non-empty");
        let latest: Vec<usize> = members.iter().copied().filter(|&i| source[i].0 == last).collect();
        let mut centroid = [0.0; 3];
        for &i in &latest {
            for (c, v) in centroid.iter_mut().zip(xyz[i]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= latest.len() as f64);
        slot_of_active[a] = Some(tracklets.len());
        tracklets.push(Tracklet { query: q, embedding: queries.row(q).to_vec(), class: c, masks, centroid, frames: (frames[0], last) });
    }
    let tracklet = owner.iter().map(|o| o.and_then(|a| slot_of_active[a])).collect();
    ClipAssembly { class, tracklet, tracklets }
}

#[cfg(test)]
mod tests;
