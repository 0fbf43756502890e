//! Tracklet association: pairwise features, the association MLP, a memory
//! bank over the last `T_hist` frames, greedy id assignment, stage-2
//! training and sliding-window sequence inference.

mod sequence;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, NodeId, ParamGroup, ParamStore, Tensor};
use crate::geometry::{SinusoidalExpander, Vec3};
use crate::nn::{Mlp, ModelError};

pub use crate::decoder::Tracklet;
pub use sequence::{
    majority_track, read_predictions, run_sequence, tam_pairs, train_on_pairs, train_stage2, write_predictions, PredictionFrame, PredictionManifest,
    SequenceTracker, TamPair, TamTrainConfig, TrackingConfig, PREDICTION_FORMAT,
};

pub const ENC_DIM: usize = 64;
pub const HIDDEN: [usize; 3] = [256, 128, 64];

/// Feature length for query width `dim`: three 64-wide encodings, two
/// queries and the IoU slot.
pub fn tam_feature_len(dim: usize) -> usize {
    3 * ENC_DIM + 1 + 2 * dim
}

/// What the bank remembers about a track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub id: u32,
    pub embedding: Vec<f64>,
    pub centroid: Vec3,
    pub last_frame: usize,
    /// Mask at `last_frame` as sorted point indices of that frame.
    pub mask: Vec<usize>,
    pub class: u16,
}

impl BankEntry {
    pub fn from_tracklet(id: u32, t: &Tracklet) -> Self {
        let last = t.frames.1;
        BankEntry { id, embedding: t.embedding.clone(), centroid: t.centroid, last_frame: last, mask: t.mask_at(last).to_vec(), class: t.class }
    }
}

/// Sorted-index IoU.
pub fn index_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Frame gap and single-frame mask IoU between a remembered track and a new
/// tracklet. The IoU is zero unless the tracklet has points in the frame the
/// track was last seen in.
pub fn pair_attributes(a: &BankEntry, b: &Tracklet) -> (usize, f64) {
    let gap = b.frames.0.saturating_sub(a.last_frame);
    let overlap = b.masks.iter().find(|(f, _)| *f == a.last_frame);
    let iou = overlap.map_or(0.0, |(_, m)| index_iou(&a.mask, m));
    (gap, iou)
}

/// `[enc(centroid_a), enc(centroid_b), q_a, q_b, enc(gap), IoU]`.
pub fn build_tam_features(a: &BankEntry, b: &Tracklet, gap: usize, iou: f64) -> Vec<f64> {
    let xyz = SinusoidalExpander::new(3, ENC_DIM).expect("even width");
    let gap_enc = SinusoidalExpander::new(1, ENC_DIM).expect("even width");
    let mut f = Vec::with_capacity(tam_feature_len(a.embedding.len()));
    f.extend(xyz.expand(&a.centroid));
    f.extend(xyz.expand(&b.centroid));
    f.extend_from_slice(&a.embedding);
    f.extend_from_slice(&b.embedding);
    f.extend(gap_enc.expand(&[gap as f64]));
    f.push(iou);
    f
}

/// Association MLP with its own parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Tam {
    pub dim: usize,
    pub store: ParamStore,
    pub mlp: Mlp,
}

impl Tam {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [tam_feature_len(dim), HIDDEN[0], HIDDEN[1], HIDDEN[2], 1];
        let mlp = Mlp::new(&mut store, "tam", ParamGroup::Tracker, &widths, &mut rng);
        Tam { dim, store, mlp }
    }

    pub fn feature_len(&self) -> usize {
        tam_feature_len(self.dim)
    }

    /// Logits for a `[B, feature_len]` batch.
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, ModelError> {
        Ok(self.mlp.forward(g, x)?)
    }

    /// Association probability for one feature vector.
    pub fn score(&self, features: &[f64]) -> Result<f64, ModelError> {
        if features.len() != self.feature_len() {
            return Err(ModelError::InvalidInput(format!("TAM features have length {}, expected {}", features.len(), self.feature_len())));
        }
        let x = Tensor::matrix(1, features.len(), features.to_vec());
        Ok(kernels::sigmoid(self.mlp.apply(&self.store, &x).item()))
    }
}

pub fn tam_score(tam: &Tam, features: &[f64]) -> Result<f64, ModelError> {
    tam.score(features)
}

/// How new tracklets are linked to remembered tracks.
#[derive(Debug, Clone, Copy)]
pub enum Association<'a> {
    /// Learned pair scores, accepted at `score ≥ τ`.
    Tam(&'a Tam),
    /// Single-frame mask IoU, accepted at `IoU > 0.5`.
    MaskIou,
}

pub const IOU_BASELINE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackMemoryBank {
    /// Sorted by id.
    pub entries: Vec<BankEntry>,
    pub next_id: u32,
}

impl TrackMemoryBank {
    pub fn new() -> Self {
        TrackMemoryBank { entries: Vec::new(), next_id: 1 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop entries last seen before `frame − horizon`.
    pub fn prune(&mut self, frame: usize, horizon: usize) {
        self.entries.retain(|e| e.last_frame + horizon >= frame);
    }
}

/// Score every (bank entry, tracklet) pair; `scores[b][k]`.
pub fn score_pairs(bank: &TrackMemoryBank, tracklets: &[Tracklet], method: Association) -> Result<Vec<Vec<f64>>, ModelError> {
    bank.entries
        .iter()
        .map(|e| {
            tracklets
                .iter()
                .map(|t| {
                    let (gap, iou) = pair_attributes(e, t);
                    match method {
                        Association::Tam(tam) => tam.score(&build_tam_features(e, t, gap, iou)),
                        Association::MaskIou => Ok(iou),
                    }
                })
                .collect()
        })
        .collect()
}

/// Greedy assignment: accept pairs in descending score while the score
/// passes the threshold and both sides are free. Ties go to the lower
/// tracklet index, then the lower bank id. Unassigned tracklets get fresh
/// ids. Returns one id per tracklet.
pub fn associate_scores(bank: &mut TrackMemoryBank, scores: &[Vec<f64>], num_tracklets: usize, accept: impl Fn(f64) -> bool) -> Vec<u32> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (b, row) in scores.iter().enumerate() {
        for (k, &s) in row.iter().enumerate() {
            if accept(s) {
                pairs.push((s, k, b));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut ids: Vec<Option<u32>> = vec![None; num_tracklets];
    let mut used = vec![false; bank.entries.len()];
    for (_, k, b) in pairs {
        if ids[k].is_none() && !used[b] {
            ids[k] = Some(bank.entries[b].id);
            used[b] = true;
        }
    }
    ids.into_iter()
        .map(|id| {
            id.unwrap_or_else(|| {
                let id = bank.next_id;
                bank.next_id += 1;
                id
            })
        })
        .collect()
}

pub fn associate(bank: &mut TrackMemoryBank, tracklets: &[Tracklet], method: Association, tau: f64) -> Result<Vec<u32>, ModelError> {
    let scores = score_pairs(bank, tracklets, method)?;
    Ok(match method {
        Association::Tam(_) => associate_scores(bank, &scores, tracklets.len(), |s| s >= tau),
        Association::MaskIou => associate_scores(bank, &scores, tracklets.len(), |s| s > IOU_BASELINE_THRESHOLD),
    })
}

/// Refresh associated entries, insert new ids, and evict entries older than
/// `horizon` frames relative to `frame`.
pub fn update_bank(bank: &mut TrackMemoryBank, ids: &[u32], tracklets: &[Tracklet], frame: usize, horizon: usize) {
    for (&id, t) in ids.iter().zip(tracklets) {
        let entry = BankEntry::from_tracklet(id, t);
        match bank.entries.binary_search_by_key(&id, |e| e.id) {
            Ok(i) => bank.entries[i] = entry,
            Err(i) => bank.entries.insert(i, entry),
        }
        bank.next_id = bank.next_id.max(id + 1);
    }
    bank.prune(frame, horizon);
}
