//! Encoder + decoder wiring and clip-level inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::decoder::{self, assemble_panoptic, ClipAssembly, DecoderParams, NUM_BLOCKS};
use crate::encoder::{self, ClipGeometry, EncoderOutput, EncoderParams};
use crate::labels::ClassPalette;
use crate::nn::ModelError;
use crate::synthworld::PointCloudClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width D.
    pub dim: usize,
    /// Number of queries T.
    pub queries: usize,
    pub voxel_size: f64,
    /// When false the image maps are zeroed (LiDAR-only model).
    pub use_images: bool,
    /// When false the cross-attention mask bias is left out entirely.
    pub mask_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dim: 32, queries: 32, voxel_size: 0.1, use_images: true, mask_bias: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, detail: &str| Err(ModelError::InvalidConfig { field, detail: detail.to_string() });
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad("dim", "must be a positive multiple of 4");
        }
        if self.queries == 0 {
            return bad("queries", "must be positive");
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad("voxel_size", "must be positive and finite");
        }
        Ok(())
    }
}

/// Segmentation network: parameters plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub palette: ClassPalette,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    /// Query set after each block.
    pub queries: Vec<NodeId>,
    /// `N × T` mask logits per block.
    pub masks: Vec<NodeId>,
    /// `T × (1 + C)` class logits per block.
    pub classes: Vec<NodeId>,
}

/// Plain-tensor outputs of the final block with the assembled labeling.
#[derive(Debug, Clone)]
pub struct ClipPrediction {
    pub mask_logits: Tensor,
    pub class_logits: Tensor,
    pub queries: Tensor,
    pub assembly: ClipAssembly,
}

impl Model {
    pub fn new(config: ModelConfig, palette: ClassPalette, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        palette.validate().map_err(|e| ModelError::InvalidConfig { field: "palette", detail: e })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, config.dim, &mut rng);
        let decoder = DecoderParams::new(&mut store, config.dim, config.queries, palette.len(), &mut rng);
        Ok(Model { config, palette, store, encoder, decoder })
    }

    pub fn geometry(&self, clip: &PointCloudClip) -> Result<ClipGeometry, ModelError> {
        ClipGeometry::build(clip, self.config.voxel_size, self.config.dim)
    }

    /// Record a full pass on `g`, which must be bound to `self.store`.
    pub fn forward(&self, g: &mut Graph, geo: &ClipGeometry) -> Result<ForwardOutput, ModelError> {
        let enc = encoder::encode(g, geo, &self.encoder, self.config.use_images)?;
        let inputs = decoder::block_inputs(g, geo, &enc)?;
        let queries = decoder::decode(g, &inputs, &self.decoder, self.config.mask_bias)?;
        let mut masks = Vec::with_capacity(NUM_BLOCKS);
        let mut classes = Vec::with_capacity(NUM_BLOCKS);
        for &q in &queries {
            masks.push(decoder::predict_masks(g, enc.z, q)?);
            classes.push(decoder::predict_classes(g, q, &self.decoder.class_head)?);
        }
        Ok(ForwardOutput { encoder: enc, queries, masks, classes })
    }

    pub fn fallback_class(&self) -> u16 {
        self.palette.first_stuff().unwrap_or(0)
    }

    pub fn predict(&self, clip: &PointCloudClip) -> Result<ClipPrediction, ModelError> {
        let geo = self.geometry(clip)?;
        let mut g = self.store.bind(false);
        let out = self.forward(&mut g, &geo)?;
        let last = NUM_BLOCKS - 1;
        let mask_logits = g.value(out.masks[last]).clone();
        let class_logits = g.value(out.classes[last]).clone();
        let queries = g.value(out.queries[last]).clone();
        let assembly = assemble_panoptic(&mask_logits, &class_logits, &queries, &self.palette, self.fallback_class(), &clip.xyz, &clip.source);
        Ok(ClipPrediction { mask_logits, class_logits, queries, assembly })
    }
}
