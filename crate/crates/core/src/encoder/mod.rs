//! Toy multimodal encoder: image feature pyramid, point branch, voxel stride
//! pyramid with point↔voxel exchange, and point-level image fusion.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore, RowMix, Tensor};
use crate::geometry::{bilinear_taps, first_visible, CameraModel, MapShape, PositionalEncoder, Vec3, VoxelPyramid};
use crate::nn::{Linear, Mlp, ModelError};
use crate::synthworld::{Image, PointCloudClip};

type Result<T> = std::result::Result<T, ModelError>;

pub const NUM_LEVELS: usize = 4;
pub const STRIDES: [u32; NUM_LEVELS] = [1, 2, 4, 8];
pub const POINT_FEATURES: usize = 8;
const PATCH: usize = 4;
const PATCH_FEATURES: usize = PATCH * PATCH * 3;
/// Scale applied to metric xyz before the point MLP.
const XYZ_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `[Z⁺, Z_img]` (2D) → D.
    pub mlp_fusion: Mlp,
    /// D → D for points without a camera.
    pub mlp_pseudo: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub patch: Mlp,
    pub stride8: Mlp,
    pub point: Mlp,
    pub point_pe: Linear,
    pub fusion: [FusionParams; 2],
    pub down: Vec<Mlp>,
    pub up: Vec<Mlp>,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        use ParamGroup::{Lidar, Rest};
        let d = dim;
        let patch = Mlp::new(store, "enc.patch", Rest, &[PATCH_FEATURES, d, d, d], rng);
        let stride8 = Mlp::new(store, "enc.stride8", Rest, &[d, d, d], rng);
        let point = Mlp::new(store, "enc.point", Lidar, &[POINT_FEATURES, d, d], rng);
        let point_pe = Linear::new(store, "enc.point_pe", Lidar, d, d, rng);
        let mut fusion_stage = |i: usize, rng: &mut R| FusionParams {
            mlp_fusion: Mlp::new(store, &format!("enc.fusion{i}.fuse"), Lidar, &[2 * d, d, d, d], rng),
            mlp_pseudo: Mlp::new(store, &format!("enc.fusion{i}.pseudo"), Lidar, &[d, d, d, d], rng),
        };
        let fusion = [fusion_stage(0, rng), fusion_stage(1, rng)];
        let down = (0..NUM_LEVELS - 1).map(|l| Mlp::new(store, &format!("enc.down{l}"), Lidar, &[d, d, d], rng)).collect();
        let up = (0..NUM_LEVELS - 1).map(|l| Mlp::new(store, &format!("enc.up{l}"), Lidar, &[d, d, d], rng)).collect();
        EncoderParams { dim, patch, stride8, point, point_pe, fusion, down, up }
    }

    pub fn image_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.patch.params().chain(self.stride8.params())
    }
}

/// Stacked feature maps of every camera image of a clip.
///
/// Image `j` occupies rows `j·cells .. (j+1)·cells` of each level, stored
/// row-major within the map. Images are ordered slot-major: all cameras of
/// frame t−1, then all cameras of frame t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePyramid {
    pub i4: NodeId,
    pub i8: NodeId,
    pub shape4: MapShape,
    pub shape8: MapShape,
    pub images: usize,
}

/// Camera image layout shared by every image of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageLayout {
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub images: usize,
}

impl ImageLayout {
    pub fn shape4(&self) -> MapShape {
        MapShape { height: self.height / 4, width: self.width / 4, stride: 4 }
    }

    pub fn shape8(&self) -> MapShape {
        MapShape { height: self.height / 8, width: self.width / 8, stride: 8 }
    }
}

fn check_images(images: &[&Image]) -> Result<ImageLayout> {
    let first = images.first().ok_or_else(|| ModelError::InvalidInput("no camera images".into()))?;
    let (w, h) = (first.width, first.height);
    if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
        return Err(ModelError::InvalidInput(format!("image size {w}x{h} is not a positive multiple of 8")));
    }
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(ModelError::InvalidInput("camera images differ in size".into()));
    }
    Ok(ImageLayout { width: w, height: h, cameras: images.len(), images: images.len() })
}

/// Non-overlapping 4×4 RGB patches scaled to `[-0.5, 0.5]`, one row per
/// stride-4 cell.
pub fn image_patches(images: &[&Image]) -> Result<Tensor> {
    let layout = check_images(images)?;
    let s4 = layout.shape4();
    let mut data = Vec::with_capacity(images.len() * s4.cells() * PATCH_FEATURES);
    for img in images {
        for r in 0..s4.height {
            for c in 0..s4.width {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let px = img.pixel(c * PATCH + dx, r * PATCH + dy);
                        data.extend(px.iter().map(|&v| v as f64 / 255.0 - 0.5));
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(images.len() * s4.cells(), PATCH_FEATURES, data))
}

/// 2×2 cell pooling from the stride-4 map to the stride-8 map, per image.
fn pool_map(layout: ImageLayout) -> RowMix {
    let (s4, s8) = (layout.shape4(), layout.shape8());
    let mut assign = Vec::with_capacity(layout.images * s4.cells());
    for j in 0..layout.images {
        for r in 0..s4.height {
            for c in 0..s4.width {
                assign.push(j * s8.cells() + (r / 2) * s8.width + c / 2);
            }
        }
    }
    RowMix::mean_pool(layout.images * s8.cells(), &assign)
}

/// Image feature pyramid from camera images.
pub fn encode_images(g: &mut Graph, params: &EncoderParams, images: &[&Image]) -> Result<ImagePyramid> {
    let layout = check_images(images)?;
    let patches = image_patches(images)?;
    encode_patches(g, params, &patches, layout, &Arc::new(pool_map(layout)))
}

fn encode_patches(g: &mut Graph, params: &EncoderParams, patches: &Tensor, layout: ImageLayout, pool: &Arc<RowMix>) -> Result<ImagePyramid> {
    let x = g.constant(patches.clone());
    let i4 = params.patch.forward(g, x)?;
    let pooled = g.mix(i4, pool)?;
    let i8 = params.stride8.forward(g, pooled)?;
    Ok(ImagePyramid { i4, i8, shape4: layout.shape4(), shape8: layout.shape8(), images: layout.images })
}

fn zero_pyramid(g: &mut Graph, dim: usize, layout: ImageLayout) -> ImagePyramid {
    let (s4, s8) = (layout.shape4(), layout.shape8());
    let i4 = g.constant(Tensor::zeros(vec![layout.images * s4.cells(), dim]));
    let i8 = g.constant(Tensor::zeros(vec![layout.images * s8.cells(), dim]));
    ImagePyramid { i4, i8, shape4: s4, shape8: s8, images: layout.images }
}

/// `[x, y, z, time, intensity, dx, dy, dz]` per point, with the offset taken
/// from the center of the point's stride-1 voxel.
pub fn init_point_features(clip: &PointCloudClip, grid: &VoxelPyramid) -> Tensor {
    let level = &grid.levels[0];
    let mut data = Vec::with_capacity(clip.len() * POINT_FEATURES);
    for (i, p) in clip.xyz.iter().enumerate() {
        let c = level.center(level.point_to_voxel[i]);
        data.extend_from_slice(&[p[0], p[1], p[2], clip.time[i], clip.intensity[i], p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
    }
    Tensor::matrix(clip.len(), POINT_FEATURES, data)
}

/// Projectability partition of the clip's points with the image rows each
/// projectable point samples from.
#[derive(Debug, Clone, PartialEq)]
pub struct Projectability {
    pub plus: Vec<usize>,
    pub minus: Vec<usize>,
    /// `[M, rows of stacked I_4]` bilinear taps.
    pub sample: Arc<RowMix>,
    pub gather_plus: Arc<RowMix>,
    pub gather_minus: Arc<RowMix>,
    pub scatter_plus: Arc<RowMix>,
    pub scatter_minus: Arc<RowMix>,
}

impl Projectability {
    /// Each point uses the cameras of its own frame; the first camera in rig
    /// order with a valid projection wins.
    pub fn build(xyz: &[Vec3], slot: impl Fn(usize) -> usize, cams: &[CameraModel], shape4: MapShape, image_rows: usize) -> Self {
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        let mut rows = Vec::new();
        for (i, &p) in xyz.iter().enumerate() {
            match first_visible(cams, p) {
                Some((k, px)) => {
                    let base = (slot(i) * cams.len() + k) * shape4.cells();
                    rows.push(bilinear_taps(shape4, px).iter().filter(|t| t.1 != 0.0).map(|&(c, w)| (base + c, w)).collect());
                    plus.push(i);
                }
                None => minus.push(i),
            }
        }
        let n = xyz.len();
        Projectability {
            sample: Arc::new(RowMix::from_rows(image_rows, &rows)),
            gather_plus: Arc::new(RowMix::gather(n, &plus)),
            gather_minus: Arc::new(RowMix::gather(n, &minus)),
            scatter_plus: Arc::new(RowMix::scatter(n, &plus)),
            scatter_minus: Arc::new(RowMix::scatter(n, &minus)),
            plus,
            minus,
        }
    }
}

/// Image rows for one voxel stride: every voxel visible from a frame-t
/// camera contributes one row from I_4 and one from I_8.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRows {
    /// Source voxel of each row; the I_4 rows come first.
    pub tags: Vec<usize>,
    pub from4: Arc<RowMix>,
    pub from8: Arc<RowMix>,
    /// Voxels of this stride → rows.
    pub tag_gather: Arc<RowMix>,
}

impl ImageRows {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn gather_image_rows(centers: &[Vec3], cams: &[CameraModel], slot: usize, layout: ImageLayout) -> ImageRows {
    let (s4, s8) = (layout.shape4(), layout.shape8());
    let mut visible = Vec::new();
    let mut rows4 = Vec::new();
    let mut rows8 = Vec::new();
    for (v, &c) in centers.iter().enumerate() {
        if let Some((k, px)) = first_visible(cams, c) {
            let j = slot * cams.len() + k;
            visible.push(v);
            rows4.push(bilinear_taps(s4, px).iter().filter(|t| t.1 != 0.0).map(|&(c, w)| (j * s4.cells() + c, w)).collect());
            rows8.push(bilinear_taps(s8, px).iter().filter(|t| t.1 != 0.0).map(|&(c, w)| (j * s8.cells() + c, w)).collect());
        }
    }
    let tags: Vec<usize> = visible.iter().chain(&visible).copied().collect();
    ImageRows {
        from4: Arc::new(RowMix::from_rows(layout.images * s4.cells(), &rows4)),
        from8: Arc::new(RowMix::from_rows(layout.images * s8.cells(), &rows8)),
        tag_gather: Arc::new(RowMix::gather(centers.len(), &tags)),
        tags,
    }
}

/// Everything about a clip the network needs that does not depend on
/// parameters: features, encodings, voxel pyramid and index maps.
#[derive(Debug, Clone)]
pub struct ClipGeometry {
    pub num_points: usize,
    pub features: Tensor,
    pub point_pe: Tensor,
    pub pyramid: VoxelPyramid,
    pub p2v: Arc<RowMix>,
    /// Level `l` → `l+1` mean pooling.
    pub down: Vec<Arc<RowMix>>,
    /// Level `l+1` → `l` copy.
    pub up: Vec<Arc<RowMix>>,
    pub v2p: Vec<Arc<RowMix>>,
    /// Points → level `l`: scatter-mean to stride 1, then pooling.
    pub mask_pool: Vec<Arc<RowMix>>,
    pub voxel_pe: Vec<Tensor>,
    pub projectability: Projectability,
    pub image_rows: Vec<ImageRows>,
    pub layout: ImageLayout,
    pub patches: Tensor,
    image_pool: Arc<RowMix>,
}

impl ClipGeometry {
    pub fn build(clip: &PointCloudClip, voxel_size: f64, dim: usize) -> Result<Self> {
        if clip.is_empty() {
            return Err(ModelError::InvalidInput("empty voxel grid: clip has no points".into()));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(ModelError::InvalidConfig { field: "voxel_size", detail: format!("{voxel_size}") });
        }
        let images: Vec<&Image> = clip.images.iter().flatten().collect();
        let mut layout = check_images(&images)?;
        layout.cameras = clip.cameras.len();
        if layout.images != 2 * layout.cameras {
            return Err(ModelError::InvalidInput(format!("{} images for {} cameras", layout.images, layout.cameras)));
        }
        let patches = image_patches(&images)?;

        let pyramid = VoxelPyramid::build(&clip.xyz, voxel_size, NUM_LEVELS);
        let n = clip.len();
        let sizes: Vec<usize> = pyramid.levels.iter().map(|l| l.len()).collect();
        let p2v = Arc::new(RowMix::mean_pool(sizes[0], &pyramid.levels[0].point_to_voxel));
        let down: Vec<Arc<RowMix>> = (0..NUM_LEVELS - 1).map(|l| Arc::new(RowMix::mean_pool(sizes[l + 1], &pyramid.parents[l]))).collect();
        let up = (0..NUM_LEVELS - 1).map(|l| Arc::new(RowMix::gather(sizes[l + 1], &pyramid.parents[l]))).collect();
        let v2p = (0..NUM_LEVELS).map(|l| Arc::new(RowMix::gather(sizes[l], &pyramid.point_map(l)))).collect();
        let mut mask_pool = vec![Arc::clone(&p2v)];
        for d in &down {
            let next = d.compose(mask_pool.last().expect("non-empty"));
            mask_pool.push(Arc::new(next));
        }

        let enc = PositionalEncoder::new(dim)?;
        let point_pe = enc.encode_all(&clip.xyz, clip.sensor_origin);
        let voxel_pe = pyramid.levels.iter().map(|l| enc.encode_all(&l.centers(), clip.sensor_origin)).collect();

        let raw = init_point_features(clip, &pyramid);
        let features = normalize_point_features(&raw, voxel_size);
        let projectability =
            Projectability::build(&clip.xyz, |i| clip.slot(i), &clip.cameras, layout.shape4(), layout.images * layout.shape4().cells());
        let image_rows = pyramid.levels.iter().map(|l| gather_image_rows(&l.centers(), &clip.cameras, 1, layout)).collect();

        Ok(ClipGeometry {
            num_points: n,
            features,
            point_pe,
            p2v,
            down,
            up,
            v2p,
            mask_pool,
            voxel_pe,
            projectability,
            image_rows,
            image_pool: Arc::new(pool_map(layout)),
            layout,
            patches,
            pyramid,
        })
    }

    pub fn level_sizes(&self) -> [usize; NUM_LEVELS] {
        std::array::from_fn(|l| self.pyramid.levels[l].len())
    }
}

fn normalize_point_features(raw: &Tensor, voxel_size: f64) -> Tensor {
    let mut t = raw.clone();
    for row in t.data_mut().chunks_mut(POINT_FEATURES) {
        for v in &mut row[..3] {
            *v *= XYZ_SCALE;
        }
        for v in &mut row[5..] {
            *v /= voxel_size;
        }
    }
    t
}

/// Output of one point-level fusion stage.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub z: NodeId,
    /// Mean squared gap between the pseudo branch on projectable points and
    /// the (stopped) fused features.
    pub pf_loss: NodeId,
}

/// Projectable points: `Z⁺ ← MLP_fusion([Z⁺, Z_img])`; the rest:
/// `Z⁻ ← MLP_pseudo(Z⁻)`.
pub fn point_level_fusion(g: &mut Graph, z: NodeId, i4: NodeId, proj: &Projectability, params: &FusionParams) -> Result<FusionOutput> {
    let d = g.value(z).cols();
    let n = g.value(z).rows();
    let mut parts = Vec::with_capacity(2);
    let mut pf_loss = None;
    if !proj.plus.is_empty() {
        let zp = g.mix(z, &proj.gather_plus)?;
        let zimg = g.mix(i4, &proj.sample)?;
        let cat = g.concat_cols(&[zp, zimg])?;
        let fused = params.mlp_fusion.forward(g, cat)?;
        pf_loss = Some(pseudo_fusion_loss(g, zp, fused, &params.mlp_pseudo)?);
        parts.push(g.mix(fused, &proj.scatter_plus)?);
    }
    if !proj.minus.is_empty() {
        let zm = g.mix(z, &proj.gather_minus)?;
        let pseudo = params.mlp_pseudo.forward(g, zm)?;
        parts.push(g.mix(pseudo, &proj.scatter_minus)?);
    }
    let z = match parts[..] {
        [a, b] => g.add(a, b)?,
        [a] => a,
        _ => g.constant(Tensor::zeros(vec![n, d])),
    };
    let pf_loss = pf_loss.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    Ok(FusionOutput { z, pf_loss })
}

/// `mean((MLP_pseudo(stop Z⁺) − stop fused)²)`; only MLP_pseudo gets a gradient.
pub fn pseudo_fusion_loss(g: &mut Graph, z_plus: NodeId, fused: NodeId, pseudo: &Mlp) -> Result<NodeId> {
    if g.value(z_plus).rows() == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let zp = g.detach(z_plus);
    let target = g.detach(fused);
    let pred = pseudo.forward(g, zp)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub z: NodeId,
    /// Voxel features at strides 1, 2, 4, 8.
    pub voxels: Vec<NodeId>,
    pub images: ImagePyramid,
    /// Mean of the two fusion stages' pseudo-fusion losses.
    pub pf_loss: NodeId,
}

/// Voxel pyramid: stride-1 scatter-mean, pooled residual MLPs down to stride
/// 8, then an up path with skip additions. Returns the up-path features.
pub fn encode_voxels(g: &mut Graph, points: NodeId, geo: &ClipGeometry, params: &EncoderParams) -> Result<(Vec<NodeId>, NodeId)> {
    if geo.pyramid.levels[0].is_empty() {
        return Err(ModelError::InvalidInput("empty voxel grid".into()));
    }
    let mut down = vec![g.mix(points, &geo.p2v)?];
    for l in 0..NUM_LEVELS - 1 {
        let pooled = g.mix(down[l], &geo.down[l])?;
        let h = params.down[l].forward(g, pooled)?;
        down.push(g.add(pooled, h)?);
    }
    let coarse = g.mix(down[NUM_LEVELS - 1], &geo.v2p[NUM_LEVELS - 1])?;
    let points = g.add(points, coarse)?;

    let mut up = vec![down[NUM_LEVELS - 1]; NUM_LEVELS];
    for l in (0..NUM_LEVELS - 1).rev() {
        let unpooled = g.mix(up[l + 1], &geo.up[l])?;
        let s = g.add(down[l], unpooled)?;
        let h = params.up[l].forward(g, s)?;
        up[l] = g.add(s, h)?;
    }
    let fine = g.mix(up[0], &geo.v2p[0])?;
    let points = g.add(points, fine)?;
    Ok((up, points))
}

/// Full encoder pass. With `use_images = false` the image maps are zero
/// constants and the image encoder is not evaluated.
pub fn encode(g: &mut Graph, geo: &ClipGeometry, params: &EncoderParams, use_images: bool) -> Result<EncoderOutput> {
    let images =
        if use_images { encode_patches(g, params, &geo.patches, geo.layout, &geo.image_pool)? } else { zero_pyramid(g, params.dim, geo.layout) };
    let feats = g.constant(geo.features.clone());
    let pe = g.constant(geo.point_pe.clone());
    let p = params.point.forward(g, feats)?;
    let pe = params.point_pe.forward(g, pe)?;
    let p0 = g.add(p, pe)?;
    let first = point_level_fusion(g, p0, images.i4, &geo.projectability, &params.fusion[0])?;
    let (voxels, p3) = encode_voxels(g, first.z, geo, params)?;
    let second = point_level_fusion(g, p3, images.i4, &geo.projectability, &params.fusion[1])?;
    let pf = g.add(first.pf_loss, second.pf_loss)?;
    let pf_loss = g.scale(pf, 0.5);
    Ok(EncoderOutput { z: second.z, voxels, images, pf_loss })
}
