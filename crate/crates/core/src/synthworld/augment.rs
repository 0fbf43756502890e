use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{invalid, PointCloudClip, SynthError};

/// Training-time augmentation: random z rotation, xyz jitter, uniform
/// subsampling and image brightness jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Rotation angle is uniform in `[-max_rotation, max_rotation]` radians.
    pub max_rotation: f64,
    pub jitter_sigma: f64,
    /// Keep at most this many points; `None` keeps all.
    pub point_budget: Option<usize>,
    /// Image brightness scale is uniform in `[1 - b, 1 + b]`.
    pub brightness: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { max_rotation: std::f64::consts::PI, jitter_sigma: 0.01, point_budget: None, brightness: 0.1 }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams { max_rotation: 0.0, jitter_sigma: 0.0, point_budget: None, brightness: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.point_budget == Some(0) {
            return Err(invalid("point_budget", "must be positive"));
        }
        if !(self.max_rotation >= 0.0 && self.jitter_sigma >= 0.0 && (0.0..1.0).contains(&self.brightness)) {
            return Err(invalid("augment", "rotation and jitter must be non-negative, brightness in [0, 1)"));
        }
        Ok(())
    }
}

fn rotate(p: [f64; 3], s: f64, c: f64) -> [f64; 3] {
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Rotate points, sensor origin, cameras and actor boxes about the z axis.
pub fn rotate_clip(clip: &PointCloudClip, angle: f64) -> PointCloudClip {
    let (s, c) = angle.sin_cos();
    let mut out = clip.clone();
    for p in &mut out.xyz {
        *p = rotate(*p, s, c);
    }
    out.sensor_origin = rotate(out.sensor_origin, s, c);
    out.cameras = out.cameras.iter().map(|cam| cam.rotated_world(angle)).collect();
    for boxes in &mut out.boxes {
        for b in boxes.iter_mut() {
            *b = b.rotated(angle);
        }
    }
    out
}

pub fn augment_clip(clip: &PointCloudClip, params: &AugmentParams, seed: u64) -> Result<PointCloudClip, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clip.clone();

    if let Some(k) = params.point_budget {
        if k < clip.len() {
            let mut keep = index::sample(&mut rng, clip.len(), k).into_vec();
            keep.sort_unstable();
            out.xyz = keep.iter().map(|&i| clip.xyz[i]).collect();
            out.intensity = keep.iter().map(|&i| clip.intensity[i]).collect();
            out.time = keep.iter().map(|&i| clip.time[i]).collect();
            out.source = keep.iter().map(|&i| clip.source[i]).collect();
            out.labels.class = keep.iter().map(|&i| clip.labels.class[i]).collect();
            out.labels.track = keep.iter().map(|&i| clip.labels.track[i]).collect();
        }
    }

    let angle = if params.max_rotation > 0.0 { rng.random_range(-params.max_rotation..=params.max_rotation) } else { 0.0 };
    if angle != 0.0 {
        out = rotate_clip(&out, angle);
    }

    if params.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, params.jitter_sigma).expect("finite sigma");
        for p in &mut out.xyz {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    if params.brightness > 0.0 {
        let scale = rng.random_range(1.0 - params.brightness..=1.0 + params.brightness);
        for img in out.images.iter_mut().flatten() {
            for v in &mut img.data {
                *v = (*v as f64 * scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}
