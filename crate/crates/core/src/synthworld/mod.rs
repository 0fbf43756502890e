//! Deterministic synthetic 4D driving scenes: moving box actors over a
//! static background, a spinning-LiDAR simulator, flat-shaded multi-camera
//! renders and exact panoptic labels.

mod augment;
mod io;
mod world;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, Vec3};
use crate::labels::{ClassPalette, FrameLabels, PanopticLabeling};

pub use augment::{augment_clip, rotate_clip, AugmentParams};
pub use io::{generate_dataset, read_dataset, read_label_file, write_atomic, write_dataset, write_label_file, Dataset, DatasetIndex};
pub use world::{hsv_to_rgb, ActorBox, Hit, Surface, World};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config field `{field}`: {detail}")]
    InvalidConfig { field: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{file}: format error at byte {offset}: {detail}")]
    Format { file: String, offset: usize, detail: String },
    #[error("missing file {0}")]
    MissingFile(String),
}

fn invalid(field: &'static str, detail: impl Into<String>) -> SynthError {
    SynthError::InvalidConfig { field, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub azimuth_steps: usize,
    pub beams: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub max_range: f64,
    pub mount_height: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig { azimuth_steps: 128, beams: 8, min_elevation_deg: -22.0, max_elevation_deg: 2.0, max_range: 30.0, mount_height: 1.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRigConfig {
    /// Cameras spread evenly in yaw starting straight ahead.
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub horizontal_fov_deg: f64,
    pub mount_height: f64,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        CameraRigConfig { count: 4, width: 128, height: 64, horizontal_fov_deg: 90.0, mount_height: 1.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub palette: ClassPalette,
    pub lidar: LidarConfig,
    pub cameras: CameraRigConfig,
    pub half_extent: f64,
    pub road_half_width: f64,
    pub wall_height: f64,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// Chance that an actor vanishes for a window of frames.
    pub occlusion_probability: f64,
    pub min_occlusion_frames: usize,
    pub max_occlusion_frames: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 6,
            min_actors: 2,
            max_actors: 4,
            palette: ClassPalette::driving(),
            lidar: LidarConfig::default(),
            cameras: CameraRigConfig::default(),
            half_extent: 16.0,
            road_half_width: 4.0,
            wall_height: 5.0,
            frame_interval: 0.5,
            occlusion_probability: 0.0,
            min_occlusion_frames: 1,
            max_occlusion_frames: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.palette.validate().map_err(|d| invalid("palette", d))?;
        if self.frames < 2 {
            return Err(invalid("frames", "need at least 2 frames"));
        }
        if self.min_actors > self.max_actors {
            return Err(invalid("min_actors", "exceeds max_actors"));
        }
        if self.max_actors > 0 && self.palette.things().next().is_none() {
            return Err(invalid("palette", "actors requested but the palette has no thing class"));
        }
        if self.lidar.azimuth_steps == 0 || self.lidar.beams == 0 {
            return Err(invalid("lidar", "azimuth_steps and beams must be positive"));
        }
        if !(self.lidar.max_range > 0.0 && self.lidar.mount_height > 0.0) {
            return Err(invalid("lidar", "max_range and mount_height must be positive"));
        }
        if self.lidar.min_elevation_deg > self.lidar.max_elevation_deg {
            return Err(invalid("lidar", "min_elevation_deg exceeds max_elevation_deg"));
        }
        let cam = &self.cameras;
        if cam.count == 0 || cam.width == 0 || cam.height == 0 || cam.width % 8 != 0 || cam.height % 8 != 0 {
            return Err(invalid("cameras", "need at least one camera with width and height divisible by 8"));
        }
        if !(cam.horizontal_fov_deg > 0.0 && cam.horizontal_fov_deg < 170.0) {
            return Err(invalid("cameras", "horizontal_fov_deg must be in (0, 170)"));
        }
        if !(self.half_extent > 2.0 && self.road_half_width >= 0.0 && self.wall_height > 0.0 && self.frame_interval > 0.0) {
            return Err(invalid("half_extent", "world extents and frame_interval must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(invalid("occlusion_probability", "must be in [0, 1]"));
        }
        if self.min_occlusion_frames == 0 || self.min_occlusion_frames > self.max_occlusion_frames {
            return Err(invalid("min_occlusion_frames", "need 1 <= min <= max"));
        }
        Ok(())
    }

    pub fn camera_rig(&self) -> Result<Vec<CameraModel>, SynthError> {
        let c = &self.cameras;
        let f = c.width as f64 / 2.0 / (c.horizontal_fov_deg.to_radians() / 2.0).tan();
        (0..c.count)
            .map(|k| {
                let yaw = 2.0 * std::f64::consts::PI * k as f64 / c.count as f64;
                CameraModel::looking_along(yaw, [0.0, 0.0, c.mount_height], f, f, c.width, c.height).map_err(|e| invalid("cameras", e.to_string()))
            })
            .collect()
    }

    fn world(&self) -> World {
        let stuff: Vec<u16> = self.palette.stuff().collect();
        let pick = |i: usize| stuff[i % stuff.len()];
        World {
            half_extent: self.half_extent,
            road_half_width: self.road_half_width,
            wall_height: self.wall_height,
            road_class: pick(0),
            ground_class: pick(1),
            wall_class: pick(2),
        }
    }
}

/// RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Actor trajectory over the whole scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub id: u32,
    pub class: u16,
    pub size: Vec3,
    pub color: [u8; 3],
    /// (x, y, yaw) per frame.
    pub poses: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
}

impl ActorTrack {
    pub fn box_at(&self, frame: usize) -> ActorBox {
        let [x, y, yaw] = self.poses[frame];
        ActorBox { track: self.id, class: self.class, base: [x, y, 0.0], size: self.size, yaw }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub points: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
    pub labels: FrameLabels,
    /// One render per camera in rig order.
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub palette: ClassPalette,
    pub world: World,
    pub sensor_origin: Vec3,
    pub cameras: Vec<CameraModel>,
    pub actors: Vec<ActorTrack>,
    pub frames: Vec<SceneFrame>,
}

/// Two consecutive frames `(t−1, t)` flattened into one point list.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudClip {
    pub xyz: Vec<Vec3>,
    pub intensity: Vec<f64>,
    /// −1 for frame t−1, 0 for frame t.
    pub time: Vec<f64>,
    pub labels: FrameLabels,
    /// Scene-frame number of each point's frame and its index there.
    pub source: Vec<(usize, usize)>,
    pub frames: [usize; 2],
    pub sensor_origin: Vec3,
    pub cameras: Vec<CameraModel>,
    /// Renders of frame t−1 and frame t.
    pub images: [Vec<Image>; 2],
    /// Visible actor boxes per clip frame.
    pub boxes: [Vec<ActorBox>; 2],
}

impl PointCloudClip {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    /// 0 for frame t−1, 1 for frame t.
    pub fn slot(&self, i: usize) -> usize {
        (self.time[i] + 1.0) as usize
    }

    /// Point indices belonging to clip slot 0 or 1.
    pub fn slot_indices(&self, slot: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.slot(i) == slot).collect()
    }
}

impl Scene {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn labeling(&self) -> PanopticLabeling {
        PanopticLabeling::new(self.frames.iter().map(|f| f.labels.clone()).collect())
    }

    pub fn visible_boxes(&self, frame: usize) -> Vec<ActorBox> {
        self.actors.iter().filter(|a| a.visible[frame]).map(|a| a.box_at(frame)).collect()
    }

    /// Clip ending at frame `t` (requires `1 <= t < frames`).
    pub fn clip(&self, t: usize) -> PointCloudClip {
        assert!(t >= 1 && t < self.frames.len(), "clip end {t} out of range");
        let mut clip = PointCloudClip {
            xyz: Vec::new(),
            intensity: Vec::new(),
            time: Vec::new(),
            labels: FrameLabels::default(),
            source: Vec::new(),
            frames: [t - 1, t],
            sensor_origin: self.sensor_origin,
            cameras: self.cameras.clone(),
            images: [self.frames[t - 1].images.clone(), self.frames[t].images.clone()],
            boxes: [self.visible_boxes(t - 1), self.visible_boxes(t)],
        };
        for (slot, f) in [t - 1, t].into_iter().enumerate() {
            let fr = &self.frames[f];
            for i in 0..fr.points.len() {
                let p = fr.points[i];
                clip.xyz.push([p[0] as f64, p[1] as f64, p[2] as f64]);
                clip.intensity.push(fr.intensity[i] as f64);
                clip.time.push(slot as f64 - 1.0);
                clip.labels.class.push(fr.labels.class[i]);
                clip.labels.track.push(fr.labels.track[i]);
                clip.source.push((f, i));
            }
        }
        clip
    }

    /// Render camera `cam` at `frame`, returning the image and the track id
    /// seen at each pixel (0 for background).
    pub fn render(&self, frame: usize, cam: usize) -> (Image, Vec<u32>) {
        let boxes = self.visible_boxes(frame);
        render_view(&self.world, &self.cameras[cam], &boxes, &self.actors)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn surface_color(hit: &Hit, boxes: &[ActorBox], actors: &[ActorTrack]) -> [u8; 3] {
    let p = hit.point;
    let rgb = match hit.surface {
        Surface::Road => {
            let stripe = p[1].abs() < 0.12 && p[0].rem_euclid(3.0) < 1.5;
            if stripe {
                [0.9, 0.9, 0.85]
            } else {
                let g = 0.3 + 0.04 * ((p[0] * 1.7).sin() * (p[1] * 2.3).cos());
                [g, g, g + 0.02]
            }
        }
        Surface::Ground => {
            let checker = ((p[0].floor() + p[1].floor()) as i64).rem_euclid(2) as f64;
            [0.25 + 0.05 * checker, 0.5 + 0.08 * checker, 0.2]
        }
        Surface::Wall => {
            let window = p[1].rem_euclid(2.0) < 0.9 && p[2].rem_euclid(1.5) > 0.6;
            if window {
                [0.35, 0.45, 0.6]
            } else {
                [0.6, 0.45, 0.35]
            }
        }
        Surface::Actor(i, axis) => {
            let track = boxes[i].track;
            let c = actors.iter().find(|a| a.id == track).map_or([255, 0, 255], |a| a.color);
            let shade = [0.85, 0.75, 1.0][axis];
            [c[0] as f64 / 255.0 * shade, c[1] as f64 / 255.0 * shade, c[2] as f64 / 255.0 * shade]
        }
    };
    [to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])]
}

const SKY: [u8; 3] = [150, 190, 235];

fn render_view(world: &World, cam: &CameraModel, boxes: &[ActorBox], actors: &[ActorTrack]) -> (Image, Vec<u32>) {
    let mut img = Image::new(cam.width, cam.height);
    let mut ids = vec![0u32; cam.width * cam.height];
    let origin = cam.center();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            match world.cast(origin, dir, boxes, 1e4) {
                Some(hit) => {
                    img.set(x, y, surface_color(&hit, boxes, actors));
                    if let Surface::Actor(i, _) = hit.surface {
                        ids[y * cam.width + x] = boxes[i].track;
                    }
                }
                None => img.set(x, y, SKY),
            }
        }
    }
    (img, ids)
}

fn intensity_of(surface: Surface, p: Vec3, boxes: &[ActorBox]) -> f64 {
    let base = match surface {
        Surface::Road => 0.15,
        Surface::Ground => 0.45,
        Surface::Wall => 0.7,
        Surface::Actor(i, _) => 0.8 - 0.1 * (boxes[i].class % 4) as f64,
    };
    (base + 0.05 * (p[0] * 3.1 + p[1] * 1.3 + p[2] * 2.7).sin()).clamp(0.0, 1.0)
}

fn scan(world: &World, cfg: &LidarConfig, origin: Vec3, boxes: &[ActorBox], phase: f64) -> (Vec<[f32; 3]>, Vec<f32>, FrameLabels) {
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = FrameLabels::default();
    for b in 0..cfg.beams {
        let t = if cfg.beams == 1 { 0.5 } else { b as f64 / (cfg.beams - 1) as f64 };
        let el = (cfg.min_elevation_deg + t * (cfg.max_elevation_deg - cfg.min_elevation_deg)).to_radians();
        for a in 0..cfg.azimuth_steps {
            let az = 2.0 * std::f64::consts::PI * (a as f64 + phase) / cfg.azimuth_steps as f64;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            if let Some(hit) = world.cast(origin, dir, boxes, cfg.max_range) {
                let (class, track) = world.class_of(hit.surface, boxes);
                let p = hit.point;
                points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
                intensity.push(intensity_of(hit.surface, p, boxes) as f32);
                labels.class.push(class);
                labels.track.push(track);
            }
        }
    }
    (points, intensity, labels)
}

/// Derive the seed of scene `index` from a dataset seed.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn actor_size(thing_rank: usize, rng: &mut ChaCha8Rng) -> Vec3 {
    match thing_rank {
        0 => [rng.random_range(3.8..4.6), rng.random_range(1.7..2.0), rng.random_range(1.4..1.7)],
        1 => [rng.random_range(0.5..0.8), rng.random_range(0.5..0.8), rng.random_range(1.6..1.9)],
        _ => [rng.random_range(1.5..2.5), rng.random_range(1.0..1.6), rng.random_range(1.0..2.0)],
    }
}

fn max_speed(thing_rank: usize) -> f64 {
    match thing_rank {
        0 => 4.0,
        1 => 1.2,
        _ => 2.0,
    }
}

fn footprint_radius(size: Vec3) -> f64 {
    0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt()
}

/// Generate one scene. Pure in `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = cfg.world();
    let cameras = cfg.camera_rig()?;
    let things: Vec<u16> = cfg.palette.things().collect();
    let n_actors = rng.random_range(cfg.min_actors..=cfg.max_actors);
    let frames = cfg.frames;
    let limit = cfg.half_extent - 1.5;

    let mut actors: Vec<ActorTrack> = Vec::new();
    let mut attempts = 0;
    while actors.len() < n_actors && attempts < 200 * n_actors.max(1) {
        attempts += 1;
        let rank = rng.random_range(0..things.len());
        let class = things[rank];
        let size = actor_size(rank, &mut rng);
        let r = rng.random_range(4.0..limit.min(cfg.lidar.max_range - 2.0).max(4.5));
        let bearing = rng.random_range(0.0..std::f64::consts::TAU);
        let start = [r * bearing.cos(), r * bearing.sin()];
        let heading = if rank == 0 && start[1].abs() <= cfg.road_half_width && rng.random_bool(0.7) {
            // Cars on the road mostly drive along it.
            if rng.random_bool(0.5) {
                0.0
            } else {
                std::f64::consts::PI
            }
        } else {
            rng.random_range(0.0..std::f64::consts::TAU)
        };
        let speed = rng.random_range(0.0..max_speed(rank));
        let step = speed * cfg.frame_interval;
        let poses: Vec<[f64; 3]> = (0..frames)
            .map(|f| {
                let d = step * f as f64;
                [start[0] + d * heading.cos(), start[1] + d * heading.sin(), heading]
            })
            .collect();
        let rad = footprint_radius(size);
        let ok_bounds = poses.iter().all(|p| p[0].abs() + rad < limit && p[1].abs() + rad < limit && (p[0] * p[0] + p[1] * p[1]).sqrt() > rad + 1.5);
        let clear = actors.iter().all(|a| {
            let ra = footprint_radius(a.size);
            a.poses.iter().zip(&poses).all(|(pa, pb)| {
                let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
                d > ra + rad + 0.8
            })
        });
        if !(ok_bounds && clear) {
            continue;
        }
        let id = actors.len() as u32 + 1;
        let class_hue = rank as f64 * 0.37;
        let hue = class_hue + 0.618_034 * id as f64 + rng.random_range(-0.05..0.05);
        let rgb = hsv_to_rgb(hue, 0.85, 0.95);
        let mut visible = vec![true; frames];
        let max_len = cfg.max_occlusion_frames.min(frames.saturating_sub(2));
        if max_len >= cfg.min_occlusion_frames && rng.random_bool(cfg.occlusion_probability) {
            let len = rng.random_range(cfg.min_occlusion_frames..=max_len);
            let start = rng.random_range(1..=frames - 1 - len);
            visible[start..start + len].iter_mut().for_each(|v| *v = false);
        }
        actors.push(ActorTrack { id, class, size, color: [to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])], poses, visible });
    }

    let origin = [0.0, 0.0, cfg.lidar.mount_height];
    let mut scene = Scene {
        name: format!("scene_{seed:016x}"),
        palette: cfg.palette.clone(),
        world,
        sensor_origin: origin,
        cameras,
        actors,
        frames: Vec::with_capacity(frames),
    };
    for f in 0..frames {
        let boxes = scene.visible_boxes(f);
        let phase = rng.random_range(0.0..1.0);
        let (points, intensity, labels) = scan(&scene.world, &cfg.lidar, origin, &boxes, phase);
        let images = (0..scene.cameras.len()).map(|k| render_view(&scene.world, &scene.cameras[k], &boxes, &scene.actors).0).collect();
        scene.frames.push(SceneFrame { points, intensity, labels, images });
    }
    Ok(scene)
}
