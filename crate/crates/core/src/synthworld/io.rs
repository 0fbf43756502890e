//! On-disk scene layout: `manifest.json`, `points_<t>.bin`, `labels_<t>.bin`
//! and `cam<k>_<t>.ppm` per scene directory, plus an `index.json` listing the
//! scenes of a dataset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, Vec3};
use crate::labels::{ClassPalette, FrameLabels};

use crate::par::{self, Exec};

use super::{generate_scene, scene_seed, ActorTrack, Image, Scene, SceneConfig, SceneFrame, SynthError, World};

const POINTS_MAGIC: &[u8; 4] = b"P4PT";
const LABELS_MAGIC: &[u8; 4] = b"P4LB";
const MANIFEST_FORMAT: &str = "panoptic4d-scene";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    points: String,
    labels: String,
    num_points: usize,
    images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    palette: ClassPalette,
    world: World,
    sensor_origin: Vec3,
    cameras: Vec<CameraModel>,
    actors: Vec<ActorTrack>,
    frames: Vec<FrameEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io { path: path.display().to_string(), source }
}

fn format_err(file: &Path, offset: usize, detail: impl Into<String>) -> SynthError {
    SynthError::Format { file: file.display().to_string(), offset, detail: detail.into() }
}

/// Write to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, SynthError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SynthError::MissingFile(path.display().to_string())),
        Err(e) => Err(io_err(path, e)),
    }
}

fn encode_points(frame: &SceneFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + frame.points.len() * 16);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    for (p, i) in frame.points.iter().zip(&frame.intensity) {
        for v in [p[0], p[1], p[2], *i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn encode_labels(labels: &FrameLabels) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len() * 6);
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for (c, t) in labels.class.iter().zip(&labels.track) {
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Check magic and count header; returns the count.
fn header(bytes: &[u8], magic: &[u8; 4], file: &Path, record: usize) -> Result<usize, SynthError> {
    if bytes.len() < 8 {
        return Err(format_err(file, bytes.len(), "truncated header"));
    }
    if &bytes[..4] != magic {
        return Err(format_err(file, 0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let want = 8 + n * record;
    if bytes.len() < want {
        let whole = (bytes.len() - 8) / record;
        return Err(format_err(file, 8 + whole * record, format!("truncated: {n} records declared, {whole} present")));
    }
    if bytes.len() > want {
        return Err(format_err(file, want, "trailing bytes"));
    }
    Ok(n)
}

fn decode_points(bytes: &[u8], file: &Path) -> Result<(Vec<[f32; 3]>, Vec<f32>), SynthError> {
    let n = header(bytes, POINTS_MAGIC, file, 16)?;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes[8..].chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        points.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    Ok((points, intensity))
}

fn decode_labels(bytes: &[u8], file: &Path) -> Result<FrameLabels, SynthError> {
    header(bytes, LABELS_MAGIC, file, 6)?;
    let mut labels = FrameLabels::default();
    for rec in bytes[8..].chunks_exact(6) {
        labels.class.push(u16::from_le_bytes([rec[0], rec[1]]));
        labels.track.push(u32::from_le_bytes([rec[2], rec[3], rec[4], rec[5]]));
    }
    Ok(labels)
}

/// Write a `(u16 class, u32 track)`-per-point label file atomically.
pub fn write_label_file(path: &Path, labels: &FrameLabels) -> Result<(), SynthError> {
    write_atomic(path, &encode_labels(labels))
}

pub fn read_label_file(path: &Path) -> Result<FrameLabels, SynthError> {
    decode_labels(&read_file(path)?, path)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], file: &Path) -> Result<Image, SynthError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(format_err(file, 0, "bad magic, expected P6"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| format_err(file, start, "malformed header number"))?;
    }
    if fields[2] != 255 {
        return Err(format_err(file, pos, "only 8-bit pixmaps are supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(file, pos, "missing separator after header"));
    }
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let want = w * h * 3;
    if bytes.len() - pos < want {
        return Err(format_err(file, bytes.len(), format!("truncated pixel data: need {want} bytes")));
    }
    if bytes.len() - pos > want {
        return Err(format_err(file, pos + want, "trailing bytes"));
    }
    Ok(Image { width: w, height: h, data: bytes[pos..].to_vec() })
}

/// Write a scene into `dir` (created if needed). The manifest goes last so
/// a readable manifest implies complete frame files.
pub fn write_dataset(scene: &Scene, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (t, f) in scene.frames.iter().enumerate() {
        let points = format!("points_{t}.bin");
        let labels = format!("labels_{t}.bin");
        write_atomic(&dir.join(&points), &encode_points(f))?;
        write_atomic(&dir.join(&labels), &encode_labels(&f.labels))?;
        let mut images = Vec::new();
        for (k, img) in f.images.iter().enumerate() {
            let name = format!("cam{k}_{t}.ppm");
            write_atomic(&dir.join(&name), &encode_ppm(img))?;
            images.push(name);
        }
        frames.push(FrameEntry { points, labels, num_points: f.points.len(), images });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: scene.name.clone(),
        palette: scene.palette.clone(),
        world: scene.world.clone(),
        sensor_origin: scene.sensor_origin,
        cameras: scene.cameras.clone(),
        actors: scene.actors.clone(),
        frames,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn read_dataset(dir: &Path) -> Result<Scene, SynthError> {
    let mpath = dir.join("manifest.json");
    let bytes = read_file(&mpath)?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| format_err(&mpath, e.column(), format!("line {}: {e}", e.line())))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(format_err(&mpath, 0, format!("unsupported format {} v{}", m.format, m.version)));
    }
    for cam in &m.cameras {
        cam.validate().map_err(|e| format_err(&mpath, 0, e.to_string()))?;
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for entry in &m.frames {
        let ppath = dir.join(&entry.points);
        let (points, intensity) = decode_points(&read_file(&ppath)?, &ppath)?;
        let lpath = dir.join(&entry.labels);
        let labels = decode_labels(&read_file(&lpath)?, &lpath)?;
        if points.len() != entry.num_points {
            return Err(format_err(&ppath, 4, format!("{} points, manifest says {}", points.len(), entry.num_points)));
        }
        if labels.len() != points.len() {
            return Err(format_err(&lpath, 4, format!("{} labels for {} points", labels.len(), points.len())));
        }
        let mut images = Vec::with_capacity(entry.images.len());
        for name in &entry.images {
            let ipath = dir.join(name);
            images.push(decode_ppm(&read_file(&ipath)?, &ipath)?);
        }
        frames.push(SceneFrame { points, intensity, labels, images });
    }
    for a in &m.actors {
        if a.poses.len() != frames.len() || a.visible.len() != frames.len() {
            return Err(format_err(&mpath, 0, format!("actor {} trajectory length mismatch", a.id)));
        }
    }
    Ok(Scene { name: m.name, palette: m.palette, world: m.world, sensor_origin: m.sensor_origin, cameras: m.cameras, actors: m.actors, frames })
}

/// Top-level listing of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub config: SceneConfig,
    /// Scene directory names relative to the dataset root.
    pub scenes: Vec<String>,
}

impl DatasetIndex {
    pub const FILE: &'static str = "index.json";

    pub fn write(&self, root: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        write_atomic(&root.join(Self::FILE), &serde_json::to_vec_pretty(self).expect("index serializes"))
    }

    pub fn read(root: &Path) -> Result<Self, SynthError> {
        let path = root.join(Self::FILE);
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| format_err(&path, e.column(), format!("line {}: {e}", e.line())))
    }
}

/// Generate `count` scenes from `(cfg, seed)` into `root/scene_<i>` and
/// write the index last. Scenes are generated and written in parallel.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, count: usize, root: &Path) -> Result<DatasetIndex, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let names: Vec<String> = (0..count).map(|i| format!("scene_{i:04}")).collect();
    let results = par::map_range(Exec::Parallel, count, |i| {
        let scene = generate_scene(cfg, scene_seed(seed, i))?;
        write_dataset(&scene, &root.join(&names[i]))
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    let index = DatasetIndex { seed, config: cfg.clone(), scenes: names };
    index.write(root)?;
    Ok(index)
}

/// A dataset opened from disk; scenes load lazily.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, SynthError> {
        Ok(Dataset { root: root.to_path_buf(), index: DatasetIndex::read(root)? })
    }

    pub fn len(&self) -> usize {
        self.index.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.scenes.is_empty()
    }

    pub fn scene_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.index.scenes[i])
    }

    pub fn load(&self, i: usize) -> Result<Scene, SynthError> {
        read_dataset(&self.scene_dir(i))
    }

    pub fn load_all(&self) -> Result<Vec<Scene>, SynthError> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
