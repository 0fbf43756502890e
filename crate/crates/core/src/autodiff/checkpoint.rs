// Parameter checkpoints: `<path>` holds raw little-endian f64 values, the
// sidecar `<path>.idx` lists one `name<TAB>shape<TAB>byte_offset` per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

fn err(path: &Path, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint { path: path.display().to_string(), detail: detail.into() }
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<(), AutodiffError> {
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut index = String::new();
    for (_, name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        index.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), bytes.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    fs::write(index_path(path), index)?;
    Ok(())
}

fn read_index(path: &Path) -> Result<Vec<CheckpointEntry>, AutodiffError> {
    let idx = index_path(path);
    let text = fs::read_to_string(&idx)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(&idx, format!("line {}: expected 3 fields", n + 1)));
            }
            let shape = if cols[1].is_empty() {
                Vec::new()
            } else {
                cols[1]
                    .split(',')
                    .map(|s| s.parse::<usize>().map_err(|_| err(&idx, format!("line {}: bad shape", n + 1))))
                    .collect::<Result<_, _>>()?
            };
            let offset = cols[2].parse().map_err(|_| err(&idx, format!("line {}: bad offset", n + 1)))?;
            Ok(CheckpointEntry { name: cols[0].to_string(), shape, offset })
        })
        .collect()
}

/// Overwrite the values of `params` from a checkpoint. Every parameter must
/// be present with a matching shape.
pub fn load_checkpoint(params: &mut ParamStore, path: &Path) -> Result<(), AutodiffError> {
    let entries = read_index(path)?;
    let bytes = fs::read(path)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let entry = entries.iter().find(|e| e.name == name).ok_or_else(|| err(path, format!("missing parameter `{name}`")))?;
        let t = params.get(id);
        if entry.shape != t.shape() {
            return Err(err(path, format!("`{name}` has shape {:?}, expected {:?}", entry.shape, t.shape())));
        }
        let n = t.len();
        let end = entry.offset + n * 8;
        if end > bytes.len() {
            return Err(err(path, format!("truncated at byte {} reading `{name}`", bytes.len())));
        }
        let data: Vec<f64> = bytes[entry.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        *params.get_mut(id) = Tensor::new(entry.shape.clone(), data);
    }
    Ok(())
}
