use std::collections::HashMap;

use crate::autodiff::Tensor;

use super::camera::Vec3;

pub type VoxelCoord = [i64; 3];

/// Sparse grid of occupied voxels at one stride.
///
/// Coordinates are unique and sorted lexicographically, so the voxel order
/// does not depend on the order of the source points.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub stride: u32,
    /// Edge length of a stride-1 voxel in meters.
    pub voxel_size: f64,
    pub coords: Vec<VoxelCoord>,
    /// Per-voxel features; `[N, 0]` until something fills them.
    pub features: Tensor,
    /// Point → voxel index. Populated for stride-1 grids only.
    pub point_to_voxel: Vec<usize>,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.voxel_size * self.stride as f64
    }

    /// Metric center of voxel `i`.
    pub fn center(&self, i: usize) -> Vec3 {
        let s = self.cell_size();
        let c = self.coords[i];
        [(c[0] as f64 + 0.5) * s, (c[1] as f64 + 0.5) * s, (c[2] as f64 + 0.5) * s]
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }
}

pub fn voxel_of(p: Vec3, voxel_size: f64) -> VoxelCoord {
    [(p[0] / voxel_size).floor() as i64, (p[1] / voxel_size).floor() as i64, (p[2] / voxel_size).floor() as i64]
}

pub fn parent_of(c: VoxelCoord) -> VoxelCoord {
    [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]
}

fn unique_sorted(coords: impl Iterator<Item = VoxelCoord>) -> (Vec<VoxelCoord>, Vec<usize>) {
    let raw: Vec<VoxelCoord> = coords.collect();
    let mut uniq = raw.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let lookup: HashMap<VoxelCoord, usize> = uniq.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let map = raw.iter().map(|c| lookup[c]).collect();
    (uniq, map)
}

/// Bucket points into a stride-1 grid: point `p` lands in `floor(p / size)`.
pub fn voxelize(points: &[Vec3], voxel_size: f64) -> SparseVoxelGrid {
    let (coords, point_to_voxel) = unique_sorted(points.iter().map(|&p| voxel_of(p, voxel_size)));
    SparseVoxelGrid { stride: 1, voxel_size, features: Tensor::zeros(vec![coords.len(), 0]), coords, point_to_voxel }
}

/// Halve the resolution. Returns the coarser grid and the child → parent map.
pub fn downsample(grid: &SparseVoxelGrid) -> (SparseVoxelGrid, Vec<usize>) {
    let (coords, parent) = unique_sorted(grid.coords.iter().map(|&c| parent_of(c)));
    let g = SparseVoxelGrid {
        stride: grid.stride * 2,
        voxel_size: grid.voxel_size,
        features: Tensor::zeros(vec![coords.len(), 0]),
        coords,
        point_to_voxel: Vec::new(),
    };
    (g, parent)
}

/// Grids at strides 1, 2, 4, 8 with parent maps between consecutive levels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPyramid {
    pub levels: Vec<SparseVoxelGrid>,
    /// `parents[l][i]` is the level-`l+1` voxel containing level-`l` voxel `i`.
    pub parents: Vec<Vec<usize>>,
}

impl VoxelPyramid {
    pub fn build(points: &[Vec3], voxel_size: f64, num_levels: usize) -> Self {
        let mut levels = vec![voxelize(points, voxel_size)];
        let mut parents = Vec::new();
        for _ in 1..num_levels {
            let (g, p) = downsample(levels.last().expect("non-empty"));
            levels.push(g);
            parents.push(p);
        }
        VoxelPyramid { levels, parents }
    }

    pub fn stride_level(&self, stride: u32) -> Option<usize> {
        self.levels.iter().position(|g| g.stride == stride)
    }

    /// Point → voxel index at level `l`.
    pub fn point_map(&self, level: usize) -> Vec<usize> {
        let mut m = self.levels[0].point_to_voxel.clone();
        for p in &self.parents[..level] {
            m.iter_mut().for_each(|v| *v = p[*v]);
        }
        m
    }
}

/// Mean of member point features per voxel.
pub fn p2v_scatter_mean(point_features: &Tensor, map: &[usize], num_voxels: usize) -> Tensor {
    let d = point_features.cols();
    let mut sums = vec![0.0; num_voxels * d];
    let mut counts = vec![0usize; num_voxels];
    for (i, &v) in map.iter().enumerate() {
        counts[v] += 1;
        for (s, x) in sums[v * d..(v + 1) * d].iter_mut().zip(point_features.row(i)) {
            *s += x;
        }
    }
    for (v, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums[v * d..(v + 1) * d].iter_mut().for_each(|s| *s /= c as f64);
        }
    }
    Tensor::matrix(num_voxels, d, sums)
}

/// Copy each voxel's feature to its member points.
pub fn v2p_gather(voxel_features: &Tensor, map: &[usize]) -> Tensor {
    let d = voxel_features.cols();
    let mut out = Vec::with_capacity(map.len() * d);
    for &v in map {
        out.extend_from_slice(voxel_features.row(v));
    }
    Tensor::matrix(map.len(), d, out)
}
