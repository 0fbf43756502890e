use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

use super::camera::Vec3;
use super::GeometryError;

/// Lowest spatial frequency of the xyz Fourier table, in cycles per meter.
const XYZ_BASE_FREQ: f64 = 1.0 / 64.0;
const XYZ_OCTAVES: usize = 8;
/// Range frequencies span these angular rates (radians per meter).
const RANGE_MIN_RATE: f64 = 2.0 * PI / 128.0;
const RANGE_MAX_RATE: f64 = 2.0 * PI / 0.5;

/// Frozen frequency tables for the voxel/image-feature positional encoding.
///
/// The first `D/2` dims are sin/cos pairs of single-axis Fourier features of
/// xyz; the last `D/2` are sin/cos pairs of the range to the sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoder {
    dim: usize,
    xyz_terms: Vec<(usize, f64)>,
    range_rates: Vec<f64>,
}

impl PositionalEncoder {
    pub fn new(dim: usize) -> Result<Self, GeometryError> {
        if dim == 0 || dim % 4 != 0 {
            return Err(GeometryError::InvalidDimension(format!("encoding dim {dim} must be a positive multiple of 4")));
        }
        let n = dim / 4;
        let groups = n.div_ceil(3);
        let xyz_terms = (0..n)
            .map(|j| {
                let octave = (j / 3) * XYZ_OCTAVES / groups;
                (j % 3, 2.0 * PI * XYZ_BASE_FREQ * (1u64 << octave) as f64)
            })
            .collect();
        let range_rates = (0..n)
            .map(|j| {
                let t = if n == 1 { 0.0 } else { j as f64 / (n - 1) as f64 };
                RANGE_MIN_RATE * (RANGE_MAX_RATE / RANGE_MIN_RATE).powf(t)
            })
            .collect();
        Ok(PositionalEncoder { dim, xyz_terms, range_rates })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, xyz: Vec3, origin: Vec3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for &(axis, w) in &self.xyz_terms {
            let (s, c) = (w * xyz[axis]).sin_cos();
            out.push(s);
            out.push(c);
        }
        let d = [xyz[0] - origin[0], xyz[1] - origin[1], xyz[2] - origin[2]];
        let range = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        out.extend(self.encode_range(range));
        out
    }

    /// Depth half only.
    pub fn encode_range(&self, range: f64) -> Vec<f64> {
        self.range_rates
            .iter()
            .flat_map(|&w| {
                let (s, c) = (w * range).sin_cos();
                [s, c]
            })
            .collect()
    }

    /// Lipschitz bound of the depth half w.r.t. range, Euclidean norm.
    pub fn range_lipschitz(&self) -> f64 {
        self.range_rates.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn encode_all(&self, points: &[Vec3], origin: Vec3) -> Tensor {
        let mut data = Vec::with_capacity(points.len() * self.dim);
        for &p in points {
            data.extend(self.encode(p, origin));
        }
        Tensor::matrix(points.len(), self.dim, data)
    }
}

pub fn positional_encoding(xyz: Vec3, origin: Vec3, dim: usize) -> Result<Vec<f64>, GeometryError> {
    Ok(PositionalEncoder::new(dim)?.encode(xyz, origin))
}

const EXPAND_SEED: u64 = 0x5EED_F00D_0F0F_1234;
const EXPAND_MIN_RATE: f64 = 1.0 / 64.0;
const EXPAND_MAX_RATE: f64 = 2.0;

/// Frozen random-Fourier projection `k → out_dim/2` followed by sin and cos.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalExpander {
    input_dim: usize,
    /// `[out_dim/2, input_dim]`, row-major.
    freqs: Vec<f64>,
}

impl SinusoidalExpander {
    pub fn new(input_dim: usize, out_dim: usize) -> Result<Self, GeometryError> {
        if out_dim == 0 || out_dim % 2 != 0 {
            return Err(GeometryError::InvalidDimension(format!("expansion dim {out_dim} must be positive and even")));
        }
        let half = out_dim / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(EXPAND_SEED ^ ((input_dim as u64) << 32) ^ out_dim as u64);
        let mut freqs = Vec::with_capacity(half * input_dim);
        for j in 0..half {
            let dir: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let t = if half == 1 { 0.0 } else { j as f64 / (half - 1) as f64 };
            let rate = EXPAND_MIN_RATE * (EXPAND_MAX_RATE / EXPAND_MIN_RATE).powf(t);
            freqs.extend(dir.iter().map(|v| v / norm * rate));
        }
        Ok(SinusoidalExpander { input_dim, freqs })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.freqs.len() / self.input_dim.max(1)
    }

    pub fn expand(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.input_dim, "sinusoidal expansion input width");
        let phases: Vec<f64> = self.freqs.chunks(self.input_dim.max(1)).map(|row| row.iter().zip(values).map(|(w, v)| w * v).sum()).collect();
        phases.iter().map(|p| p.sin()).chain(phases.iter().map(|p| p.cos())).collect()
    }
}

pub fn sinusoidal_expand(values: &[f64], out_dim: usize) -> Result<Vec<f64>, GeometryError> {
    Ok(SinusoidalExpander::new(values.len(), out_dim)?.expand(values))
}
