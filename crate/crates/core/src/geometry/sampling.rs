use crate::autodiff::Tensor;

/// Layout of an image feature map stored as a `[height·width, D]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub height: usize,
    pub width: usize,
    /// Pixels per cell.
    pub stride: usize,
}

impl MapShape {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Cell indices and weights for bilinear interpolation at pixel `px`.
///
/// Cell `(r, c)` is centered at pixel `((c + 0.5)·stride, (r + 0.5)·stride)`;
/// positions beyond the outermost centers clamp to the border cells.
pub fn bilinear_taps(shape: MapShape, px: [f64; 2]) -> [(usize, f64); 4] {
    let s = shape.stride as f64;
    let x = (px[0] / s - 0.5).clamp(0.0, (shape.width - 1) as f64);
    let y = (px[1] / s - 0.5).clamp(0.0, (shape.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(shape.width - 1);
    let y1 = (y0 + 1).min(shape.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let w = shape.width;
    [(y0 * w + x0, (1.0 - fx) * (1.0 - fy)), (y0 * w + x1, fx * (1.0 - fy)), (y1 * w + x0, (1.0 - fx) * fy), (y1 * w + x1, fx * fy)]
}

/// Bilinearly sample a feature map at pixel coordinates.
pub fn sample_image_features(map: &Tensor, shape: MapShape, pixels: &[[f64; 2]]) -> Tensor {
    assert_eq!(map.rows(), shape.cells(), "feature map rows do not match its shape");
    let d = map.cols();
    let mut out = vec![0.0; pixels.len() * d];
    for (i, &px) in pixels.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for (cell, w) in bilinear_taps(shape, px) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in row.iter_mut().zip(map.row(cell)) {
                *o += w * v;
            }
        }
    }
    Tensor::matrix(pixels.len(), d, out)
}
