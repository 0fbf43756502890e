use serde::{Deserialize, Serialize};

use super::GeometryError;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Pinhole camera with a rigid sensor→camera transform.
///
/// Camera frame convention: +z along the optical axis, +x right, +y down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rotation taking sensor-frame vectors to camera frame.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

/// Pixel coordinates plus validity for a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Result<Self, GeometryError> {
        let cam = CameraModel { fx, fy, cx, cy, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at sensor position `position` looking horizontally along `yaw`
    /// (radians, counter-clockwise from sensor +x). Sensor frame is x forward,
    /// y left, z up.
    pub fn looking_along(yaw: f64, position: Vec3, fx: f64, fy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let (s, c) = yaw.sin_cos();
        let forward = [c, s, 0.0];
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let rotation = [right, down, forward];
        let rp = mat_vec(&rotation, position);
        let translation = [-rp[0], -rp[1], -rp[2]];
        CameraModel::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, rotation, translation, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image extent must be non-zero");
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                if (d - e).abs() > 1e-9 {
                    return bad("rotation is not orthonormal");
                }
            }
        }
        if (det(r) - 1.0).abs() > 1e-9 {
            return bad("rotation determinant is not +1");
        }
        if !self.translation.iter().chain([self.fx, self.fy, self.cx, self.cy].iter()).all(|v| v.is_finite()) {
            return bad("non-finite parameter");
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn to_sensor(&self, c: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, [c[0] - self.translation[0], c[1] - self.translation[1], c[2] - self.translation[2]])
    }

    /// Sensor-frame position of the camera center.
    pub fn center(&self) -> Vec3 {
        self.to_sensor([0.0, 0.0, 0.0])
    }

    /// Pixel of a camera-frame point; `None` behind the camera.
    pub fn pixel_of_camera_point(&self, c: Vec3) -> Option<[f64; 2]> {
        if c[2] <= 0.0 {
            return None;
        }
        Some([self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy])
    }

    pub fn in_image(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] < self.width as f64 && px[1] >= 0.0 && px[1] < self.height as f64
    }

    /// Pixel and depth of a sensor-frame point when it lands in the image.
    pub fn project_point(&self, p: Vec3) -> Option<([f64; 2], f64)> {
        let c = self.to_camera(p);
        let px = self.pixel_of_camera_point(c)?;
        self.in_image(px).then_some((px, c[2]))
    }

    /// Sensor-frame point at pixel `(u, v)` and camera depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let c = [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z];
        self.to_sensor(c)
    }

    /// Camera-frame ray direction (unnormalized) through a pixel, in sensor frame.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        mat_t_vec(&self.rotation, [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
    }

    pub fn intrinsics(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn extrinsics(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [[r[0][0], r[0][1], r[0][2], t[0]], [r[1][0], r[1][1], r[1][2], t[1]], [r[2][0], r[2][1], r[2][2], t[2]], [0.0, 0.0, 0.0, 1.0]]
    }

    pub fn from_matrices(k: &Mat3, e: &[[f64; 4]; 4], width: usize, height: usize) -> Result<Self, GeometryError> {
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidCamera("intrinsics must be skew-free with last row (0,0,1)".into()));
        }
        if e[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidCamera("extrinsics last row must be (0,0,0,1)".into()));
        }
        let rotation = [[e[0][0], e[0][1], e[0][2]], [e[1][0], e[1][1], e[1][2]], [e[2][0], e[2][1], e[2][2]]];
        CameraModel::new(k[0][0], k[1][1], k[0][2], k[1][2], rotation, [e[0][3], e[1][3], e[2][3]], width, height)
    }

    /// Same camera after rotating the world by `yaw` about the sensor z axis.
    pub fn rotated_world(&self, yaw: f64) -> CameraModel {
        // A world point p becomes Rz p; the camera must see Rz p where it saw p.
        let (s, c) = yaw.sin_cos();
        let rz_t = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.rotation[i][k] * rz_t[k][j]).sum();
            }
        }
        CameraModel { rotation, ..self.clone() }
    }
}

/// Project sensor-frame points. Invalid projections are kept and flagged.
pub fn project(points: &[Vec3], cam: &CameraModel) -> Projection {
    let mut pixels = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for &p in points {
        let c = cam.to_camera(p);
        match cam.pixel_of_camera_point(c) {
            Some(px) => {
                valid.push(cam.in_image(px));
                pixels.push(px);
            }
            None => {
                valid.push(false);
                pixels.push([f64::NAN, f64::NAN]);
            }
        }
        depth.push(c[2]);
    }
    Projection { pixels, depth, valid }
}

/// First camera in rig order with a valid projection, with its pixel.
pub fn first_visible(rig: &[CameraModel], p: Vec3) -> Option<(usize, [f64; 2])> {
    rig.iter().enumerate().find_map(|(k, cam)| cam.project_point(p).map(|(px, _)| (k, px)))
}
