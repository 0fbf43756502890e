//! Scene geometry and ray casting shared by the LiDAR and camera simulators.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Static background: a ground plane with a road strip and building walls
/// at `x = ±half_extent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub half_extent: f64,
    pub road_half_width: f64,
    pub wall_height: f64,
    /// Class ids for road, off-road ground and walls.
    pub road_class: u16,
    pub ground_class: u16,
    pub wall_class: u16,
}

/// Oriented actor box resting on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorBox {
    pub track: u32,
    pub class: u16,
    /// Center of the bottom face.
    pub base: Vec3,
    /// Length (along heading), width, height.
    pub size: Vec3,
    pub yaw: f64,
}

impl ActorBox {
    fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.base[0], p[1] - self.base[1], p[2] - self.base[2] - self.size[2] / 2.0];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    fn dir_to_local(&self, d: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Whether `p` lies inside the box grown by `tol` on every side.
    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= self.size[k] / 2.0 + tol)
    }

    /// Entry distance and entered face axis of a ray, if it hits.
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, usize)> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for k in 0..3 {
            let h = self.size[k] / 2.0;
            if d[k].abs() < 1e-15 {
                if o[k].abs() > h {
                    return None;
                }
                continue;
            }
            let (a, b) = ((-h - o[k]) / d[k], (h - o[k]) / d[k]);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            if a > t_near {
                t_near = a;
                axis = k;
            }
            t_far = t_far.min(b);
        }
        (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis))
    }

    /// Rotate about the sensor z axis.
    pub fn rotated(&self, yaw: f64) -> ActorBox {
        let (s, c) = yaw.sin_cos();
        let b = self.base;
        ActorBox { base: [c * b[0] - s * b[1], s * b[0] + c * b[1], b[2]], yaw: self.yaw + yaw, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Road,
    Ground,
    Wall,
    /// Index into the box list and the face axis that was hit.
    Actor(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vec3,
    pub surface: Surface,
}

impl World {
    /// Nearest surface along a ray (direction need not be normalized;
    /// `distance` is in units of `dir`).
    pub fn cast(&self, origin: Vec3, dir: Vec3, boxes: &[ActorBox], max_distance: f64) -> Option<Hit> {
        let mut best: Option<(f64, Surface)> = None;
        let mut consider = |t: f64, s: Surface| {
            if t > 1e-9 && t <= max_distance && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, s));
            }
        };
        if dir[2] < 0.0 {
            let t = -origin[2] / dir[2];
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            if x.abs() <= self.half_extent && y.abs() <= self.half_extent {
                let s = if y.abs() <= self.road_half_width { Surface::Road } else { Surface::Ground };
                consider(t, s);
            }
        }
        for sign in [-1.0, 1.0] {
            let wall_x = sign * self.half_extent;
            if dir[0] * sign > 0.0 {
                let t = (wall_x - origin[0]) / dir[0];
                let y = origin[1] + t * dir[1];
                let z = origin[2] + t * dir[2];
                if y.abs() <= self.half_extent && (0.0..=self.wall_height).contains(&z) {
                    consider(t, Surface::Wall);
                }
            }
        }
        for (i, b) in boxes.iter().enumerate() {
            if let Some((t, axis)) = b.intersect(origin, dir) {
                consider(t, Surface::Actor(i, axis));
            }
        }
        best.map(|(t, surface)| Hit { distance: t, point: [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]], surface })
    }

    pub fn class_of(&self, s: Surface, boxes: &[ActorBox]) -> (u16, u32) {
        match s {
            Surface::Road => (self.road_class, 0),
            Surface::Ground => (self.ground_class, 0),
            Surface::Wall => (self.wall_class, 0),
            Surface::Actor(i, _) => (boxes[i].class, boxes[i].track),
        }
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
