//! Planar geometry for ray scans and contact checks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Disc {
    pub fn center(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn square(half: f64) -> Self {
        Self {
            x0: -half,
            x1: half,
            y0: -half,
            y1: half,
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Shrinks the rectangle by `m` on every side.
    pub fn inset(&self, m: f64) -> Self {
        Self {
            x0: self.x0 + m,
            x1: self.x1 - m,
            y0: self.y0 + m,
            y1: self.y1 - m,
        }
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(self.x0, self.x1), p[1].clamp(self.y0, self.y1)]
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Unit directions of `n` rays evenly spaced counter-clockwise from +x.
pub fn ray_directions(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Distance along a unit ray from `o` to the first intersection with `d`,
/// zero when the origin is inside the disc.
pub fn ray_disc(o: [f64; 2], dir: [f64; 2], d: &Disc) -> Option<f64> {
    let fx = o[0] - d.x;
    let fy = o[1] - d.y;
    let c = fx * fx + fy * fy - d.r * d.r;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = fx * dir[0] + fy * dir[1];
    if b >= 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

/// Distance from `o` (inside `r`) along a unit ray to the rectangle boundary.
pub fn ray_rect_exit(o: [f64; 2], dir: [f64; 2], r: &Rect) -> f64 {
    let mut t = f64::INFINITY;
    if dir[0] > 0.0 {
        t = t.min((r.x1 - o[0]) / dir[0]);
    } else if dir[0] < 0.0 {
        t = t.min((r.x0 - o[0]) / dir[0]);
    }
    if dir[1] > 0.0 {
        t = t.min((r.y1 - o[1]) / dir[1]);
    } else if dir[1] < 0.0 {
        t = t.min((r.y0 - o[1]) / dir[1]);
    }
    t.max(0.0)
}

/// Reflects `x` back into `[lo, hi]`.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let mut v = x;
    if v > hi {
        v = 2.0 * hi - v;
    }
    if v < lo {
        v = 2.0 * lo - v;
    }
    v.clamp(lo, hi)
}
