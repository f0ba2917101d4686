//! Planar rotations about a center, and resampling of score maps under them.
//!
//! Coordinates are image coordinates: `x` grows to the right, `y` grows
//! downward, and pixel `(x, y)` has its center at the integer lattice point.
//! A transform maps `p` to `R (p - c) + c`.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoremap::ScoreMap;

/// A 2-D point or vector in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Row-major 2x2 matrix.
pub type Mat2 = [[f64; 2]; 2];

/// Unit vector pointing up in image space.
pub const UP: Point = Point::new(0.0, -1.0);
/// Unit vector pointing down in image space.
pub const DOWN: Point = Point::new(0.0, 1.0);

// cos/sin of multiples of pi/2 leave residues around 1e-16; snapping them
// makes quarter turns exact permutations of the pixel lattice.
fn snap(v: f64) -> f64 {
    if v.abs() < 1e-15 {
        0.0
    } else {
        v
    }
}

/// `[[cos θ, -sin θ], [sin θ, cos θ]]`.
pub fn rotation_matrix(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    let (s, c) = (snap(s), snap(c));
    [[c, -s], [s, c]]
}

pub fn mat_vec(m: &Mat2, v: Point) -> Point {
    Point::new(m[0][0] * v.x + m[0][1] * v.y, m[1][0] * v.x + m[1][1] * v.y)
}

/// Signed angle θ ∈ (-π, π] such that rotating `v` by θ points it along
/// `target`. `-π` is folded onto `+π`.
pub fn signed_angle_between(v: Point, target: Point) -> Result<f64> {
    if v.norm() == 0.0 || !v.is_finite() {
        return Err(Error::ZeroVector);
    }
    let theta = v.cross(target).atan2(v.dot(target));
    Ok(if theta <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        theta
    })
}

/// Signed rotation that sends `v` to the upward vertical `(0, -1)`.
///
/// Its magnitude is `arccos(v·up / |v|)`; the sign is chosen so that
/// `rotation_matrix(θ) · v` is a positive multiple of `(0, -1)`.
pub fn signed_angle_to_vertical(v: Point) -> Result<f64> {
    signed_angle_between(v, UP)
}

/// A rotation about a center: `p ↦ R (p - c) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    pub r: Mat2,
    pub c: Point,
}

impl Default for Transform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform2D {
    pub fn identity() -> Self {
        Transform2D {
            r: [[1.0, 0.0], [0.0, 1.0]],
            c: Point::default(),
        }
    }

    pub fn rotation(theta: f64, center: Point) -> Self {
        Transform2D {
            r: rotation_matrix(theta),
            c: center,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.r == [[1.0, 0.0], [0.0, 1.0]]
    }

    /// Rotation angle in (-π, π].
    pub fn angle(&self) -> f64 {
        self.r[1][0].atan2(self.r[0][0])
    }

    pub fn apply(&self, p: Point) -> Point {
        mat_vec(&self.r, p - self.c) + self.c
    }

    /// Inverse rotation about the same center (`Rᵀ`, `c`).
    pub fn invert(&self) -> Self {
        let r = self.r;
        Transform2D {
            r: [[r[0][0], r[1][0]], [r[0][1], r[1][1]]],
            c: self.c,
        }
    }

    /// Deviation of `R` from a proper rotation: max of `|RᵀR - I|` entries and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.r;
        let a = r[0][0] * r[0][0] + r[1][0] * r[1][0] - 1.0;
        let b = r[0][0] * r[0][1] + r[1][0] * r[1][1];
        let d = r[0][1] * r[0][1] + r[1][1] * r[1][1] - 1.0;
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0] - 1.0;
        a.abs().max(b.abs()).max(d.abs()).max(det.abs())
    }
}

pub fn transform_point(t: &Transform2D, p: Point) -> Point {
    t.apply(p)
}

pub fn invert(t: &Transform2D) -> Transform2D {
    t.invert()
}

/// The four bilinear taps of a source location: flat pixel indices (`None`
/// when the tap falls outside the map) and their weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub idx: [Option<usize>; 4],
    pub w: [f64; 4],
}

impl Taps {
    pub fn at(src: Point, height: usize, width: usize) -> Self {
        let x0 = src.x.floor();
        let y0 = src.y.floor();
        let fx = src.x - x0;
        let fy = src.y - y0;
        let w = [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ];
        let offsets = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let mut idx = [None; 4];
        for (slot, (dx, dy)) in idx.iter_mut().zip(offsets) {
            let (x, y) = (x0 + dx, y0 + dy);
            if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
                *slot = Some(y as usize * width + x as usize);
            }
        }
        Taps { idx, w }
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                v += self.w[k] * plane[i];
            }
        }
        v
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                plane[i] += self.w[k] * g;
            }
        }
    }
}

/// Taps for every output pixel under the inverse mapping `q ↦ t⁻¹(q)`.
fn inverse_taps(t: &Transform2D, height: usize, width: usize) -> Vec<Taps> {
    let inv = t.invert();
    let mut taps = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let src = inv.apply(Point::new(x as f64, y as f64));
            taps.push(Taps::at(src, height, width));
        }
    }
    taps
}

fn check_subset(m: &ScoreMap, channels: &[usize]) {
    assert!(
        channels.iter().all(|&c| c < m.channels()),
        "channel subset {:?} out of range for {} channels",
        channels,
        m.channels()
    );
}

/// Rotate the selected channels of `m` by `t` using inverse mapping with
/// bilinear sampling: `out(q) = in(t⁻¹(q))`. Samples outside the map read as
/// zero. Other channels are copied unchanged.
pub fn warp_map(m: &ScoreMap, t: &Transform2D, channels: &[usize]) -> ScoreMap {
    check_subset(m, channels);
    let mut out = m.clone();
    if t.is_identity() {
        return out;
    }
    let (h, w) = (m.height(), m.width());
    let taps = inverse_taps(t, h, w);
    for &c in channels {
        let src = m.channel(c);
        let dst = out.channel_mut(c);
        for (d, tap) in dst.iter_mut().zip(&taps) {
            *d = tap.sample(src);
        }
    }
    out
}

/// Adjoint of [`warp_map`] with respect to the map values: every output
/// gradient is scattered onto its bilinear source pixels with the sampling
/// weights. Channels outside the subset pass their gradient through.
pub fn warp_backward(grad_out: &ScoreMap, t: &Transform2D, channels: &[usize]) -> ScoreMap {
    check_subset(grad_out, channels);
    let mut grad_in = grad_out.clone();
    if t.is_identity() {
        return grad_in;
    }
    let (h, w) = (grad_out.height(), grad_out.width());
    let taps = inverse_taps(t, h, w);
    for &c in channels {
        let g = grad_out.channel(c);
        let dst = grad_in.channel_mut(c);
        dst.fill(0.0);
        for (&gv, tap) in g.iter().zip(&taps) {
            if gv != 0.0 {
                tap.scatter(dst, gv);
            }
        }
    }
    grad_in
}

/// Bilinear resampling of one plane under an arbitrary inverse mapping:
/// `out(q) = src(source_of(q))`, zero outside.
pub(crate) fn resample_plane(src: &[f64], height: usize, width: usize, source_of: impl Fn(Point) -> Point) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(Taps::at(source_of(Point::new(x as f64, y as f64)), height, width).sample(src));
        }
    }
    out
}

/// Every channel index of `m`.
pub fn all_channels(m: &ScoreMap) -> Vec<usize> {
    (0..m.channels()).collect()
}
