//! Poincare disc primitives.
//!
//! The hyperbolic plane is the open unit disc with metric `4|dz|^2 / (1 - |z|^2)^2`.
//! Points and tangent vectors are stored in model (complex) coordinates.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Points with `|z| >= 1 - BOUNDARY_GUARD` are rejected.
pub const BOUNDARY_GUARD: f64 = 1e-9;

/// A point of the hyperbolic plane in the Poincare disc model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct DiscPoint(Complex64);

impl DiscPoint {
    pub const ORIGIN: DiscPoint = DiscPoint(Complex64::new(0.0, 0.0));

    pub fn new(z: Complex64) -> Result<Self> {
        if z.re.is_finite() && z.im.is_finite() && z.norm() < 1.0 - BOUNDARY_GUARD {
            Ok(Self(z))
        } else {
            Err(Error::OutsideDisc { re: z.re, im: z.im })
        }
    }

    pub fn from_xy(x: f64, y: f64) -> Result<Self> {
        Self::new(Complex64::new(x, y))
    }

    /// Wraps a coordinate already known to lie in the disc (hot loops).
    #[inline]
    pub(crate) fn trusted(z: Complex64) -> Self {
        debug_assert!(z.norm() < 1.0, "trusted point outside disc: {z}");
        Self(z)
    }

    /// Point at hyperbolic distance `r` from the origin in direction `angle`.
    pub fn from_polar(r: f64, angle: f64) -> Result<Self> {
        Self::new(Complex64::from_polar((0.5 * r).tanh(), angle))
    }

    #[inline]
    pub fn z(self) -> Complex64 {
        self.0
    }

    pub fn x(self) -> f64 {
        self.0.re
    }

    pub fn y(self) -> f64 {
        self.0.im
    }

    /// `1 - |z|^2`, the conformal denominator.
    #[inline]
    pub fn conformal_gap(self) -> f64 {
        1.0 - self.0.norm_sqr()
    }

    pub fn conj(self) -> Self {
        Self(self.0.conj())
    }
}

impl TryFrom<[f64; 2]> for DiscPoint {
    type Error = Error;

    fn try_from(xy: [f64; 2]) -> Result<Self> {
        Self::from_xy(xy[0], xy[1])
    }
}

impl From<DiscPoint> for [f64; 2] {
    fn from(p: DiscPoint) -> Self {
        [p.0.re, p.0.im]
    }
}

/// A tangent vector, stored as its model-coordinate components at `base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVec {
    pub base: DiscPoint,
    pub dir: Complex64,
}

impl TangentVec {
    pub fn new(base: DiscPoint, dir: Complex64) -> Self {
        Self { base, dir }
    }

    /// Unit tangent at `base` pointing in the Euclidean direction `angle`.
    pub fn unit(base: DiscPoint, angle: f64) -> Self {
        let len = 0.5 * base.conformal_gap();
        Self { base, dir: Complex64::from_polar(len, angle) }
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (hyp_norm(self) - 1.0).abs() <= tol
    }
}

/// Hyperbolic distance `2 artanh |(z - w) / (1 - conj(z) w)|`.
#[inline]
pub fn hyp_dist(p: DiscPoint, q: DiscPoint) -> f64 {
    let (z, w) = (p.0, q.0);
    let num = z - w;
    if num.re == 0.0 && num.im == 0.0 {
        return 0.0;
    }
    let ratio = (num / (Complex64::new(1.0, 0.0) - z.conj() * w)).norm();
    2.0 * ratio.min(1.0).atanh()
}

/// Hyperbolic length of a tangent vector: `2|dir| / (1 - |z|^2)`.
pub fn hyp_norm(v: &TangentVec) -> f64 {
    2.0 * v.dir.norm() / v.base.conformal_gap()
}

/// Density of hyperbolic area with respect to Euclidean area: `4 / (1 - |z|^2)^2`.
#[inline]
pub fn area_density(p: DiscPoint) -> f64 {
    let g = p.conformal_gap();
    4.0 / (g * g)
}

/// Area of a hyperbolic disc of radius `r`, `4 pi sinh^2(r/2)`.
pub fn disc_area(r: f64) -> f64 {
    let s = (0.5 * r).sinh();
    4.0 * PI * s * s
}

/// Euclidean radius of the model disc representing a hyperbolic disc of
/// radius `r` centered at the origin.
pub fn euclidean_radius(r: f64) -> f64 {
    (0.5 * r).tanh()
}

/// Orientation-preserving isometry `z -> (a z + b) / (conj(b) z + conj(a))`
/// with `|a|^2 - |b|^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mobius {
    a: Complex64,
    b: Complex64,
}

impl Mobius {
    pub const IDENTITY: Mobius = Mobius { a: Complex64::new(1.0, 0.0), b: Complex64::new(0.0, 0.0) };

    pub fn new(a: Complex64, b: Complex64) -> Result<Self> {
        let det = a.norm_sqr() - b.norm_sqr();
        if (det - 1.0).abs() > 1e-9 * (a.norm_sqr() + b.norm_sqr()).max(1.0) {
            return Err(Error::NotNormalized { det });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> Complex64 {
        self.a
    }

    pub fn b(&self) -> Complex64 {
        self.b
    }

    /// The isometry sending the origin to `p`, acting on the tangent plane
    /// at the origin as rotation by `theta`.
    pub fn from_point(p: DiscPoint, theta: f64) -> Self {
        let s = p.conformal_gap().sqrt();
        let half = Complex64::from_polar(1.0, 0.5 * theta);
        Self { a: half / s, b: p.0 * half.conj() / s }
    }

    /// Rotation about the origin by `theta`.
    pub fn rotation(theta: f64) -> Self {
        Self { a: Complex64::from_polar(1.0, 0.5 * theta), b: Complex64::new(0.0, 0.0) }
    }

    pub fn inverse(&self) -> Self {
        Self { a: self.a.conj(), b: -self.b }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Mobius) -> Self {
        // Matrix [[a, b], [conj b, conj a]] product keeps the same shape.
        let a = self.a * other.a + self.b * other.b.conj();
        let b = self.a * other.b + self.b * other.a.conj();
        Self { a, b }
    }

    #[inline]
    pub fn apply_z(&self, z: Complex64) -> Complex64 {
        (self.a * z + self.b) / (self.b.conj() * z + self.a.conj())
    }

    pub fn apply(&self, p: DiscPoint) -> DiscPoint {
        DiscPoint::trusted(self.apply_z(p.0))
    }

    /// Complex derivative `1 / (conj(b) z + conj(a))^2`.
    pub fn derivative(&self, z: Complex64) -> Complex64 {
        let d = self.b.conj() * z + self.a.conj();
        Complex64::new(1.0, 0.0) / (d * d)
    }

    pub fn push(&self, v: &TangentVec) -> TangentVec {
        TangentVec { base: self.apply(v.base), dir: self.derivative(v.base.0) * v.dir }
    }
}

/// Convenience wrappers mirroring the operation names used elsewhere.
pub fn mobius_from(p: DiscPoint, theta: f64) -> Mobius {
    Mobius::from_point(p, theta)
}

pub fn mobius_apply(t: &Mobius, p: DiscPoint) -> DiscPoint {
    t.apply(p)
}

pub fn mobius_push(t: &Mobius, v: &TangentVec) -> TangentVec {
    t.push(v)
}

/// Point at fraction `lambda` of the hyperbolic geodesic from `x` to `y`.
pub fn geodesic_point(x: DiscPoint, y: DiscPoint, lambda: f64) -> DiscPoint {
    let (xz, yz) = (x.0, y.0);
    // Translate x to the origin, interpolate radially, translate back.
    let w = (yz - xz) / (Complex64::new(1.0, 0.0) - xz.conj() * yz);
    let r = w.norm();
    if r == 0.0 {
        return x;
    }
    let d = 2.0 * r.atanh();
    let q = w * ((0.5 * lambda * d).tanh() / r);
    DiscPoint::trusted((q + xz) / (xz.conj() * q + 1.0))
}
