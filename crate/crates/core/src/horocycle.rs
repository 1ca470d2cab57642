//! Oriented unit-speed horocycles in the Poincare disc.
//!
//! A horocycle is encoded by `(lambda, t0, omega)` and traced as
//!
//! ```text
//! alpha(t) = omega * (t - t0 + (1 - lambda) i) / (t - t0 + (1 + lambda) i)
//! ```
//!
//! Its trace is the Euclidean circle of radius `lambda / (1 + lambda)`
//! internally tangent to the unit circle at `omega`, traversed
//! counterclockwise at unit hyperbolic speed.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypdisc::{hyp_norm, DiscPoint, Mobius, TangentVec};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horocycle {
    lambda: f64,
    t0: f64,
    omega: Complex64,
}

impl Horocycle {
    pub fn new(lambda: f64, t0: f64, omega: Complex64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("horocycle lambda must be > 0, got {lambda}")));
        }
        if !t0.is_finite() || (omega.norm() - 1.0).abs() >= 1e-12 {
            return Err(Error::InvalidParameter(format!("omega must be unimodular, got |omega| = {}", omega.norm())));
        }
        Ok(Self { lambda, t0, omega })
    }

    /// Tangency angle form of [`Horocycle::new`].
    pub fn from_angle(lambda: f64, t0: f64, phi: f64) -> Result<Self> {
        Self::new(lambda, t0, Complex64::from_polar(1.0, phi))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn omega(&self) -> Complex64 {
        self.omega
    }

    /// Angle of the tangency point, in `(-pi, pi]`.
    pub fn omega_angle(&self) -> f64 {
        self.omega.arg()
    }

    #[inline]
    pub fn eval_z(&self, t: f64) -> Complex64 {
        let tau = t - self.t0;
        self.omega * Complex64::new(tau, 1.0 - self.lambda) / Complex64::new(tau, 1.0 + self.lambda)
    }

    pub fn eval(&self, t: f64) -> DiscPoint {
        DiscPoint::trusted(self.eval_z(t))
    }

    /// Model-coordinate velocity `2 lambda i omega / (t - t0 + (1 + lambda) i)^2`.
    pub fn velocity(&self, t: f64) -> Complex64 {
        let d = Complex64::new(t - self.t0, 1.0 + self.lambda);
        self.omega * I * (2.0 * self.lambda) / (d * d)
    }

    pub fn tangent(&self, t: f64) -> TangentVec {
        TangentVec::new(self.eval(t), self.velocity(t))
    }

    /// Euclidean center `omega / (1 + lambda)` and radius `lambda / (1 + lambda)`.
    pub fn euclid_center(&self) -> (Complex64, f64) {
        (self.omega / (1.0 + self.lambda), self.lambda / (1.0 + self.lambda))
    }

    /// Euclidean distance from `z` to the trace circle.
    pub fn trace_distance(&self, z: Complex64) -> f64 {
        let (c, r) = self.euclid_center();
        ((z - c).norm() - r).abs()
    }

    /// Parameter of the point of the trace closest to `z` (its radial projection).
    pub fn parameter_of(&self, z: Complex64) -> f64 {
        let (c, r) = self.euclid_center();
        let d = z - c;
        let p = if d.norm() > 0.0 { c + d * (r / d.norm()) } else { c + self.omega * r };
        // Invert alpha: p / omega = (tau + (1-l) i) / (tau + (1+l) i).
        let s = p / self.omega;
        let tau = I * ((1.0 - self.lambda) - s * (1.0 + self.lambda)) / (s - 1.0);
        self.t0 + tau.re
    }

    /// Same trace and orientation, compared by `(lambda, omega)` only.
    pub fn same_trace(&self, other: &Horocycle, tol: f64) -> bool {
        (self.lambda - other.lambda).abs() <= tol && (self.omega - other.omega).norm() <= tol
    }

    /// Image under an orientation-preserving isometry, keeping the time labels.
    pub fn transformed(&self, t: &Mobius) -> Horocycle {
        let v = t.push(&self.tangent(self.t0));
        horo_from_tangent_unchecked(&v, self.t0)
    }
}

/// The unit-speed oriented horocycle visiting `v.base` at time `t` with velocity `v.dir`.
pub fn horo_from_tangent(v: &TangentVec, t: f64) -> Result<Horocycle> {
    let norm = hyp_norm(v);
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotUnitTangent { norm });
    }
    Ok(horo_from_tangent_unchecked(v, t))
}

fn horo_from_tangent_unchecked(v: &TangentVec, t: f64) -> Horocycle {
    let z = v.base.z();
    let vhat = v.dir * (2.0 / v.base.conformal_gap());
    let q = (vhat - I * z).norm_sqr();
    let lambda = v.base.conformal_gap() / q;
    let t0 = t - 2.0 * (vhat * z.conj()).re / q;
    let omega = (z + I * vhat) / (ONE + I * z.conj() * vhat);
    Horocycle { lambda, t0, omega: omega / omega.norm() }
}

/// Image of `y` after moving `x` to the origin, and the horocyclic chord
/// length `2 sinh(d/2)` between them.
#[inline]
fn normalized_chord(x: Complex64, y: Complex64) -> (Complex64, f64) {
    let w = (y - x) / (ONE - x.conj() * y);
    let r2 = w.norm_sqr();
    (w, 2.0 * (r2 / (1.0 - r2)).sqrt())
}

/// Point at time `s * ty` of the oriented horocycle from `x` to `y`
/// (`ty` its length), for any `s >= 0`.
#[inline]
pub(crate) fn along_chord(x: Complex64, y: Complex64, s: f64) -> Complex64 {
    // Same as normalized_chord, unrolled: this is the inner loop of every sum.
    let num = y - x;
    let den = ONE - x.conj() * y;
    let (n2, d2) = (num.norm_sqr(), den.norm_sqr());
    if n2 == 0.0 {
        return x;
    }
    let ty = 2.0 * (n2 / (d2 - n2)).sqrt();
    let w = num * den.conj() / d2;
    // With x at the origin the horocycle is omega t / (t + 2i), omega = w (ty + 2i) / ty,
    // so q = w s (ty + 2i) / (s ty + 2i).
    let st = s * ty;
    let c = Complex64::new(s * (st * ty + 4.0), 2.0 * s * (st - ty)) / (st * st + 4.0);
    let q = w * c;
    (q + x) / (x.conj() * q + 1.0)
}

/// The unique oriented horocycle from `x` to `y` with its visiting times.
///
/// `tx = 0` and `ty = 2 sinh(d(x, y) / 2)`.
pub fn horo_between(x: DiscPoint, y: DiscPoint) -> Result<(Horocycle, f64, f64)> {
    let (w, ty) = normalized_chord(x.z(), y.z());
    if ty == 0.0 {
        return Err(Error::DegeneratePair);
    }
    let omega = w * Complex64::new(ty, 2.0) / ty;
    // velocity at the origin of omega t / (t + 2i) is -i omega / 2; push it back to x
    let to_x = Mobius::from_point(x, 0.0);
    let v0 = TangentVec::new(DiscPoint::ORIGIN, -I * omega * 0.5);
    let h = horo_from_tangent_unchecked(&to_x.push(&v0), 0.0);
    Ok((h, 0.0, ty))
}

/// The point `[x:y]_lambda`: fraction `lambda` of the way along the oriented
/// horocycle from `x` to `y`. A degenerate pair maps to itself.
#[inline]
pub fn horo_point(x: DiscPoint, y: DiscPoint, lambda: f64) -> DiscPoint {
    DiscPoint::trusted(along_chord(x.z(), y.z(), lambda))
}

/// `[x:y]_lambda` for the opposite orientation (complex conjugation swaps them).
#[inline]
pub fn horo_point_mirror(x: DiscPoint, y: DiscPoint, lambda: f64) -> DiscPoint {
    DiscPoint::trusted(along_chord(x.z().conj(), y.z().conj(), lambda).conj())
}

/// Length `2 sinh(d/2)` of the horocycle arc joining `x` and `y`.
pub fn chord_length(x: DiscPoint, y: DiscPoint) -> f64 {
    normalized_chord(x.z(), y.z()).1
}

/// Horocyclic dilation of `p` about `origin` by factor `t > 0`.
pub fn horo_dilate(origin: DiscPoint, p: DiscPoint, t: f64) -> Result<DiscPoint> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("dilation factor must be > 0, got {t}")));
    }
    DiscPoint::new(along_chord(origin.z(), p.z(), t))
}

/// Horocyclic polar coordinates about `origin`: the point at time `r` of the
/// unit-speed oriented horocycle leaving `origin` in direction `theta`.
pub fn horo_polar(origin: DiscPoint, r: f64, theta: f64) -> DiscPoint {
    let local = Complex64::from_polar(1.0, theta) * r / Complex64::new(r, 2.0);
    Mobius::from_point(origin, 0.0).apply(DiscPoint::trusted(local))
}

/// Signed geodesic curvature, for the hyperbolic metric, of a curve with
/// model-coordinate position, velocity and acceleration `(z, dz, ddz)`.
pub fn signed_geodesic_curvature(z: Complex64, dz: Complex64, ddz: Complex64) -> f64 {
    let speed = dz.norm();
    let euclid = (dz.conj() * ddz).im / (speed * speed * speed);
    let gap = 1.0 - z.norm_sqr();
    // log conformal factor sigma = log(2 / (1 - |z|^2)) has gradient 2 z / (1 - |z|^2)
    let grad = z * (2.0 / gap);
    let normal = I * dz / speed;
    let dn = (normal.conj() * grad).re;
    0.5 * gap * (euclid - dn)
}
