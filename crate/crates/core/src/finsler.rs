//! The Randers metric on the disc whose geodesics are oriented horocycles.
//!
//! `Phi(z; w) = 2 (|w| + u y - x v) / (1 - |z|^2)` for `z = x + iy`, `w = u + iv`,
//! i.e. the Poincare norm minus the 1-form `eta = 2 (x dy - y dx) / (1 - |z|^2)`.
//! Along a horocycle, Phi-arclength equals the Euclidean angle swept about the
//! circle's center, which gives [`dist_phi`] in closed form.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::horocycle::horo_between;
use crate::hypdisc::{area_density, DiscPoint};

/// Default segment count for polyline quadrature.
pub const DEFAULT_SEGMENTS: usize = 4096;

/// Largest model radius competitor curves may reach.
const COMPETITOR_RADIUS: f64 = 0.999;

/// A tangent vector paired with its base point, for evaluating `Phi`.
#[derive(Debug, Clone, Copy)]
pub struct FinslerEval {
    pub point: DiscPoint,
    pub vector: Complex64,
}

impl FinslerEval {
    pub fn value(&self) -> f64 {
        phi(self.point, self.vector)
    }

    /// Riemannian part `sqrt(g(w, w))`.
    pub fn riemannian(&self) -> f64 {
        2.0 * self.vector.norm() / self.point.conformal_gap()
    }

    pub fn eta(&self) -> f64 {
        eta(self.point, self.vector)
    }
}

/// The 1-form `eta = 2 (x dy - y dx) / (1 - |z|^2)` applied to `w`.
#[inline]
pub fn eta(p: DiscPoint, w: Complex64) -> f64 {
    2.0 * (p.z().conj() * w).im / p.conformal_gap()
}

/// `Phi(p; w)`.
#[inline]
pub fn phi(p: DiscPoint, w: Complex64) -> f64 {
    let z = p.z();
    2.0 * (w.norm() - (z.conj() * w).im) / (1.0 - z.norm_sqr())
}

/// Phi-length of a polyline by the midpoint rule on each segment.
pub fn curve_length_phi(polyline: &[DiscPoint]) -> Result<f64> {
    if polyline.len() < 2 {
        return Err(Error::ShortPolyline(polyline.len()));
    }
    Ok(polyline
        .windows(2)
        .map(|seg| {
            let (a, b) = (seg[0].z(), seg[1].z());
            phi(DiscPoint::trusted(0.5 * (a + b)), b - a)
        })
        .sum())
}

/// Euclidean center of the oriented horocycle from `x` to `y` and the
/// counterclockwise angle it sweeps, in `[0, 2 pi)`.
fn swept_angle(x: DiscPoint, y: DiscPoint) -> Option<(Complex64, f64, f64)> {
    let (h, _, _) = horo_between(x, y).ok()?;
    let (c, r) = h.euclid_center();
    let sweep = ((y.z() - c) / (x.z() - c)).arg().rem_euclid(TAU);
    Some((c, r, sweep))
}

/// Phi-distance from `x` to `y`: the Euclidean angle swept counterclockwise
/// about the center of the oriented horocycle from `x` to `y`.
pub fn dist_phi(x: DiscPoint, y: DiscPoint) -> f64 {
    swept_angle(x, y).map_or(0.0, |(_, _, sweep)| sweep)
}

/// Points of the horocycle arc from `x` to `y`, uniformly spaced in Phi-arclength.
pub fn horo_arc_polyline(x: DiscPoint, y: DiscPoint, segments: usize) -> Vec<DiscPoint> {
    let Some((c, r, sweep)) = swept_angle(x, y) else {
        return vec![x, y];
    };
    let start = (x.z() - c).arg();
    let mut pts: Vec<DiscPoint> =
        (0..=segments).map(|k| DiscPoint::trusted(c + Complex64::from_polar(r, start + sweep * k as f64 / segments as f64))).collect();
    pts[0] = x;
    pts[segments] = y;
    pts
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimalityReport {
    pub dist: f64,
    pub min_competitor_length: f64,
    /// `min_competitor_length - dist`.
    pub margin: f64,
    pub trials: usize,
    /// Competitors shorter than `dist - tolerance`.
    pub violations: usize,
    pub tolerance: f64,
}

/// Random smooth perturbation of the horocycle arc with fixed endpoints,
/// bump amplitude at most `amplitude` in model coordinates.
pub fn perturbed_arc(x: DiscPoint, y: DiscPoint, amplitude: f64, segments: usize, rng: &mut impl Rng) -> Vec<DiscPoint> {
    let base = horo_arc_polyline(x, y, segments);
    let modes = 3;
    let coeffs: Vec<Complex64> =
        (0..modes).map(|_| Complex64::from_polar(amplitude / modes as f64 * rng.random::<f64>(), rng.random::<f64>() * TAU)).collect();
    let bump = |s: f64| -> Complex64 { coeffs.iter().enumerate().map(|(k, c)| c * (PI * (k + 1) as f64 * s).sin()).sum() };
    // shrink the bump until the curve stays inside the disc
    let mut scale = 1.0;
    loop {
        let pts: Vec<Complex64> = base.iter().enumerate().map(|(k, p)| p.z() + bump(k as f64 / segments as f64) * scale).collect();
        if pts.iter().all(|z| z.norm() < COMPETITOR_RADIUS) || scale < 1e-6 {
            let mut out: Vec<DiscPoint> = pts.into_iter().map(DiscPoint::trusted).collect();
            out[0] = x;
            out[segments] = y;
            return out;
        }
        scale *= 0.5;
    }
}

/// Compares `dist_phi(x, y)` against `trials` random competitor curves from
/// `x` to `y`.
pub fn check_minimality(x: DiscPoint, y: DiscPoint, trials: usize, seed: u64) -> MinimalityReport {
    check_minimality_with(x, y, trials, seed, 0.1, DEFAULT_SEGMENTS, 1e-4)
}

pub fn check_minimality_with(
    x: DiscPoint,
    y: DiscPoint,
    trials: usize,
    seed: u64,
    amplitude: f64,
    segments: usize,
    tolerance: f64,
) -> MinimalityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = dist_phi(x, y);
    let mut min_len = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..trials {
        let curve = perturbed_arc(x, y, amplitude, segments, &mut rng);
        let len = curve_length_phi(&curve).expect("competitor has >= 2 points");
        if len < dist - tolerance {
            violations += 1;
        }
        min_len = min_len.min(len);
    }
    MinimalityReport { dist, min_competitor_length: min_len, margin: min_len - dist, trials, violations, tolerance }
}

/// Straight Euclidean segment from `x` to `y` as a polyline.
pub fn straight_polyline(x: DiscPoint, y: DiscPoint, segments: usize) -> Vec<DiscPoint> {
    (0..=segments).map(|k| DiscPoint::trusted(x.z() + (y.z() - x.z()) * (k as f64 / segments as f64))).collect()
}

/// Deviation of a central-difference estimate of `d eta` at `p` from the
/// hyperbolic area density.
pub fn check_deta(p: DiscPoint, h: f64) -> f64 {
    // eta = P dx + Q dy, d eta = (dQ/dx - dP/dy) dx ^ dy
    let coeff_p = |x: f64, y: f64| -2.0 * y / (1.0 - x * x - y * y);
    let coeff_q = |x: f64, y: f64| 2.0 * x / (1.0 - x * x - y * y);
    let (x, y) = (p.x(), p.y());
    let dq_dx = (coeff_q(x + h, y) - coeff_q(x - h, y)) / (2.0 * h);
    let dp_dy = (coeff_p(x, y + h) - coeff_p(x, y - h)) / (2.0 * h);
    (dq_dx - dp_dy - area_density(p)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::horocycle::Horocycle;

    fn random_point(rng: &mut ChaCha8Rng, rmax: f64) -> DiscPoint {
        let r = rmax * rng.random::<f64>().sqrt();
        DiscPoint::new(Complex64::from_polar(r, rng.random::<f64>() * TAU)).unwrap()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi(DiscPoint::ORIGIN, Complex64::new(1.0, 0.0)), 2.0);
        // the circle 1 - r + r e^{it} has Phi-speed 1 away from its tangency point t = 0
        for r in [0.1, 0.4, 0.75, 0.99] {
            for t in [0.3, 1.0, PI, -2.0] {
                let p = DiscPoint::from_xy(1.0 - r + r * f64::cos(t), r * f64::sin(t)).unwrap();
                let w = Complex64::new(-r * f64::sin(t), r * f64::cos(t));
                assert!((phi(p, w) - 1.0).abs() < 1e-12, "r={r} t={t}");
            }
        }
        let p = DiscPoint::from_xy(0.0, 0.5).unwrap();
        let (fwd, back) = (phi(p, Complex64::new(1.0, 0.0)), phi(p, Complex64::new(-1.0, 0.0)));
        assert!((fwd - 4.0).abs() < 1e-12 && (back - 4.0 / 3.0).abs() < 1e-12);
        let e = FinslerEval { point: p, vector: Complex64::new(0.3, -0.2) };
        assert!((e.value() - (e.riemannian() - e.eta())).abs() < 1e-14);
    }

    #[test]
    fn phi_is_homogeneous_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = random_point(&mut rng, 0.99);
            let w = Complex64::from_polar(rng.random::<f64>() + 1e-3, rng.random::<f64>() * TAU);
            let t = rng.random::<f64>() * 10.0;
            assert!((phi(p, w * t) - t * phi(p, w)).abs() <= 1e-12 * (1.0 + t * phi(p, w)));
            assert!(phi(p, w) > 0.0);
        }
        assert_eq!(phi(DiscPoint::from_xy(0.2, 0.1).unwrap(), Complex64::new(0.0, 0.0)), 0.0);
    }

    #[test]
    fn curve_length_basics() {
        assert!(matches!(curve_length_phi(&[DiscPoint::ORIGIN]), Err(Error::ShortPolyline(1))));
        let p = DiscPoint::from_xy(0.3, 0.1).unwrap();
        assert_eq!(curve_length_phi(&[p, p, p]).unwrap(), 0.0);
        // additivity under concatenation
        let pts = straight_polyline(DiscPoint::ORIGIN, DiscPoint::from_xy(0.5, 0.4).unwrap(), 100);
        let whole = curve_length_phi(&pts).unwrap();
        let split = curve_length_phi(&pts[..51]).unwrap() + curve_length_phi(&pts[50..]).unwrap();
        assert!((whole - split).abs() < 1e-13);
    }

    #[test]
    fn full_horocycle_has_length_two_pi() {
        for r in [0.1, 0.5, 0.9] {
            // the circle touches the boundary at t = 0; skip half a step on each side
            let n = 10_000;
            let gap = PI / n as f64;
            let pts: Vec<_> = (0..=n)
                .map(|k| {
                    let t = gap + (TAU - 2.0 * gap) * k as f64 / n as f64;
                    DiscPoint::new(Complex64::new(1.0 - r + r * t.cos(), r * t.sin())).unwrap()
                })
                .collect();
            let len = curve_length_phi(&pts).unwrap();
            assert!((len - (TAU - 2.0 * gap)).abs() < 1e-3, "r={r}: {len}");
        }
    }

    #[test]
    fn reversed_length_differs() {
        let x = DiscPoint::from_xy(-0.3, 0.2).unwrap();
        let y = DiscPoint::from_xy(0.4, 0.1).unwrap();
        let mut arc = horo_arc_polyline(x, y, 2000);
        let fwd = curve_length_phi(&arc).unwrap();
        arc.reverse();
        let back = curve_length_phi(&arc).unwrap();
        assert!((fwd - back).abs() > 0.1, "{fwd} vs {back}");
    }

    #[test]
    fn dist_phi_example() {
        let y = DiscPoint::from_xy(0.5, -0.5).unwrap();
        assert!((dist_phi(DiscPoint::ORIGIN, y) - PI / 2.0).abs() < 1e-12);
        let arc = horo_arc_polyline(DiscPoint::ORIGIN, y, 10_000);
        assert!((curve_length_phi(&arc).unwrap() - PI / 2.0).abs() < 1e-6);
        assert_eq!(dist_phi(y, y), 0.0);
    }

    #[test]
    fn dist_phi_matches_arc_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (x, y) = (random_point(&mut rng, 0.9), random_point(&mut rng, 0.9));
            let arc = horo_arc_polyline(x, y, 10_000);
            let quad = curve_length_phi(&arc).unwrap();
            assert!((quad - dist_phi(x, y)).abs() < 1e-6, "{quad} vs {}", dist_phi(x, y));
        }
    }

    #[test]
    fn dist_phi_triangle_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (x, y, z) = (random_point(&mut rng, 0.95), random_point(&mut rng, 0.95), random_point(&mut rng, 0.95));
            assert!(dist_phi(x, z) <= dist_phi(x, y) + dist_phi(y, z) + 1e-8);
            let (a, b) = (dist_phi(x, y), dist_phi(y, x));
            assert!(a + b > 0.0 && a < TAU && b < TAU);
        }
    }

    #[test]
    fn minimality_examples() {
        let half = DiscPoint::from_xy(0.5, 0.0).unwrap();
        let chord = curve_length_phi(&straight_polyline(DiscPoint::ORIGIN, half, 4096)).unwrap();
        assert!(chord >= dist_phi(DiscPoint::ORIGIN, half));

        let x = DiscPoint::from_xy(0.1, 0.2).unwrap();
        let y = DiscPoint::from_xy(-0.3, 0.5).unwrap();
        let flat = check_minimality_with(x, y, 3, 1, 0.0, 4096, 1e-4);
        assert!(flat.margin.abs() < 1e-6, "{flat:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..10 {
            let (x, y) = (random_point(&mut rng, 0.8), random_point(&mut rng, 0.8));
            let rep = check_minimality(x, y, 100, k);
            assert_eq!(rep.violations, 0, "{rep:?}");
            assert!(rep.margin > -1e-4);
        }
    }

    #[test]
    fn deta_is_the_area_form() {
        assert!(check_deta(DiscPoint::ORIGIN, 1e-4) < 1e-6);
        let p = DiscPoint::from_xy(0.5, 0.0).unwrap();
        assert!(check_deta(p, 1e-4) < 1e-5);
        let q = DiscPoint::from_xy(0.3, -0.4).unwrap();
        let ratio = check_deta(q, 1e-2) / check_deta(q, 5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn horocycle_phi_speed_is_angular_speed() {
        // reparametrizing a unit-speed horocycle by Phi-arclength gives Phi-speed 1
        let h = Horocycle::from_angle(0.6, 0.3, 2.0).unwrap();
        let (c, _) = h.euclid_center();
        let n = 4000;
        let ts: Vec<f64> = (0..=n).map(|k| -2.0 + 4.0 * k as f64 / n as f64).collect();
        let mut s = vec![0.0];
        for w in ts.windows(2) {
            let tm = 0.5 * (w[0] + w[1]);
            s.push(s.last().unwrap() + phi(h.eval(tm), h.velocity(tm)) * (w[1] - w[0]));
        }
        for k in (100..n).step_by(350) {
            let ang = ((h.eval_z(ts[k]) - c) / (h.eval_z(ts[0]) - c)).arg().rem_euclid(TAU);
            assert!((s[k] - ang).abs() < 1e-5, "{} vs {ang}", s[k]);
            let ds = (s[k + 1] - s[k - 1]) / (ts[k + 1] - ts[k - 1]);
            let dang = phi(h.eval(ts[k]), h.velocity(ts[k]));
            assert!((ds / dang - 1.0).abs() < 1e-4);
        }
    }
}
