//! Rasterized regions of the disc, hyperbolic area, and Minkowski-type sums.
//!
//! Regions live on a square lattice over the fixed window `[-0.999, 0.999]^2`.
//! A cell is occupied iff its center belongs to the set; each occupied cell
//! carries the hyperbolic area `area_density(center) * h^2`.
//!
//! Sums are computed by forward-mapping sample pairs and marking the cells
//! they hit, so the output is an inner approximation of the true set. Since
//! `b -> [a:b]_lambda` is injective for fixed `a`, every point of `[A:B]_lambda`
//! (for compact `A`, `B`) is already the image of a pair in
//! `(boundary A x B) u (A x boundary B)`; large inputs use only those pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horocycle::along_chord;
use crate::hypdisc::{area_density, disc_area, hyp_dist, DiscPoint, Mobius, BOUNDARY_GUARD};

/// Half-width of the square grid window.
pub const WINDOW: f64 = 0.999;

/// Default cap on the number of sample pairs a sum may evaluate.
pub const DEFAULT_PAIR_CAP: usize = 40_000_000;

pub const MODEL_NAME: &str = "poincare-disc";

/// Square lattice of spacing `h` covering the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    h: f64,
    n: usize,
}

impl Grid {
    pub fn new(h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0 && h <= 2.0 * WINDOW) {
            return Err(Error::InvalidParameter(format!("grid spacing must be in (0, {}], got {h}", 2.0 * WINDOW)));
        }
        let n = (2.0 * WINDOW / h).ceil() as usize;
        if n > 1 << 15 {
            return Err(Error::InvalidParameter(format!("grid spacing {h} is too fine")));
        }
        Ok(Self { h, n })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Cells per side.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn center(&self, idx: usize) -> Complex64 {
        let (i, j) = (idx % self.n, idx / self.n);
        Complex64::new(-WINDOW + (i as f64 + 0.5) * self.h, -WINDOW + (j as f64 + 0.5) * self.h)
    }

    /// Cell containing `z`, or `None` outside the window.
    #[inline]
    pub fn cell_of(&self, z: Complex64) -> Option<usize> {
        let fx = (z.re + WINDOW) / self.h;
        let fy = (z.im + WINDOW) / self.h;
        if !(fx >= 0.0 && fy >= 0.0 && z.re <= WINDOW && z.im <= WINDOW) {
            return None;
        }
        let (i, j) = ((fx as usize).min(self.n - 1), (fy as usize).min(self.n - 1));
        Some(j * self.n + i)
    }

    /// Hyperbolic area of a cell whose center lies in the disc.
    #[inline]
    pub fn cell_area(&self, idx: usize) -> f64 {
        area_density(DiscPoint::trusted(self.center(idx))) * self.h * self.h
    }

    fn center_in_disc(&self, idx: usize) -> bool {
        self.center(idx).norm() < 1.0 - BOUNDARY_GUARD
    }

    /// Inclusive cell index ranges covering the box `[lo, hi]`, clipped to the grid.
    fn index_box(&self, lo: Complex64, hi: Complex64) -> Option<((usize, usize), (usize, usize))> {
        let clip = |v: f64| ((v + WINDOW) / self.h).floor();
        let (i0, j0) = (clip(lo.re).max(0.0), clip(lo.im).max(0.0));
        let (i1, j1) = (clip(hi.re).min(self.n as f64 - 1.0), clip(hi.im).min(self.n as f64 - 1.0));
        if i0 > i1 || j0 > j1 {
            return None;
        }
        Some(((i0 as usize, i1 as usize), (j0 as usize, j1 as usize)))
    }
}

/// A set of occupied cells on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    grid: Grid,
    cells: Vec<u32>,
}

impl Region {
    pub fn empty(grid: Grid) -> Self {
        Self { grid, cells: Vec::new() }
    }

    /// Builds a region from cell indices; every cell center must lie in the disc.
    pub fn from_cells(grid: Grid, cells: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v = Vec::new();
        for idx in cells {
            if idx >= grid.len() || !grid.center_in_disc(idx) {
                let c = if idx < grid.len() { grid.center(idx) } else { Complex64::new(f64::NAN, f64::NAN) };
                return Err(Error::OutsideWindow { re: c.re, im: c.im });
            }
            v.push(idx as u32);
        }
        v.sort_unstable();
        v.dedup();
        Ok(Self { grid, cells: v })
    }

    /// The single cell containing `p`.
    pub fn single_cell(grid: Grid, p: DiscPoint) -> Result<Self> {
        let idx = grid.cell_of(p.z()).ok_or(Error::OutsideWindow { re: p.x(), im: p.y() })?;
        Self::from_cells(grid, [idx])
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains_cell(&self, idx: usize) -> bool {
        self.cells.binary_search(&(idx as u32)).is_ok()
    }

    /// Whether the cell containing `z` is occupied.
    pub fn contains(&self, z: Complex64) -> bool {
        self.grid.cell_of(z).is_some_and(|i| self.contains_cell(i))
    }

    pub fn area(&self) -> f64 {
        self.cells.iter().map(|&c| self.grid.cell_area(c as usize)).sum()
    }

    /// Occupied cell centers with their hyperbolic cell areas.
    pub fn samples(&self) -> Vec<(DiscPoint, f64)> {
        self.cells.iter().map(|&c| (DiscPoint::trusted(self.grid.center(c as usize)), self.grid.cell_area(c as usize))).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.grid.len()];
        for &c in &self.cells {
            m[c as usize] = true;
        }
        m
    }

    /// Occupied cells with an unoccupied 8-neighbour.
    pub fn boundary_cells(&self) -> Vec<u32> {
        let mask = self.mask();
        let n = self.grid.n as i64;
        self.cells
            .iter()
            .copied()
            .filter(|&c| {
                let (i, j) = (c as i64 % n, c as i64 / n);
                (-1..=1).any(|dj| {
                    (-1..=1).any(|di| {
                        let (x, y) = (i + di, j + dj);
                        x < 0 || y < 0 || x >= n || y >= n || !mask[(y * n + x) as usize]
                    })
                })
            })
            .collect()
    }

    /// Hyperbolic radius of an origin-centered disc containing every cell center.
    pub fn bounding_radius(&self) -> f64 {
        self.cells.iter().map(|&c| hyp_dist(DiscPoint::ORIGIN, DiscPoint::trusted(self.grid.center(c as usize)))).fold(0.0, f64::max)
    }

    fn same_grid(&self, other: &Region) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::InvalidParameter("regions live on different grids".into()));
        }
        Ok(())
    }

    pub fn union(&self, other: &Region) -> Result<Region> {
        self.same_grid(other)?;
        let mut cells: Vec<u32> = self.cells.iter().chain(&other.cells).copied().collect();
        cells.sort_unstable();
        cells.dedup();
        Ok(Region { grid: self.grid, cells })
    }

    pub fn intersection(&self, other: &Region) -> Result<Region> {
        self.same_grid(other)?;
        let cells = self.cells.iter().copied().filter(|&c| other.contains_cell(c as usize)).collect();
        Ok(Region { grid: self.grid, cells })
    }

    pub fn is_subset(&self, other: &Region) -> bool {
        self.grid == other.grid && self.cells.iter().all(|&c| other.contains_cell(c as usize))
    }

    /// Sample points: `k x k` sub-cell points per cell (`k` odd keeps the center).
    fn points_of(&self, cells: &[u32], k: usize) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(cells.len() * k * k);
        let offsets: Vec<f64> = (0..k).map(|a| (a as f64 - (k as f64 - 1.0) / 2.0) / k as f64 * self.grid.h).collect();
        for &c in cells {
            let z = self.grid.center(c as usize);
            for &dy in &offsets {
                for &dx in &offsets {
                    out.push(z + Complex64::new(dx, dy));
                }
            }
        }
        out
    }

    pub fn to_rle(&self) -> RleMask {
        let n = self.grid.n as u32;
        let mut runs: Vec<[u32; 3]> = Vec::new();
        for &c in &self.cells {
            let (i, j) = (c % n, c / n);
            match runs.last_mut() {
                Some(r) if r[0] == j && r[1] + r[2] == i => r[2] += 1,
                _ => runs.push([j, i, 1]),
            }
        }
        RleMask { h: self.grid.h, n: self.grid.n, window: WINDOW, runs }
    }

    pub fn from_rle(mask: &RleMask) -> Result<Region> {
        let grid = Grid::new(mask.h)?;
        if grid.n != mask.n || (mask.window - WINDOW).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mask grid (h = {}, n = {}, window = {}) does not match the fixed window",
                mask.h, mask.n, mask.window
            )));
        }
        let n = grid.n;
        let mut cells = Vec::new();
        for &[row, start, len] in &mask.runs {
            let (row, start, len) = (row as usize, start as usize, len as usize);
            if row >= n || start + len > n {
                return Err(Error::InvalidParameter(format!("run [{row}, {start}, {len}] leaves the grid")));
            }
            cells.extend((start..start + len).map(|i| row * n + i));
        }
        Region::from_cells(grid, cells)
    }

    pub fn export(&self) -> RegionExport {
        RegionExport { mask: self.to_rle(), cells: self.len(), area: self.area() }
    }
}

/// Run-length encoded occupancy: each run is `[row, first column, length]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    pub h: f64,
    pub n: usize,
    pub window: f64,
    pub runs: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionExport {
    #[serde(flatten)]
    pub mask: RleMask,
    pub cells: usize,
    pub area: f64,
}

/// A hyperbolic disc: model-coordinate center and hyperbolic radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl DiscSpec {
    pub fn center(&self) -> Result<DiscPoint> {
        DiscPoint::from_xy(self.cx, self.cy)
    }

    /// Euclidean center and radius of the disc in the model.
    pub fn euclidean(&self) -> Result<(Complex64, f64)> {
        let c = self.center()?.z();
        let rho = (0.5 * self.r).tanh();
        let den = 1.0 - c.norm_sqr() * rho * rho;
        Ok((c * ((1.0 - rho * rho) / den), rho * (1.0 - c.norm_sqr()) / den))
    }
}

fn default_model() -> String {
    MODEL_NAME.to_string()
}

/// Input description of a region: a union of hyperbolic discs and single
/// points, or an explicit mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discs: Vec<DiscSpec>,
    /// Each point contributes the single cell containing it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_h: Option<f64>,
}

impl RegionSpec {
    pub fn disc(cx: f64, cy: f64, r: f64) -> Self {
        Self::discs(vec![DiscSpec { cx, cy, r }])
    }

    pub fn discs(discs: Vec<DiscSpec>) -> Self {
        Self { model: default_model(), discs, points: Vec::new(), mask: None, grid_h: None }
    }

    pub fn point(p: DiscPoint) -> Self {
        Self { model: default_model(), discs: Vec::new(), points: vec![[p.x(), p.y()]], mask: None, grid_h: None }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: RegionSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model != MODEL_NAME {
            return Err(Error::InvalidParameter(format!("unsupported model {:?}, expected {MODEL_NAME:?}", self.model)));
        }
        if self.discs.is_empty() && self.points.is_empty() && self.mask.is_none() {
            return Err(Error::InvalidParameter("region spec has no discs, points or mask".into()));
        }
        for d in &self.discs {
            if !(d.r > 0.0 && d.r.is_finite()) {
                return Err(Error::InvalidParameter(format!("disc radius must be > 0, got {}", d.r)));
            }
            d.center()?;
        }
        for p in &self.points {
            DiscPoint::from_xy(p[0], p[1])?;
        }
        if let Some(h) = self.grid_h {
            Grid::new(h)?;
        }
        Ok(())
    }

    /// Membership of a point in the union of discs (points and masks excluded).
    pub fn disc_contains(&self, z: DiscPoint) -> bool {
        self.discs.iter().any(|d| d.center().is_ok_and(|c| hyp_dist(c, z) <= d.r))
    }

    /// Image under an isometry. Masks cannot be transformed exactly.
    pub fn transformed(&self, t: &Mobius) -> Result<Self> {
        if self.mask.is_some() {
            return Err(Error::InvalidParameter("mask regions cannot be transformed".into()));
        }
        let mut out = self.clone();
        for d in &mut out.discs {
            let c = t.apply(d.center()?);
            (d.cx, d.cy) = (c.x(), c.y());
        }
        for p in &mut out.points {
            let q = t.apply(DiscPoint::from_xy(p[0], p[1])?);
            *p = [q.x(), q.y()];
        }
        Ok(out)
    }

    /// Union of 1 to 4 discs with centers within hyperbolic distance 2 of the
    /// origin and radii in `[0.2, 1.2]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let k = rng.random_range(1..=4);
        let discs = (0..k)
            .map(|_| {
                let dist = 2.0 * rng.random::<f64>();
                let angle = std::f64::consts::TAU * rng.random::<f64>();
                let r = rng.random_range(0.2..=1.2);
                let c = Complex64::from_polar((0.5 * dist).tanh(), angle);
                DiscSpec { cx: c.re, cy: c.im, r }
            })
            .collect();
        Self::discs(discs)
    }

    /// Exact hyperbolic area when the spec is a single disc.
    pub fn exact_area(&self) -> Option<f64> {
        match (self.discs.as_slice(), self.points.is_empty(), &self.mask) {
            ([d], true, None) => Some(disc_area(d.r)),
            _ => None,
        }
    }

    pub fn rasterize(&self, h: f64) -> Result<Region> {
        rasterize(self, h)
    }
}

/// Marks every cell whose center lies in the spec's set.
pub fn rasterize(spec: &RegionSpec, h: f64) -> Result<Region> {
    spec.validate()?;
    let grid = Grid::new(h)?;
    let mut cells: Vec<usize> = Vec::new();
    for d in &spec.discs {
        let c = d.center()?;
        let (ec, er) = d.euclidean()?;
        let pad = Complex64::new(er + h, er + h);
        let Some(((i0, i1), (j0, j1))) = grid.index_box(ec - pad, ec + pad) else {
            continue;
        };
        for j in j0..=j1 {
            for i in i0..=i1 {
                let idx = j * grid.n + i;
                if grid.center_in_disc(idx) && hyp_dist(c, DiscPoint::trusted(grid.center(idx))) <= d.r {
                    cells.push(idx);
                }
            }
        }
    }
    for p in &spec.points {
        cells.extend(grid.cell_of(Complex64::new(p[0], p[1])).filter(|&i| grid.center_in_disc(i)));
    }
    let mut region = Region::from_cells(grid, cells)?;
    if let Some(mask) = &spec.mask {
        let m = Region::from_rle(mask)?;
        if m.grid != grid {
            return Err(Error::InvalidParameter(format!("mask spacing {} differs from requested {h}", mask.h)));
        }
        region = region.union(&m)?;
    }
    if region.is_empty() {
        return Err(Error::EmptyRaster);
    }
    Ok(region)
}

pub fn area(r: &Region) -> f64 {
    r.area()
}

/// Which curve family joins the pairs of a sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumKind {
    /// Counterclockwise oriented horocycles.
    Horo,
    /// Both orientations.
    HoroUnoriented,
    /// Hyperbolic geodesics.
    Geodesic,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SumOptions {
    /// Maximum number of sample pairs to evaluate.
    pub pair_cap: usize,
    /// Seed for interior subsampling when the cap binds.
    pub seed: u64,
    /// Sub-samples per cell side (odd values keep the cell center).
    pub supersample: usize,
}

impl Default for SumOptions {
    fn default() -> Self {
        Self { pair_cap: DEFAULT_PAIR_CAP, seed: 0, supersample: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct SumOutput {
    pub region: Region,
    pub pairs_evaluated: u64,
    /// True when only boundary-driven pairs were used.
    pub boundary_driven: bool,
    /// True when interior samples were dropped to respect the pair cap.
    pub subsampled: bool,
}

#[inline]
fn horo_mirror_z(x: Complex64, y: Complex64, lambda: f64) -> Complex64 {
    along_chord(x.conj(), y.conj(), lambda).conj()
}

#[inline]
fn geodesic_z(x: Complex64, y: Complex64, lambda: f64) -> Complex64 {
    let w = (y - x) / (Complex64::new(1.0, 0.0) - x.conj() * y);
    let r = w.norm();
    if r == 0.0 {
        return x;
    }
    let q = w * ((lambda * r.atanh()).tanh() / r);
    (q + x) / (x.conj() * q + 1.0)
}

/// Output cells hit by a sum. Each rayon job fills its own copy and the
/// copies are OR-ed together, so the inner loop has no atomics.
struct HitMask {
    grid: Grid,
    inv_h: f64,
    bits: Vec<u64>,
}

impl HitMask {
    fn new(grid: Grid) -> Self {
        Self { grid, inv_h: 1.0 / grid.h, bits: vec![0; grid.len().div_ceil(64)] }
    }

    #[inline]
    fn hit(&mut self, z: Complex64) -> Result<()> {
        let (fx, fy) = ((z.re + WINDOW) * self.inv_h, (z.im + WINDOW) * self.inv_h);
        if !(fx >= 0.0 && fy >= 0.0 && z.re <= WINDOW && z.im <= WINDOW) {
            return Err(Error::OutsideWindow { re: z.re, im: z.im });
        }
        let n = self.grid.n;
        let idx = (fy as usize).min(n - 1) * n + (fx as usize).min(n - 1);
        self.bits[idx / 64] |= 1 << (idx % 64);
        Ok(())
    }

    fn or(mut self, other: HitMask) -> HitMask {
        self.bits.iter_mut().zip(other.bits).for_each(|(a, b)| *a |= b);
        self
    }

    /// Fails if a hit cell has its center outside the disc.
    fn into_region(self) -> Result<Region> {
        let mut cells = Vec::new();
        for (w, word) in self.bits.into_iter().enumerate() {
            let mut v = word;
            while v != 0 {
                let b = v.trailing_zeros() as usize;
                let idx = w * 64 + b;
                if !self.grid.center_in_disc(idx) {
                    let z = self.grid.center(idx);
                    return Err(Error::OutsideWindow { re: z.re, im: z.im });
                }
                cells.push(idx as u32);
                v &= v - 1;
            }
        }
        Ok(Region { grid: self.grid, cells })
    }
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("lambda must be in (0, 1), got {lambda}")))
    }
}

/// Keeps `keep` of `cells` chosen uniformly, preserving order.
fn subsample(cells: &[u32], keep: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if keep >= cells.len() {
        return cells.to_vec();
    }
    let mut picked = index::sample(rng, cells.len(), keep).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| cells[i]).collect()
}

/// The general sum: marks the output cell of the `lambda`-point of each
/// retained sample pair.
pub fn minkowski_with(a: &Region, b: &Region, lambda: f64, out_h: f64, kind: SumKind, opts: &SumOptions) -> Result<SumOutput> {
    validate_lambda(lambda)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let k = opts.supersample.max(1);
    let out_grid = Grid::new(out_h)?;
    let cost = |na: usize, nb: usize| (na * k * k) as u128 * (nb * k * k) as u128;

    // blocks of (first points, second points)
    let mut blocks: Vec<(Vec<Complex64>, Vec<Complex64>)> = Vec::new();
    let (mut boundary_driven, mut subsampled) = (false, false);
    if cost(a.len(), b.len()) <= opts.pair_cap as u128 {
        blocks.push((a.points_of(&a.cells, k), b.points_of(&b.cells, k)));
    } else {
        boundary_driven = true;
        let (da, db) = (a.boundary_cells(), b.boundary_cells());
        let a_inner: Vec<u32> = a.cells.iter().copied().filter(|c| da.binary_search(c).is_err()).collect();
        let b_inner: Vec<u32> = b.cells.iter().copied().filter(|c| db.binary_search(c).is_err()).collect();
        let needed = cost(da.len(), b.len()) + cost(a_inner.len(), db.len());
        let (mut a_keep, mut b_keep) = (a_inner.clone(), b_inner.clone());
        if needed > opts.pair_cap as u128 {
            subsampled = true;
            let fixed = cost(da.len(), db.len());
            let budget = (opts.pair_cap as u128).saturating_sub(fixed) as f64;
            let free = (cost(da.len(), b_inner.len()) + cost(a_inner.len(), db.len())) as f64;
            let frac = if free > 0.0 { (budget / free).clamp(0.0, 1.0) } else { 1.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            a_keep = subsample(&a_inner, (a_inner.len() as f64 * frac) as usize, &mut rng);
            b_keep = subsample(&b_inner, (b_inner.len() as f64 * frac) as usize, &mut rng);
        }
        let mut b_all: Vec<u32> = db.iter().chain(&b_keep).copied().collect();
        b_all.sort_unstable();
        blocks.push((a.points_of(&da, k), b.points_of(&b_all, k)));
        blocks.push((a.points_of(&a_keep, k), b.points_of(&db, k)));
    }

    let mut pairs = 0u64;
    let mut out = HitMask::new(out_grid);
    for (xs, ys) in &blocks {
        pairs += (xs.len() * ys.len()) as u64;
        let hits = xs
            .par_iter()
            .try_fold(
                || HitMask::new(out_grid),
                |mut m, &x| -> Result<HitMask> {
                    for &y in ys {
                        match kind {
                            SumKind::Horo => m.hit(along_chord(x, y, lambda))?,
                            SumKind::HoroUnoriented => {
                                m.hit(along_chord(x, y, lambda))?;
                                m.hit(horo_mirror_z(x, y, lambda))?;
                            }
                            SumKind::Geodesic => m.hit(geodesic_z(x, y, lambda))?,
                        }
                    }
                    Ok(m)
                },
            )
            .try_reduce(|| HitMask::new(out_grid), |a, b| Ok(a.or(b)))?;
        out = out.or(hits);
    }
    Ok(SumOutput { region: out.into_region()?, pairs_evaluated: pairs, boundary_driven, subsampled })
}

/// Inner approximation of `[A:B]_lambda`.
pub fn minkowski_horo(a: &Region, b: &Region, lambda: f64, out_h: f64) -> Result<Region> {
    Ok(minkowski_with(a, b, lambda, out_h, SumKind::Horo, &SumOptions::default())?.region)
}

/// Union over both horocycle orientations.
pub fn minkowski_horo_unoriented(a: &Region, b: &Region, lambda: f64, out_h: f64) -> Result<Region> {
    Ok(minkowski_with(a, b, lambda, out_h, SumKind::HoroUnoriented, &SumOptions::default())?.region)
}

/// Set of `lambda`-points of hyperbolic geodesics from `A` to `B`.
pub fn minkowski_geodesic(a: &Region, b: &Region, lambda: f64, out_h: f64) -> Result<Region> {
    Ok(minkowski_with(a, b, lambda, out_h, SumKind::Geodesic, &SumOptions::default())?.region)
}

/// Horocyclic dilation `t x B` about `origin`.
///
/// Computed by pulling each output cell center back through the inverse
/// dilation (factor `1/t`), so expanding maps leave no holes.
pub fn dilate_region(origin: DiscPoint, b: &Region, t: f64, out_h: f64) -> Result<Region> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("dilation factor must be > 0, got {t}")));
    }
    let grid = Grid::new(out_h)?;
    if b.is_empty() {
        return Ok(Region::empty(grid));
    }
    let o = origin.z();
    // the image of the boundary bounds the image
    let (mut lo, mut hi) = (Complex64::new(f64::MAX, f64::MAX), Complex64::new(f64::MIN, f64::MIN));
    for &c in &b.boundary_cells() {
        let z = along_chord(o, b.grid.center(c as usize), t);
        if !(z.re.abs() <= WINDOW && z.im.abs() <= WINDOW && z.norm() < 1.0 - BOUNDARY_GUARD) {
            return Err(Error::OutsideWindow { re: z.re, im: z.im });
        }
        (lo.re, lo.im, hi.re, hi.im) = (lo.re.min(z.re), lo.im.min(z.im), hi.re.max(z.re), hi.im.max(z.im));
    }
    let pad = 3.0 * t.max(1.0) * b.grid.h.max(out_h);
    let Some(((i0, i1), (j0, j1))) = grid.index_box(lo - Complex64::new(pad, pad), hi + Complex64::new(pad, pad)) else {
        return Ok(Region::empty(grid));
    };
    let mask = b.mask();
    let n = grid.n;
    let cells: Vec<usize> = (j0..=j1)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mask = &mask;
            (i0..=i1).filter_map(move |i| {
                let idx = j * n + i;
                if !grid.center_in_disc(idx) {
                    return None;
                }
                let pre = along_chord(o, grid.center(idx), 1.0 / t);
                b.grid.cell_of(pre).filter(|&p| mask[p]).map(|_| idx)
            })
        })
        .collect();
    Region::from_cells(grid, cells)
}

/// Radius `r` with `sinh(r/2) = (1 - lambda) sinh(r0/2) + lambda sinh(r1/2)`:
/// `[A:B]_lambda` of concentric discs of radii `r0`, `r1`.
pub fn concentric_radius(r0: f64, r1: f64, lambda: f64) -> f64 {
    2.0 * ((1.0 - lambda) * (0.5 * r0).sinh() + lambda * (0.5 * r1).sinh()).asinh()
}

/// Reference disc used for slack calibration.
#[derive(Debug, Clone, Serialize)]
pub struct SlackProbe {
    pub radius: f64,
    pub distance: f64,
    pub exact: f64,
    pub rasterized: f64,
    pub relative_error: f64,
}

/// Relative area error of rasterized reference discs (radii 0.2 and 1.2,
/// centers at distance 0 and 2 from the origin) at spacing `h`.
pub fn calibrate_slack(h: f64) -> Result<(f64, Vec<SlackProbe>)> {
    let mut probes = Vec::new();
    for &radius in &[0.2, 1.2] {
        for &distance in &[0.0, 2.0] {
            let c = DiscPoint::from_polar(distance, 0.7)?;
            let region = rasterize(&RegionSpec::disc(c.x(), c.y(), radius), h)?;
            let (exact, rasterized) = (disc_area(radius), region.area());
            probes.push(SlackProbe { radius, distance, exact, rasterized, relative_error: (rasterized - exact).abs() / exact });
        }
    }
    let slack = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok((slack, probes))
}

/// Fill and opacity of one region in an SVG rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvgLayer {
    pub fill: String,
    #[serde(default = "default_opacity")]
    pub opacity: f64,
}

fn default_opacity() -> f64 {
    0.6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvgStyle {
    pub size_px: u32,
    pub background: String,
    pub circle: String,
}

impl Default for SvgStyle {
    fn default() -> Self {
        Self { size_px: 600, background: "white".into(), circle: "black".into() }
    }
}

/// Renders regions over the unit circle. Cells are merged into horizontal runs.
pub fn render_svg(layers: &[(&Region, SvgLayer)], style: &SvgStyle) -> String {
    let mut s = String::new();
    let px = style.size_px;
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" viewBox="-1.02 -1.02 2.04 2.04">"#);
    let _ = writeln!(s, r#"<rect x="-1.02" y="-1.02" width="2.04" height="2.04" fill="{}"/>"#, style.background);
    let _ = writeln!(s, r#"<g transform="scale(1,-1)">"#);
    for (region, layer) in layers {
        let h = region.grid.h;
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="{}" shape-rendering="crispEdges">"#, layer.fill, layer.opacity);
        let rle = region.to_rle();
        let mut rows: BTreeMap<u32, Vec<[u32; 2]>> = BTreeMap::new();
        for [row, start, len] in rle.runs {
            rows.entry(row).or_default().push([start, len]);
        }
        for (row, runs) in rows {
            let y = -WINDOW + row as f64 * h;
            for [start, len] in runs {
                let x = -WINDOW + start as f64 * h;
                let _ = writeln!(s, r#"<rect x="{x:.5}" y="{y:.5}" width="{:.5}" height="{h:.5}"/>"#, len as f64 * h);
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r#"<circle cx="0" cy="0" r="1" fill="none" stroke="{}" stroke-width="0.004"/>"#, style.circle);
    let _ = writeln!(s, "</g>\n</svg>");
    s
}
