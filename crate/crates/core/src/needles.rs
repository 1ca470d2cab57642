//! Discrete needle decomposition under the horocyclic Finsler distance.
//!
//! The transport problem is solved as a min-cost flow on the complete
//! directed graph of the instance points with edge costs `dist_phi`. The
//! potential is read off the final residual graph as the greatest `u <= 0`
//! that is tight on every flow edge, which keeps unrelated rays from
//! accidentally becoming tight against each other.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finsler::dist_phi;
use crate::horocycle::{horo_between, Horocycle};
use crate::hypdisc::{area_density, DiscPoint};
use crate::regions::Region;

/// Default cap on the number of points handed to the transport solver.
pub const DEFAULT_POINT_CAP: usize = 2000;

/// Tolerance the solver output is held to.
pub const SOLVER_TOL: f64 = 1e-7;

/// Point masses `rho1`, `rho2` on a finite set of disc points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct MassInstance {
    points: Vec<DiscPoint>,
    rho1: Vec<f64>,
    rho2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    points: Vec<[f64; 2]>,
    rho1: Vec<f64>,
    rho2: Vec<f64>,
}

impl TryFrom<RawInstance> for MassInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        let points = raw.points.iter().map(|p| DiscPoint::from_xy(p[0], p[1])).collect::<Result<Vec<_>>>()?;
        MassInstance::new(points, raw.rho1, raw.rho2)
    }
}

impl From<MassInstance> for RawInstance {
    fn from(inst: MassInstance) -> Self {
        RawInstance { points: inst.points.iter().map(|p| [p.x(), p.y()]).collect(), rho1: inst.rho1, rho2: inst.rho2 }
    }
}

impl MassInstance {
    pub fn new(points: Vec<DiscPoint>, rho1: Vec<f64>, rho2: Vec<f64>) -> Result<Self> {
        if rho1.len() != points.len() || rho2.len() != points.len() {
            return Err(Error::InvalidParameter(format!("{} points but {} / {} weights", points.len(), rho1.len(), rho2.len())));
        }
        if rho1.iter().chain(&rho2).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
        }
        let (m1, m2): (f64, f64) = (rho1.iter().sum(), rho2.iter().sum());
        if (m1 - m2).abs() > 1e-9 * m1.max(m2).max(1.0) {
            return Err(Error::Unbalanced { rho1: m1, rho2: m2 });
        }
        Ok(Self { points, rho1, rho2 })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn points(&self) -> &[DiscPoint] {
        &self.points
    }

    pub fn rho1(&self) -> &[f64] {
        &self.rho1
    }

    pub fn rho2(&self) -> &[f64] {
        &self.rho2
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.rho1.iter().sum()
    }

    /// `n` equally spaced points of `h` on `[t_start, t_end]`; the first half
    /// carries `rho1`, the second half `rho2`, each of total mass 1.
    pub fn on_arc(h: &Horocycle, t_start: f64, t_end: f64, n: usize) -> Result<Self> {
        if n < 2 || !n.is_multiple_of(2) || t_start.is_nan() || t_end.is_nan() || t_end <= t_start {
            return Err(Error::InvalidParameter(format!("on_arc needs an even n >= 2 and t_end > t_start, got n = {n}")));
        }
        let half = n / 2;
        let w = 1.0 / half as f64;
        let points = (0..n).map(|k| h.eval(t_start + (t_end - t_start) * k as f64 / (n - 1) as f64)).collect();
        let rho1 = (0..n).map(|k| if k < half { w } else { 0.0 }).collect();
        let rho2 = (0..n).map(|k| if k < half { 0.0 } else { w }).collect();
        Self::new(points, rho1, rho2)
    }

    /// Normalized indicators: `rho1 = chi_A / mu(A)`, `rho2 = chi_B / mu(B)`,
    /// discretized as cell masses at the cell centers of both regions.
    pub fn from_regions(a: &Region, b: &Region) -> Result<Self> {
        if a.grid() != b.grid() {
            return Err(Error::InvalidParameter("regions must share a grid".into()));
        }
        let (ma, mb) = (a.area(), b.area());
        if a.is_empty() || b.is_empty() || ma <= 0.0 || mb <= 0.0 {
            return Err(Error::EmptyRegion);
        }
        let grid = a.grid();
        let mut cells: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        for &c in a.cells() {
            cells.entry(c).or_default().0 = grid.cell_area(c as usize) / ma;
        }
        for &c in b.cells() {
            cells.entry(c).or_default().1 = grid.cell_area(c as usize) / mb;
        }
        let points = cells.keys().map(|&c| DiscPoint::trusted(grid.center(c as usize))).collect();
        let rho1 = cells.values().map(|w| w.0).collect();
        let rho2 = cells.values().map(|w| w.1).collect();
        Self::new(points, rho1, rho2)
    }

    /// `n` points within hyperbolic radius 2 of the origin, random masses of total 1 each.
    pub fn random(rng: &mut impl Rng, n: usize) -> Result<Self> {
        let points: Vec<DiscPoint> = (0..n)
            .map(|_| {
                DiscPoint::trusted(Complex64::from_polar(
                    rng.random::<f64>().sqrt() * 1f64.tanh(),
                    std::f64::consts::TAU * rng.random::<f64>(),
                ))
            })
            .collect();
        let mut rho1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut rho2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        for w in [&mut rho1, &mut rho2] {
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
        }
        // renormalizing twice leaves a rounding-level imbalance; push it onto one weight
        let diff: f64 = rho1.iter().sum::<f64>() - rho2.iter().sum::<f64>();
        rho2[0] += diff;
        Self::new(points, rho1, rho2)
    }
}

/// Dense `dist_phi` matrix, row-major, `get(i, j) = dist_phi(x_i, x_j)`.
#[derive(Debug, Clone)]
pub struct DistMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistMatrix {
    pub fn new(points: &[DiscPoint]) -> Self {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        d.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = dist_phi(points[i], points[j]);
                }
            }
        });
        Self { n, d }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `max_i min_j min(d_ij, d_ji)`: the coarsest nearest-neighbour spacing.
    pub fn max_nn_spacing(&self) -> f64 {
        (0..self.n)
            .into_par_iter()
            .map(|i| (0..self.n).filter(|&j| j != i).map(|j| self.get(i, j).min(self.get(j, i))).fold(f64::INFINITY, f64::min))
            .filter(|v| v.is_finite())
            .reduce(|| 0.0, f64::max)
    }
}

/// A Kantorovich potential with the transport plan that certifies it.
#[derive(Debug, Clone)]
pub struct KantorovichSolution {
    /// Potential values `u`, one per point.
    pub potential: Vec<f64>,
    /// Dual objective `sum u (rho2 - rho1)`.
    pub w1: f64,
    /// Cost of the transport plan `sum f_ij d_ij`.
    pub primal_cost: f64,
    /// Plan entries `(i, j, mass)` moving mass from `x_i` to `x_j`.
    pub plan: Vec<(usize, usize, f64)>,
    /// `max (u_j - u_i - d_ij)`, nonpositive up to rounding for a feasible potential.
    pub feasibility_residual: f64,
    pub dist: DistMatrix,
}

pub fn solve_kantorovich(inst: &MassInstance) -> Result<KantorovichSolution> {
    solve_kantorovich_with(inst, DEFAULT_POINT_CAP)
}

pub fn solve_kantorovich_with(inst: &MassInstance, cap: usize) -> Result<KantorovichSolution> {
    let n = inst.len();
    if n > cap {
        return Err(Error::TooManyPoints { n, cap });
    }
    let dist = DistMatrix::new(&inst.points);
    let supply: Vec<f64> = inst.rho1.iter().zip(&inst.rho2).map(|(a, b)| a - b).collect();
    let total: f64 = inst.rho1.iter().sum::<f64>().max(inst.rho2.iter().sum());
    let eps = 1e-12 * total.max(f64::MIN_POSITIVE);

    let (flow, pi) = successive_shortest_paths(&dist, &supply, eps);
    let potential = residual_potential(&dist, &flow, &pi, eps);

    let w1 = potential.iter().zip(&supply).map(|(u, s)| -u * s).sum();
    let mut plan = Vec::new();
    let mut primal_cost = 0.0;
    for i in 0..n {
        for j in 0..n {
            let f = flow[i * n + j];
            if f > eps {
                plan.push((i, j, f));
                primal_cost += f * dist.get(i, j);
            }
        }
    }
    let feasibility_residual = feasibility_residual(&potential, &dist);
    Ok(KantorovichSolution { potential, w1, primal_cost, plan, feasibility_residual, dist })
}

/// `max_{i != j} (u_j - u_i - d_ij)`.
pub fn feasibility_residual(u: &[f64], dist: &DistMatrix) -> f64 {
    let n = u.len();
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| j != i).map(|j| u[j] - u[i] - dist.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Cheapest residual arc `u -> v`: undoing flow on `v -> u` when there is
/// any, otherwise the forward edge.
#[inline]
fn residual_cost(dist: &DistMatrix, flow: &[f64], eps: f64, u: usize, v: usize) -> (f64, bool) {
    let n = dist.n;
    if flow[v * n + u] > eps {
        (-dist.get(v, u), true)
    } else {
        (dist.get(u, v), false)
    }
}

/// Dense Dijkstra over the residual graph with reduced costs.
/// Returns distances and predecessors (`usize::MAX` at sources).
fn dijkstra(dist: &DistMatrix, flow: &[f64], pi: &[f64], eps: f64, init: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = dist.n;
    let mut d = init.to_vec();
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    for _ in 0..n {
        let mut u = usize::MAX;
        let mut best = f64::INFINITY;
        for v in 0..n {
            if !done[v] && d[v] < best {
                best = d[v];
                u = v;
            }
        }
        if u == usize::MAX {
            break;
        }
        done[u] = true;
        for v in 0..n {
            if done[v] || v == u {
                continue;
            }
            let (c, _) = residual_cost(dist, flow, eps, u, v);
            // rounding can leave reduced costs a hair below zero
            let nd = best + (c + pi[u] - pi[v]).max(0.0);
            if nd < d[v] {
                d[v] = nd;
                pred[v] = u;
            }
        }
    }
    (d, pred)
}

fn successive_shortest_paths(dist: &DistMatrix, supply: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = dist.n;
    let mut excess = supply.to_vec();
    let mut flow = vec![0.0; n * n];
    let mut pi = vec![0.0; n];
    loop {
        let init: Vec<f64> = excess.iter().map(|&e| if e > eps { 0.0 } else { f64::INFINITY }).collect();
        if init.iter().all(|d| d.is_infinite()) {
            break;
        }
        let (d, pred) = dijkstra(dist, &flow, &pi, eps, &init);
        let Some(t) = (0..n).filter(|&v| excess[v] < -eps).min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))) else {
            break;
        };
        let mut path = Vec::new();
        let mut v = t;
        while pred[v] != usize::MAX {
            path.push((pred[v], v));
            v = pred[v];
        }
        let s = v;
        let mut delta = excess[s].min(-excess[t]);
        for &(a, b) in &path {
            if let (_, true) = residual_cost(dist, &flow, eps, a, b) {
                delta = delta.min(flow[b * n + a]);
            }
        }
        for &(a, b) in &path {
            if let (_, true) = residual_cost(dist, &flow, eps, a, b) {
                flow[b * n + a] -= delta;
            } else {
                flow[a * n + b] += delta;
            }
        }
        excess[s] -= delta;
        excess[t] += delta;
        for v in 0..n {
            if d[v].is_finite() {
                pi[v] += d[v];
            }
        }
    }
    (flow, pi)
}

/// Shortest distances from a virtual root joined to every node by a free
/// edge. This is the pointwise greatest `u <= 0` with `u_j - u_i <= d_ij`
/// on residual arcs, so it is tight exactly where it has to be.
fn residual_potential(dist: &DistMatrix, flow: &[f64], pi: &[f64], eps: f64) -> Vec<f64> {
    let root = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let init: Vec<f64> = pi.iter().map(|p| root - p).collect();
    let (d, _) = dijkstra(dist, flow, pi, eps, &init);
    d.iter().zip(pi).map(|(dv, p)| dv - root + p).collect()
}

/// Default strain tolerance: ten solver tolerances plus half the coarsest
/// nearest-neighbour spacing.
pub fn default_strain_tol(dist: &DistMatrix) -> f64 {
    10.0 * SOLVER_TOL + 0.5 * dist.max_nn_spacing()
}

/// Ordered pairs `(i, j)`, `i != j`, with `d_ij - (u_j - u_i) <= eps`.
pub fn strain_pairs(u: &[f64], dist: &DistMatrix, eps: f64) -> Vec<(usize, usize)> {
    let n = u.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (0..n).filter(move |&j| j != i && dist.get(i, j) - (u[j] - u[i]) <= eps).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointClass {
    /// First in some strain pair and second in another.
    Strain,
    /// In strain pairs on one side only: an end of a ray.
    End,
    /// In no strain pair.
    Loose,
}

pub fn classify_points(n: usize, pairs: &[(usize, usize)]) -> Vec<PointClass> {
    let mut first = vec![false; n];
    let mut second = vec![false; n];
    for &(i, j) in pairs {
        first[i] = true;
        second[j] = true;
    }
    (0..n)
        .map(|k| match (first[k], second[k]) {
            (true, true) => PointClass::Strain,
            (false, false) => PointClass::Loose,
            _ => PointClass::End,
        })
        .collect()
}

/// A chain of points on one oriented horocycle, ordered along it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteRay {
    pub points: Vec<usize>,
    pub horocycle: Horocycle,
    /// Parameter of each point along `horocycle`.
    pub params: Vec<f64>,
    /// Largest distance from a member to the fitted horocycle.
    pub fit_residual: f64,
    /// `max |u_{k+1} - u_k - d(x_k, x_{k+1})|` along the chain.
    pub rate_residual: f64,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Connected components of `members` under pairs with both ends in `members`,
/// largest first, ties by lowest index.
fn components(n: usize, members: &[usize], pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut inside = vec![false; n];
    members.iter().for_each(|&m| inside[m] = true);
    let mut uf = UnionFind((0..n).collect());
    for &(i, j) in pairs {
        if inside[i] && inside[j] {
            uf.union(i, j);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &m in members {
        groups.entry(uf.find(m)).or_default().push(m);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    comps.iter_mut().for_each(|c| c.sort_unstable());
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Clusters strain-linked points into rays: each component is fitted by the
/// horocycle through its lowest- and highest-potential points, off-trace
/// members are split off and clustered again, and rays on the same trace are
/// merged.
pub fn extract_rays(inst: &MassInstance, sol: &KantorovichSolution, pairs: &[(usize, usize)], fit_tol: f64) -> Vec<DiscreteRay> {
    let n = inst.len();
    let u = &sol.potential;
    let mut fitted: Vec<(Horocycle, Vec<usize>)> = Vec::new();
    let mut queue: std::collections::VecDeque<Vec<usize>> = strain_components(n, pairs).into();
    while let Some(comp) = queue.pop_front() {
        let by_u = |a: &&usize, b: &&usize| u[**a].total_cmp(&u[**b]).then(b.cmp(a));
        let lo = *comp.iter().min_by(by_u).expect("nonempty component");
        let hi = *comp.iter().max_by(by_u).expect("nonempty component");
        let Ok((h, _, _)) = horo_between(inst.points[lo], inst.points[hi]) else {
            continue;
        };
        let (on, off): (Vec<usize>, Vec<usize>) = comp.iter().partition(|&&k| h.trace_distance(inst.points[k].z()) <= fit_tol);
        if on.len() >= 2 {
            fitted.push((h, on));
        }
        if off.len() >= 2 {
            queue.extend(components(n, &off, pairs));
        }
    }

    let mut merged: Vec<(Horocycle, Vec<usize>)> = Vec::new();
    for (h, pts) in fitted {
        match merged.iter_mut().find(|(g, _)| g.same_trace(&h, fit_tol)) {
            Some((_, existing)) => existing.extend(pts),
            None => merged.push((h, pts)),
        }
    }

    merged
        .into_iter()
        .map(|(h, mut pts)| {
            pts.sort_unstable();
            pts.dedup();
            let mut tagged: Vec<(f64, usize)> = pts.iter().map(|&k| (h.parameter_of(inst.points[k].z()), k)).collect();
            tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let points: Vec<usize> = tagged.iter().map(|t| t.1).collect();
            let params = tagged.iter().map(|t| t.0).collect();
            let fit_residual = points.iter().map(|&k| h.trace_distance(inst.points[k].z())).fold(0.0, f64::max);
            let rate_residual = points.windows(2).map(|w| (u[w[1]] - u[w[0]] - sol.dist.get(w[0], w[1])).abs()).fold(0.0, f64::max);
            DiscreteRay { points, horocycle: h, params, fit_residual, rate_residual }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RayBalance {
    pub rho1: f64,
    pub rho2: f64,
    /// `|rho1 - rho2| / max(rho1, rho2)` over the ray.
    pub residual: f64,
    /// Largest `(rho1 - rho2) / max(rho1, rho2)` over suffixes (positive ends) of the chain.
    pub worst_suffix_excess: f64,
    pub balanced: bool,
    pub positive_ends_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub tolerance: f64,
    pub rays: Vec<RayBalance>,
    pub violations: usize,
}

/// Per-ray mass balance and the positive-end inequality, relative to ray mass.
pub fn mass_balance(inst: &MassInstance, rays: &[DiscreteRay], tol: f64) -> BalanceReport {
    let chains: Vec<Vec<usize>> = rays.iter().map(|r| r.points.clone()).collect();
    balance_of(inst, &chains, tol)
}

/// Balance of ordered chains; suffixes are the positive ends.
fn balance_of(inst: &MassInstance, chains: &[Vec<usize>], tol: f64) -> BalanceReport {
    let rays: Vec<RayBalance> = chains
        .iter()
        .map(|points| {
            let rho1: f64 = points.iter().map(|&k| inst.rho1[k]).sum();
            let rho2: f64 = points.iter().map(|&k| inst.rho2[k]).sum();
            let mass = rho1.max(rho2);
            let (residual, worst) = if mass > 0.0 {
                let mut suffix = 0.0f64;
                let mut worst = f64::NEG_INFINITY;
                for &k in points.iter().rev() {
                    suffix += inst.rho1[k] - inst.rho2[k];
                    worst = worst.max(suffix / mass);
                }
                ((rho1 - rho2).abs() / mass, worst)
            } else {
                (0.0, 0.0)
            };
            RayBalance { rho1, rho2, residual, worst_suffix_excess: worst, balanced: residual <= tol, positive_ends_ok: worst <= tol }
        })
        .collect();
    let violations = rays.iter().filter(|r| !r.balanced || !r.positive_ends_ok).count();
    BalanceReport { tolerance: tol, rays, violations }
}

/// Connected components of the strain graph with at least two points,
/// largest first.
pub fn strain_components(n: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut members: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    members.sort_unstable();
    members.dedup();
    components(n, &members, pairs)
}

/// Balance on strain-graph components, with positive ends taken as
/// superlevel sets of `u`. Flow only climbs `u`, so for an optimal potential
/// both hold up to rounding whatever the sampling.
pub fn component_balance(inst: &MassInstance, u: &[f64], pairs: &[(usize, usize)], tol: f64) -> BalanceReport {
    let chains: Vec<Vec<usize>> = strain_components(inst.len(), pairs)
        .into_iter()
        .map(|mut c| {
            c.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
            c
        })
        .collect();
    balance_of(inst, &chains, tol)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    /// `sum |rho1 - rho2|`.
    pub unbalanced_mass: f64,
    /// Unbalanced mass on points that are neither on a ray nor loose.
    pub uncovered_mass: f64,
    pub uncovered_fraction: f64,
}

pub fn coverage(inst: &MassInstance, pairs: &[(usize, usize)], rays: &[DiscreteRay]) -> CoverageReport {
    let n = inst.len();
    let classes = classify_points(n, pairs);
    let mut on_ray = vec![false; n];
    rays.iter().flat_map(|r| &r.points).for_each(|&k| on_ray[k] = true);
    let mut unbalanced_mass = 0.0;
    let mut uncovered_mass = 0.0;
    for k in 0..n {
        let m = (inst.rho1[k] - inst.rho2[k]).abs();
        unbalanced_mass += m;
        if !on_ray[k] && classes[k] != PointClass::Loose {
            uncovered_mass += m;
        }
    }
    let uncovered_fraction = if unbalanced_mass > 0.0 { uncovered_mass / unbalanced_mass } else { 0.0 };
    CoverageReport { unbalanced_mass, uncovered_mass, uncovered_fraction }
}

/// A one-parameter family of horocycles with quadratic `lambda`, `t0`, `phi`
/// (coefficients in increasing degree).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFamily {
    pub lambda: [f64; 3],
    pub t0: [f64; 3],
    pub phi: [f64; 3],
}

impl AffineFamily {
    /// Horocyclic polar coordinates about the origin.
    pub const POLAR: AffineFamily = AffineFamily { lambda: [1.0, 0.0, 0.0], t0: [0.0; 3], phi: [0.0, 1.0, 0.0] };

    pub fn eval(&self, y: f64) -> (f64, f64, f64) {
        let q = |c: &[f64; 3]| c[0] + y * (c[1] + y * c[2]);
        (q(&self.lambda), q(&self.t0), q(&self.phi))
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut c = || -> [f64; 3] { [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)] };
        let (mut lambda, t0, phi) = (c(), c(), c());
        lambda[0] = 0.5 + lambda[0].abs() * 1.5;
        AffineFamily { lambda, t0, phi }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JacobianReport {
    pub y0: f64,
    pub t_grid: Vec<f64>,
    /// `det dF(y0, t)` against the hyperbolic area form, by finite differences.
    pub det: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Largest deviation from the affine fit, relative to the range of `det`.
    pub fit_residual: f64,
    pub expected_slope: f64,
    pub expected_intercept: f64,
    pub slope_error: f64,
    pub intercept_error: f64,
}

const JAC_STEP: f64 = 1e-5;

fn family_point(family: &impl Fn(f64) -> (f64, f64, f64), y: f64, t: f64) -> Result<Complex64> {
    let (lambda, t0, phi) = family(y);
    Ok(Horocycle::from_angle(lambda, t0, phi)?.eval_z(t))
}

/// Fits `t -> det dF(y0, t)` for `F(y, t) = alpha_{lambda(y), t0(y), e^{i phi(y)}}(t)`
/// and compares with `((t - t0) phi' - lambda') / lambda`.
pub fn jacobian_affine_check(family: impl Fn(f64) -> (f64, f64, f64), y0: f64, t_grid: &[f64]) -> Result<JacobianReport> {
    if t_grid.len() < 2 {
        return Err(Error::InvalidParameter("t_grid needs at least two values".into()));
    }
    let mut det = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let ft = (family_point(&family, y0, t + JAC_STEP)? - family_point(&family, y0, t - JAC_STEP)?) / (2.0 * JAC_STEP);
        let fy = (family_point(&family, y0 + JAC_STEP, t)? - family_point(&family, y0 - JAC_STEP, t)?) / (2.0 * JAC_STEP);
        let z = family_point(&family, y0, t)?;
        det.push((ft.conj() * fy).im * area_density(DiscPoint::trusted(z)));
    }

    let m = t_grid.len() as f64;
    let tm = t_grid.iter().sum::<f64>() / m;
    let dm = det.iter().sum::<f64>() / m;
    let stt: f64 = t_grid.iter().map(|t| (t - tm) * (t - tm)).sum();
    let std: f64 = t_grid.iter().zip(&det).map(|(t, d)| (t - tm) * (d - dm)).sum();
    let slope = std / stt;
    let intercept = dm - slope * tm;
    let range = det.iter().copied().fold(f64::NEG_INFINITY, f64::max) - det.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = if range > 1e-9 { range } else { dm.abs().max(1.0) };
    let fit_residual = t_grid.iter().zip(&det).map(|(t, d)| (d - slope * t - intercept).abs()).fold(0.0, f64::max) / scale;

    // five-point derivatives of the family itself
    let g = 1e-3;
    let deriv = |k: usize| {
        let f = |y: f64| {
            let v = family(y);
            [v.0, v.1, v.2][k]
        };
        (f(y0 - 2.0 * g) - 8.0 * f(y0 - g) + 8.0 * f(y0 + g) - f(y0 + 2.0 * g)) / (12.0 * g)
    };
    let (lambda, t0, _) = family(y0);
    let (dl, dphi) = (deriv(0), deriv(2));
    let expected_slope = dphi / lambda;
    let expected_intercept = -(t0 * dphi + dl) / lambda;
    Ok(JacobianReport {
        y0,
        t_grid: t_grid.to_vec(),
        det,
        slope,
        intercept,
        fit_residual,
        expected_slope,
        expected_intercept,
        slope_error: (slope - expected_slope).abs(),
        intercept_error: (intercept - expected_intercept).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignCheck {
    pub constant: bool,
    /// Root of the fitted affine function when it lies strictly inside the grid.
    pub root: Option<f64>,
}

pub fn sign_constancy_check(report: &JacobianReport) -> SignCheck {
    let lo = report.t_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = report.t_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if report.slope == 0.0 {
        return SignCheck { constant: true, root: None };
    }
    let root = -report.intercept / report.slope;
    if root > lo && root < hi {
        SignCheck { constant: false, root: Some(root) }
    } else {
        SignCheck { constant: true, root: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypdisc::Mobius;
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Kantorovich primal on the bipartite support, solved as a plain LP.
    fn primal_lp(inst: &MassInstance) -> f64 {
        let n = inst.len();
        let mut pb = Problem::new(OptimizationDirection::Minimize);
        let mut vars = vec![];
        for i in 0..n {
            for j in 0..n {
                if inst.rho1()[i] > 0.0 && inst.rho2()[j] > 0.0 {
                    let d = if i == j { 0.0 } else { dist_phi(inst.points()[i], inst.points()[j]) };
                    vars.push((i, j, pb.add_var(d, (0.0, f64::INFINITY))));
                }
            }
        }
        for i in 0..n {
            let row: Vec<_> = vars.iter().filter(|v| v.0 == i).map(|v| (v.2, 1.0)).collect();
            if !row.is_empty() {
                pb.add_constraint(row.as_slice(), ComparisonOp::Eq, inst.rho1()[i]);
            }
            let col: Vec<_> = vars.iter().filter(|v| v.1 == i).map(|v| (v.2, 1.0)).collect();
            if !col.is_empty() {
                pb.add_constraint(col.as_slice(), ComparisonOp::Eq, inst.rho2()[i]);
            }
        }
        pb.solve().unwrap().objective()
    }

    #[test]
    fn duality_matches_primal_lp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [4, 9, 16, 32] {
            let inst = MassInstance::random(&mut rng, n).unwrap();
            let sol = solve_kantorovich(&inst).unwrap();
            let lp = primal_lp(&inst);
            assert!((sol.w1 - lp).abs() < 1e-6, "n={n}: dual {} vs lp {lp}", sol.w1);
            assert!((sol.primal_cost - sol.w1).abs() < 1e-9);
            assert!(sol.feasibility_residual <= 1e-9);
        }
    }

    #[test]
    fn equal_masses_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = MassInstance::random(&mut rng, 12).unwrap();
        let inst = MassInstance::new(base.points().to_vec(), base.rho1().to_vec(), base.rho1().to_vec()).unwrap();
        let sol = solve_kantorovich(&inst).unwrap();
        assert_eq!(sol.w1, 0.0);
        assert!(sol.potential.iter().all(|&u| u == sol.potential[0]));
        let pairs = strain_pairs(&sol.potential, &sol.dist, 1e-6);
        assert!(pairs.is_empty());
        assert!(extract_rays(&inst, &sol, &pairs, 1e-3).is_empty());
        assert_eq!(mass_balance(&inst, &[], 0.02).violations, 0);
    }

    #[test]
    fn two_points() {
        let x = DiscPoint::from_xy(0.1, -0.2).unwrap();
        let y = DiscPoint::from_xy(-0.3, 0.4).unwrap();
        let inst = MassInstance::new(vec![x, y], vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let sol = solve_kantorovich(&inst).unwrap();
        assert!((sol.w1 - dist_phi(x, y)).abs() < 1e-12);
        assert!((sol.potential[1] - sol.potential[0] - sol.w1).abs() < 1e-12);
        assert_eq!(strain_pairs(&sol.potential, &sol.dist, 1e-6), vec![(0, 1)]);
        assert_eq!(classify_points(2, &[(0, 1)]), vec![PointClass::End, PointClass::End]);
    }

    #[test]
    fn rejects_unbalanced_and_oversized() {
        let x = DiscPoint::ORIGIN;
        assert!(matches!(MassInstance::new(vec![x], vec![1.0], vec![0.5]), Err(Error::Unbalanced { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = MassInstance::random(&mut rng, 10).unwrap();
        assert!(matches!(solve_kantorovich_with(&inst, 5), Err(Error::TooManyPoints { n: 10, cap: 5 })));
    }

    #[test]
    fn json_round_trip() {
        let inst = MassInstance::from_json(r#"{"points":[[0.0,0.0],[0.5,0.0]],"rho1":[1,0],"rho2":[0,1]}"#).unwrap();
        let back = MassInstance::from_json(&serde_json::to_string(&inst).unwrap()).unwrap();
        assert_eq!(inst, back);
        assert!(MassInstance::from_json(r#"{"points":[[1.0,0.0]],"rho1":[1],"rho2":[1]}"#).is_err());
    }

    fn check_rays(truth: &[Horocycle], inst: &MassInstance) {
        let sol = solve_kantorovich(inst).unwrap();
        let eps = default_strain_tol(&sol.dist);
        let pairs = strain_pairs(&sol.potential, &sol.dist, eps);
        let rays = extract_rays(inst, &sol, &pairs, 1e-3);
        assert_eq!(rays.len(), truth.len());
        for h in truth {
            assert!(rays.iter().any(|r| r.horocycle.same_trace(h, 1e-3)), "no ray matches {h:?}");
        }
        for r in &rays {
            assert!(r.rate_residual < 1e-9);
        }
        let bal = mass_balance(inst, &rays, 0.02);
        assert_eq!(bal.violations, 0, "{bal:?}");
        assert!(coverage(inst, &pairs, &rays).uncovered_fraction <= 0.05);
    }

    #[test]
    fn recovers_single_ray() {
        let h = Horocycle::from_angle(0.7, 0.3, 1.1).unwrap();
        let inst = MassInstance::on_arc(&h, -0.4, 0.6, 40).unwrap();
        check_rays(&[h], &inst);
    }

    fn concat(parts: &[MassInstance]) -> MassInstance {
        let mut pts = vec![];
        let (mut r1, mut r2) = (vec![], vec![]);
        for p in parts {
            pts.extend_from_slice(p.points());
            r1.extend_from_slice(p.rho1());
            r2.extend_from_slice(p.rho2());
        }
        MassInstance::new(pts, r1, r2).unwrap()
    }

    #[test]
    fn recovers_two_translated_rays() {
        let h = Horocycle::from_angle(0.5, 0.0, 0.0).unwrap();
        let g = h.transformed(&Mobius::from_point(DiscPoint::from_xy(-0.6, 0.3).unwrap(), 2.0));
        let a = MassInstance::on_arc(&h, -0.2, 0.2, 20).unwrap();
        let b = MassInstance::on_arc(&g, -0.2, 0.2, 20).unwrap();
        check_rays(&[h, g], &concat(&[a, b]));
    }

    #[test]
    fn positive_ends_fail_when_order_is_reversed() {
        let h = Horocycle::from_angle(0.7, 0.0, 0.0).unwrap();
        let inst = MassInstance::on_arc(&h, -0.3, 0.3, 10).unwrap();
        let sol = solve_kantorovich(&inst).unwrap();
        let pairs = strain_pairs(&sol.potential, &sol.dist, default_strain_tol(&sol.dist));
        let mut rays = extract_rays(&inst, &sol, &pairs, 1e-3);
        assert_eq!(mass_balance(&inst, &rays, 0.02).violations, 0);
        rays[0].points.reverse();
        let bal = mass_balance(&inst, &rays, 0.02);
        assert!(bal.rays[0].balanced && !bal.rays[0].positive_ends_ok);
    }

    #[test]
    fn from_regions_is_normalized() {
        let a = crate::regions::rasterize(&crate::RegionSpec::disc(0.0, 0.0, 0.5), 0.05).unwrap();
        let b = crate::regions::rasterize(&crate::RegionSpec::disc(0.4, 0.0, 0.5), 0.05).unwrap();
        let inst = MassInstance::from_regions(&a, &b).unwrap();
        assert!((inst.mass() - 1.0).abs() < 1e-12);
        assert!((inst.rho2().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn components_balance_on_grid_instances() {
        let a = crate::regions::rasterize(&crate::RegionSpec::disc(-0.3, 0.0, 0.4), 0.05).unwrap();
        let b = crate::regions::rasterize(&crate::RegionSpec::disc(0.3, 0.1, 0.4), 0.05).unwrap();
        let inst = MassInstance::from_regions(&a, &b).unwrap();
        let sol = solve_kantorovich(&inst).unwrap();
        let pairs = strain_pairs(&sol.potential, &sol.dist, default_strain_tol(&sol.dist));
        let rep = component_balance(&inst, &sol.potential, &pairs, 1e-9);
        assert!(!rep.rays.is_empty());
        assert_eq!(rep.violations, 0, "{rep:?}");
    }

    fn grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    }

    #[test]
    fn polar_family_gives_t() {
        let rep = jacobian_affine_check(|y| AffineFamily::POLAR.eval(y), 0.4, &grid(0.1, 2.0, 20)).unwrap();
        for (t, d) in rep.t_grid.iter().zip(&rep.det) {
            assert!((d - t).abs() < 1e-6, "{d} vs {t}");
        }
        assert!((rep.slope - 1.0).abs() < 1e-3 && rep.intercept.abs() < 1e-3);
        assert!(rep.fit_residual < 1e-4);
        assert!(sign_constancy_check(&rep).constant);
        let rep = jacobian_affine_check(|y| AffineFamily::POLAR.eval(y), 0.4, &grid(-1.0, 1.0, 21)).unwrap();
        let sc = sign_constancy_check(&rep);
        assert!(!sc.constant && sc.root.unwrap().abs() < 1e-6);
    }

    #[test]
    fn growing_lambda_is_constant_minus_one() {
        let fam = AffineFamily { lambda: [1.0, 1.0, 0.0], t0: [0.0; 3], phi: [0.0; 3] };
        let rep = jacobian_affine_check(|y| fam.eval(y), 0.0, &grid(-1.5, 1.5, 15)).unwrap();
        for d in &rep.det {
            assert!((d + 1.0).abs() < 1e-6, "{d}");
        }
        assert!(rep.slope.abs() < 1e-3 && (rep.intercept + 1.0).abs() < 1e-3);
        assert!(sign_constancy_check(&rep).constant);
    }

    #[test]
    fn shifted_family() {
        let fam = AffineFamily { lambda: [2.0, 0.0, 0.0], t0: [0.0, 1.0, 0.0], phi: [0.0, 2.0, 0.0] };
        let rep = jacobian_affine_check(|y| fam.eval(y), 0.0, &grid(0.2, 3.0, 15)).unwrap();
        assert!((rep.slope - 1.0).abs() < 1e-3 && rep.intercept.abs() < 1e-3);
    }

    #[test]
    fn random_families_match_formula_and_sign_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let fam = AffineFamily::random(&mut rng);
            let y0 = rng.random_range(-0.3..0.3);
            let ts = grid(-2.0, 2.0, 41);
            let rep = jacobian_affine_check(|y| fam.eval(y), y0, &ts).unwrap();
            assert!(rep.slope_error < 1e-3 && rep.intercept_error < 1e-3, "{rep:?}");
            assert!(rep.fit_residual < 1e-4);
            let pos = rep.det.iter().any(|&d| d > 1e-9);
            let neg = rep.det.iter().any(|&d| d < -1e-9);
            assert_eq!(sign_constancy_check(&rep).constant, !(pos && neg));
        }
    }
}
