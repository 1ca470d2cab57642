//! Experiment configuration, reports and figures behind the `horobm` CLI.
//!
//! Every experiment reads its tolerances from [`Tolerances`] and turns each
//! check into a [`Verdict`] that records the measured value next to the
//! tolerance it was held to. Reports are deterministic for a fixed config and
//! seed; wall-clock time is kept out of the report bytes and written to a
//! separate file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypdisc::{hyp_dist, DiscPoint};
use crate::meanbbl::{
    random_dominated_pair, sup_convolution, sup_convolution_1d, verify_dirbbl, BblStatus, Density1D, DiscFunction, PMeanParam,
};
use crate::needles::{
    component_balance, coverage, default_strain_tol, extract_rays, jacobian_affine_check, mass_balance, sign_constancy_check,
    solve_kantorovich_with, strain_pairs, AffineFamily, MassInstance, DEFAULT_POINT_CAP,
};
use crate::regions::{
    calibrate_slack, dilate_region, minkowski_with, render_svg, Region, RegionSpec, SumKind, SumOptions, SvgLayer, SvgStyle,
    DEFAULT_PAIR_CAP,
};
use crate::Horocycle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    VerifyBm,
    VerifyBbl,
    Scaling,
    Bottleneck,
    Needles,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::VerifyBm => "verify-bm",
            Experiment::VerifyBbl => "verify-bbl",
            Experiment::Scaling => "scaling",
            Experiment::Bottleneck => "bottleneck",
            Experiment::Needles => "needles",
        }
    }
}

/// Tolerances for every verdict. Defaults are the documented acceptance values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative error allowed where equality is expected (square-root areas).
    pub equality: f64,
    /// Largest acceptable calibrated rasterization slack (relative area).
    pub max_slack: f64,
    /// Relative error of dilation area ratios against `t^2`.
    pub scaling: f64,
    /// Absolute slack of the one-dimensional directed inequality.
    pub bbl_1d: f64,
    /// `|W1 - plan cost|`.
    pub duality: f64,
    /// Largest `u_j - u_i - d_ij`.
    pub feasibility: f64,
    /// Horocycle parameter error of recovered rays.
    pub ray_params: f64,
    /// Model-coordinate distance for fitting points to a ray.
    pub fit: f64,
    /// Per-ray and positive-end balance, relative to ray mass.
    pub balance: f64,
    /// Fraction of unbalanced mass neither on a ray nor loose.
    pub coverage: f64,
    /// Slope and intercept error of the Jacobian fit.
    pub jacobian_coef: f64,
    /// Affine fit residual of the Jacobian, relative to its range.
    pub jacobian_fit: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            equality: 0.02,
            max_slack: 0.03,
            scaling: 0.02,
            bbl_1d: 1e-6,
            duality: 1e-6,
            feasibility: 1e-9,
            ray_params: 1e-3,
            fit: 1e-3,
            balance: 0.02,
            coverage: 0.05,
            jacobian_coef: 1e-3,
            jacobian_fit: 1e-4,
        }
    }
}

/// Two region specs, with an optional equality expectation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionPair {
    #[serde(default)]
    pub label: Option<String>,
    pub a: RegionSpec,
    pub b: RegionSpec,
    #[serde(default)]
    pub expect_equality: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmConfig {
    pub lambdas: Vec<f64>,
    pub pairs: Vec<RegionPair>,
    /// Number of seeded random disc-union pairs.
    pub random_pairs: usize,
}

impl Default for BmConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.5], pairs: Vec::new(), random_pairs: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    Indicator,
    /// `exp(-d(x, center)^2 / (2 sigma^2))` with `d` the hyperbolic distance.
    Gaussian {
        center: [f64; 2],
        sigma: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub region: RegionSpec,
    pub profile: Profile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BblCase {
    #[serde(default)]
    pub label: Option<String>,
    pub f: FunctionSpec,
    pub g: FunctionSpec,
    pub p: PMeanParam,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BblConfig {
    /// Seeded one-dimensional instances with dominance.
    pub instances_1d: usize,
    pub step_1d: f64,
    /// Exponents cycled through the one-dimensional instances.
    pub p_1d: Vec<PMeanParam>,
    /// Include the dominance-violating instance that must fail.
    pub negative_control: bool,
    pub cases: Vec<BblCase>,
}

impl Default for BblConfig {
    fn default() -> Self {
        Self {
            instances_1d: 0,
            step_1d: 0.01,
            p_1d: vec![PMeanParam::MINUS_HALF, PMeanParam::ZERO, PMeanParam::ONE, PMeanParam::INFINITY],
            negative_control: true,
            cases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub origin: [f64; 2],
    pub regions: Vec<RegionSpec>,
    pub factors: Vec<f64>,
    /// Pairs for `Area([A:B])^{1/2} >= Area(A)^{1/2} + Area(B)^{1/2}`, `[A:B] = 2 x [A:B]_{1/2}`.
    pub succinct: Vec<RegionPair>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { origin: [0.0, 0.0], regions: Vec::new(), factors: vec![0.25, 0.5, 2.0, 3.0], succinct: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckConfig {
    /// Hyperbolic area of each of the two discs.
    pub disc_area: f64,
    /// Hyperbolic distances between the disc centers.
    pub separations: Vec<f64>,
    pub lambda: f64,
    /// Grid spacing override for this experiment.
    pub grid_h: Option<f64>,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self { disc_area: 1.0, separations: vec![2.0, 4.0, 6.0, 8.0], lambda: 0.5, grid_h: None }
    }
}

/// Points on a horocycle arc, `rho1` on the first half and `rho2` on the second.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcSpec {
    pub lambda: f64,
    pub t0: f64,
    /// Angle of the tangency point.
    pub phi: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub n: usize,
}

impl ArcSpec {
    pub fn horocycle(&self) -> Result<Horocycle> {
        Horocycle::from_angle(self.lambda, self.t0, self.phi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyCase {
    #[serde(default)]
    pub label: Option<String>,
    pub family: AffineFamily,
    pub y0: f64,
    /// `[start, end, count]`.
    pub t_grid: (f64, f64, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleInstance {
    #[serde(default)]
    pub label: Option<String>,
    /// Arcs whose rays must be recovered.
    #[serde(default)]
    pub arcs: Vec<ArcSpec>,
    /// Two regions whose normalized indicators become `rho1`, `rho2`.
    #[serde(default)]
    pub regions: Option<RegionPair>,
    /// Path to a mass instance JSON file, relative to the working directory.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedlesConfig {
    pub point_cap: usize,
    /// Strain tolerance; defaults to the spacing-based rule.
    pub strain_tol: Option<f64>,
    pub instances: Vec<NeedleInstance>,
    pub families: Vec<FamilyCase>,
}

impl Default for NeedlesConfig {
    fn default() -> Self {
        Self { point_cap: DEFAULT_POINT_CAP, strain_tol: None, instances: Vec::new(), families: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Not echoed into reports, so the same run gives the same bytes wherever it is written.
    #[serde(skip_serializing)]
    pub dir: Option<PathBuf>,
    pub svg: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub seed: u64,
    /// Grid spacing for rasterization and sums.
    pub grid_h: f64,
    /// Pair budget of Minkowski sums and sup-convolutions.
    pub pair_cap: usize,
    pub tolerances: Tolerances,
    pub bm: BmConfig,
    pub bbl: BblConfig,
    pub scaling: ScalingConfig,
    pub bottleneck: BottleneckConfig,
    pub needles: NeedlesConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seed: 0,
            grid_h: 0.01,
            pair_cap: DEFAULT_PAIR_CAP,
            tolerances: Tolerances::default(),
            bm: BmConfig::default(),
            bbl: BblConfig::default(),
            scaling: ScalingConfig::default(),
            bottleneck: BottleneckConfig::default(),
            needles: NeedlesConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn sum_options(&self) -> SumOptions {
        SumOptions { pair_cap: self.pair_cap, seed: self.seed, supersample: 1 }
    }
}

/// One pass/fail check with the tolerance it was held to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

/// A labelled numeric table, written as CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.rows.push((label.into(), values));
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("label").chain(self.columns.iter().map(String::as_str)))?;
        for (label, values) in &self.rows {
            w.write_record(std::iter::once(label.clone()).chain(values.iter().map(f64::to_string)))?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// A file produced alongside the report (figures, region exports, ray reports).
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub experiment: Experiment,
    pub config: ExperimentConfig,
    pub tables: Vec<Table>,
    pub verdicts: Vec<Verdict>,
    /// Not part of the report bytes; written to `timing.json`.
    #[serde(skip)]
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub artifacts: Vec<Artifact>,
}

impl Report {
    fn new(experiment: Experiment, config: &ExperimentConfig) -> Self {
        Self { experiment, config: config.clone(), tables: Vec::new(), verdicts: Vec::new(), wall_clock_s: 0.0, artifacts: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The verdict table as CSV.
    pub fn verdicts_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "passed", "measured", "tolerance", "detail"])?;
        for v in &self.verdicts {
            w.write_record([v.name.clone(), v.passed.to_string(), v.measured.to_string(), v.tolerance.to_string(), v.detail.clone()])?;
        }
        csv_string(w)
    }

    /// Writes `report.json`, `verdicts.csv`, one CSV per table, the artifacts
    /// and `timing.json`. Returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = vec![(dir.join("report.json"), self.to_json()?), (dir.join("verdicts.csv"), self.verdicts_csv()?)];
        for t in &self.tables {
            files.push((dir.join(format!("{}.csv", t.name)), t.to_csv()?));
        }
        for a in &self.artifacts {
            files.push((dir.join(&a.name), a.contents.clone()));
        }
        files.push((
            dir.join("timing.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "wall_clock_s": self.wall_clock_s }))? + "\n",
        ));
        for (path, contents) in &files {
            std::fs::write(path, contents)?;
        }
        Ok(files.into_iter().map(|f| f.0).collect())
    }

    fn verdict(&mut self, name: impl Into<String>, passed: bool, measured: f64, tolerance: f64, detail: impl Into<String>) {
        self.verdicts.push(Verdict { name: name.into(), passed, measured, tolerance, detail: detail.into() });
    }

    fn svg(&mut self, name: impl Into<String>, layers: &[(&Region, &str)]) {
        if self.config.output.svg {
            let layers: Vec<(&Region, SvgLayer)> =
                layers.iter().map(|(r, fill)| (*r, SvgLayer { fill: fill.to_string(), opacity: 0.6 })).collect();
            self.artifacts.push(Artifact { name: name.into(), contents: render_svg(&layers, &SvgStyle::default()) });
        }
    }
}

pub fn run(experiment: Experiment, config: &ExperimentConfig) -> Result<Report> {
    let start = Instant::now();
    let mut report = match experiment {
        Experiment::VerifyBm => cmd_verify_bm(config),
        Experiment::VerifyBbl => cmd_verify_bbl(config),
        Experiment::Scaling => cmd_scaling(config),
        Experiment::Bottleneck => cmd_bottleneck(config),
        Experiment::Needles => cmd_needles(config),
    }?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn rasterize_at(spec: &RegionSpec, h: f64) -> Result<Region> {
    spec.rasterize(spec.grid_h.unwrap_or(h))
}

fn pair_label(pair: &RegionPair, k: usize) -> String {
    pair.label.clone().unwrap_or_else(|| format!("pair{k}"))
}

/// Measures the rasterization slack and records whether it is acceptable.
fn slack_verdict(report: &mut Report, h: f64) -> Result<f64> {
    let (slack, probes) = calibrate_slack(h)?;
    let mut table = Table::new("slack", &["radius", "distance", "exact", "rasterized", "relative_error"]);
    for p in &probes {
        table.push(format!("h={h}"), vec![p.radius, p.distance, p.exact, p.rasterized, p.relative_error]);
    }
    report.tables.push(table);
    let max = report.config.tolerances.max_slack;
    report.verdict(format!("slack calibration at h={h}"), slack <= max, slack, max, "largest relative area error of reference discs");
    Ok(slack)
}

/// `(area(sum), ((1 - lambda) sqrt(area A) + lambda sqrt(area B))^2)`.
fn bm_sides(a: &Region, b: &Region, sum: &Region, lambda: f64) -> (f64, f64) {
    let rhs = (1.0 - lambda) * a.area().sqrt() + lambda * b.area().sqrt();
    (sum.area(), rhs * rhs)
}

pub fn cmd_verify_bm(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(Experiment::VerifyBm, config);
    let h = config.grid_h;
    let tol = config.tolerances.clone();
    let slack = slack_verdict(&mut report, h)?;
    let opts = config.sum_options();
    let mut table = Table::new("bm", &["lambda", "area_a", "area_b", "area_sum", "sqrt_lhs", "sqrt_rhs", "ratio"]);

    for (k, pair) in config.bm.pairs.iter().enumerate() {
        let label = pair_label(pair, k);
        let a = rasterize_at(&pair.a, h)?;
        let b = rasterize_at(&pair.b, h)?;
        for &lambda in &config.bm.lambdas {
            let sum = minkowski_with(&a, &b, lambda, h, SumKind::Horo, &opts)?.region;
            let (lhs, rhs) = bm_sides(&a, &b, &sum, lambda);
            let ratio = (lhs / rhs).sqrt();
            table.push(format!("{label} lambda={lambda}"), vec![lambda, a.area(), b.area(), lhs, lhs.sqrt(), rhs.sqrt(), ratio]);
            report.verdict(
                format!("{label}: brunn-minkowski at lambda={lambda}"),
                lhs >= rhs * (1.0 - slack),
                lhs / rhs - 1.0,
                slack,
                "relative area excess of the sum over the bound; must be >= -slack",
            );
            if pair.expect_equality {
                let err = (ratio - 1.0).abs();
                report.verdict(
                    format!("{label}: equality at lambda={lambda}"),
                    err <= tol.equality,
                    err,
                    tol.equality,
                    "relative error of sqrt(area) of the sum against the bound",
                );
            }
            if k == 0 && lambda == config.bm.lambdas[0] {
                report
                    .artifacts
                    .push(Artifact { name: format!("{label}_sum.json"), contents: serde_json::to_string(&sum.export())? + "\n" });
                if config.output.svg {
                    let geo = minkowski_with(&a, &b, lambda, h, SumKind::Geodesic, &opts)?.region;
                    report.svg(format!("{label}_geodesic.svg"), &[(&a, "#1f77b4"), (&b, "#2ca02c"), (&geo, "#d62728")]);
                }
                report.svg(format!("{label}_horocyclic.svg"), &[(&a, "#1f77b4"), (&b, "#2ca02c"), (&sum, "#ff7f0e")]);
            }
        }
    }

    if config.bm.random_pairs > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut violations = 0usize;
        let mut worst = f64::INFINITY;
        let mut sweep = Table::new("bm_random", &["lambda", "area_a", "area_b", "area_sum", "excess"]);
        for k in 0..config.bm.random_pairs {
            let a = RegionSpec::random(&mut rng).rasterize(h)?;
            let b = RegionSpec::random(&mut rng).rasterize(h)?;
            for &lambda in &config.bm.lambdas {
                let sum = minkowski_with(&a, &b, lambda, h, SumKind::Horo, &opts)?.region;
                let (lhs, rhs) = bm_sides(&a, &b, &sum, lambda);
                let excess = lhs / rhs - 1.0;
                worst = worst.min(excess);
                if excess < -slack {
                    violations += 1;
                }
                sweep.push(format!("random{k}"), vec![lambda, a.area(), b.area(), lhs, excess]);
            }
        }
        report.tables.push(sweep);
        report.verdict(
            format!("{} random pairs: violations beyond slack", config.bm.random_pairs),
            violations == 0,
            violations as f64,
            slack,
            format!("smallest relative excess {worst:.6}"),
        );
    }
    report.tables.push(table);
    Ok(report)
}

fn build_function(spec: &FunctionSpec, h: f64) -> Result<DiscFunction> {
    let region = rasterize_at(&spec.region, h)?;
    match &spec.profile {
        Profile::Indicator => Ok(DiscFunction::indicator(region)),
        Profile::Gaussian { center, sigma } => {
            if sigma.is_nan() || *sigma <= 0.0 {
                return Err(Error::InvalidParameter(format!("gaussian sigma must be > 0, got {sigma}")));
            }
            let c = DiscPoint::from_xy(center[0], center[1])?;
            DiscFunction::from_fn(region, |p| (-hyp_dist(p, c).powi(2) / (2.0 * sigma * sigma)).exp())
        }
    }
}

/// One-dimensional pair with the lower density to the right of the upper one:
/// no admissible pairs, so `H = 0` and the conclusion must fail.
pub fn negative_control_1d(step: f64) -> Result<(Density1D, Density1D)> {
    let f = Density1D::with_step(2.0, 3.0, step, |_| 1.0)?;
    let g = Density1D::with_step(0.0, 1.0, step, |_| 1.0)?;
    Ok((f, g))
}

pub fn cmd_verify_bbl(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(Experiment::VerifyBbl, config);
    let bbl = &config.bbl;
    let tol = config.tolerances.clone();

    if bbl.instances_1d > 0 {
        if bbl.p_1d.is_empty() {
            return Err(Error::InvalidParameter("bbl.p_1d must list at least one exponent".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut table = Table::new("bbl_1d", &["lambda", "p", "int_f", "int_g", "lhs", "rhs", "dominance_gap"]);
        let mut violations = 0usize;
        for k in 0..bbl.instances_1d {
            let (f, g) = random_dominated_pair(&mut rng, bbl.step_1d)?;
            let lambda = rng.random_range(0.05..0.95);
            let p = bbl.p_1d[k % bbl.p_1d.len()].value();
            let h = sup_convolution_1d(&f, &g, lambda, p)?;
            let rep = verify_dirbbl(&f, &g, &h, lambda, p, tol.bbl_1d)?;
            if rep.status != BblStatus::Pass {
                violations += 1;
            }
            table.push(format!("instance{k}"), vec![lambda, p, rep.int_f, rep.int_g, rep.lhs, rep.rhs, rep.dominance_gap]);
        }
        report.tables.push(table);
        report.verdict(
            format!("{} one-dimensional directed instances", bbl.instances_1d),
            violations == 0,
            violations as f64,
            tol.bbl_1d,
            "instances whose status is not pass",
        );
    }

    if bbl.negative_control {
        let (f, g) = negative_control_1d(bbl.step_1d)?;
        let h = sup_convolution_1d(&f, &g, 0.5, 1.0)?;
        let rep = verify_dirbbl(&f, &g, &h, 0.5, 1.0, tol.bbl_1d)?;
        report.verdict(
            "negative control without dominance fails",
            rep.status == BblStatus::DominanceViolated && !rep.conclusion_holds,
            rep.lhs - rep.rhs,
            tol.bbl_1d,
            "lhs - rhs of the dominance-violating instance; the conclusion must fail",
        );
    }

    if !bbl.cases.is_empty() {
        let h = config.grid_h;
        let slack = slack_verdict(&mut report, h)?;
        let mut table = Table::new("bbl", &["lambda", "p", "q", "int_f", "int_g", "int_h", "rhs"]);
        for (k, case) in bbl.cases.iter().enumerate() {
            let label = case.label.clone().unwrap_or_else(|| format!("case{k}"));
            let f = build_function(&case.f, h)?;
            let g = build_function(&case.g, h)?;
            let hf = sup_convolution(&f, &g, case.lambda, case.p, h, &config.sum_options())?;
            let (int_f, int_g, int_h) = (f.integral(), g.integral(), hf.integral());
            let q = case.p.q();
            let rhs = crate::meanbbl::p_mean(int_f, int_g, case.lambda, q);
            table.push(label.clone(), vec![case.lambda, case.p.value(), q, int_f, int_g, int_h, rhs]);
            report.verdict(
                format!("{label}: horocyclic borell-brascamp-lieb"),
                int_h >= rhs * (1.0 - slack),
                int_h / rhs - 1.0,
                slack,
                "relative excess of int h over M_q(int f, int g); must be >= -slack",
            );
        }
        report.tables.push(table);
    }
    Ok(report)
}

pub fn cmd_scaling(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(Experiment::Scaling, config);
    let h = config.grid_h;
    let tol = config.tolerances.clone();
    let origin = DiscPoint::from_xy(config.scaling.origin[0], config.scaling.origin[1])?;
    let mut table = Table::new("scaling", &["t", "area_b", "area_tb", "ratio", "expected", "relative_error"]);
    for (k, spec) in config.scaling.regions.iter().enumerate() {
        let b = rasterize_at(spec, h)?;
        for &t in &config.scaling.factors {
            let tb = dilate_region(origin, &b, t, h)?;
            let ratio = tb.area() / b.area();
            let err = (ratio / (t * t) - 1.0).abs();
            table.push(format!("region{k} t={t}"), vec![t, b.area(), tb.area(), ratio, t * t, err]);
            report.verdict(
                format!("region{k}: area ratio at t={t}"),
                err <= tol.scaling,
                err,
                tol.scaling,
                "relative error of area(tB)/area(B) against t^2",
            );
            if k == 0 && t == *config.scaling.factors.last().unwrap_or(&1.0) {
                report.svg("dilation.svg", &[(&tb, "#ff7f0e"), (&b, "#1f77b4")]);
            }
        }
    }

    if !config.scaling.succinct.is_empty() {
        let slack = slack_verdict(&mut report, h)?;
        let mut succ = Table::new("succinct", &["area_a", "area_b", "area_ab", "sqrt_lhs", "sqrt_rhs"]);
        for (k, pair) in config.scaling.succinct.iter().enumerate() {
            let label = pair_label(pair, k);
            let a = rasterize_at(&pair.a, h)?;
            let b = rasterize_at(&pair.b, h)?;
            let mid = minkowski_with(&a, &b, 0.5, h, SumKind::Horo, &config.sum_options())?.region;
            let ab = dilate_region(origin, &mid, 2.0, h)?;
            let rhs = a.area().sqrt() + b.area().sqrt();
            let lhs = ab.area().sqrt();
            succ.push(label.clone(), vec![a.area(), b.area(), ab.area(), lhs, rhs]);
            report.verdict(
                format!("{label}: succinct inequality"),
                lhs * lhs >= rhs * rhs * (1.0 - slack),
                (lhs / rhs).powi(2) - 1.0,
                slack,
                "relative area excess of [A:B] over (sqrt A + sqrt B)^2; must be >= -slack",
            );
            if pair.expect_equality {
                let err = (lhs / rhs - 1.0).abs();
                report.verdict(
                    format!("{label}: succinct equality"),
                    err <= tol.equality,
                    err,
                    tol.equality,
                    "relative error of sqrt areas",
                );
            }
        }
        report.tables.push(succ);
    }
    report.tables.push(table);
    Ok(report)
}

/// Radius of the hyperbolic disc of the given area.
pub fn radius_for_area(area: f64) -> f64 {
    2.0 * (area / (4.0 * std::f64::consts::PI)).sqrt().asinh()
}

pub fn cmd_bottleneck(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(Experiment::Bottleneck, config);
    let bc = &config.bottleneck;
    let h = bc.grid_h.unwrap_or(config.grid_h);
    let slack = slack_verdict(&mut report, h)?;
    let r = radius_for_area(bc.disc_area);
    let opts = config.sum_options();
    let mut table = Table::new("bottleneck", &["separation", "area_a", "area_b", "geodesic_area", "horocyclic_area", "bm_bound"]);
    let mut geo_areas = Vec::new();
    for &d in &bc.separations {
        let ca = DiscPoint::from_polar(0.5 * d, std::f64::consts::PI)?;
        let cb = DiscPoint::from_polar(0.5 * d, 0.0)?;
        let a = RegionSpec::disc(ca.x(), ca.y(), r).rasterize(h)?;
        let b = RegionSpec::disc(cb.x(), cb.y(), r).rasterize(h)?;
        let geo = minkowski_with(&a, &b, bc.lambda, h, SumKind::Geodesic, &opts)?.region;
        let horo = minkowski_with(&a, &b, bc.lambda, h, SumKind::Horo, &opts)?.region;
        let (lhs, rhs) = bm_sides(&a, &b, &horo, bc.lambda);
        table.push(format!("d={d}"), vec![d, a.area(), b.area(), geo.area(), lhs, rhs]);
        report.verdict(
            format!("horocyclic bound at separation {d}"),
            lhs >= rhs * (1.0 - slack),
            lhs / rhs - 1.0,
            slack,
            "relative area excess of the horocyclic sum over the bound; must be >= -slack",
        );
        report.svg(format!("bottleneck_d{d}.svg"), &[(&a, "#1f77b4"), (&b, "#2ca02c"), (&horo, "#ff7f0e"), (&geo, "#d62728")]);
        geo_areas.push(geo.area());
    }
    let decreasing = geo_areas.windows(2).all(|w| w[1] < w[0]);
    let worst_step = geo_areas.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    report.verdict(
        "geodesic midpoint areas strictly decreasing",
        decreasing && !geo_areas.is_empty(),
        worst_step,
        1.0,
        "largest ratio of consecutive geodesic areas; must be < 1",
    );
    report.tables.push(table);
    Ok(report)
}

fn build_instance(inst: &NeedleInstance, h: f64) -> Result<MassInstance> {
    let mut parts = Vec::new();
    for arc in &inst.arcs {
        parts.push(MassInstance::on_arc(&arc.horocycle()?, arc.t_start, arc.t_end, arc.n)?);
    }
    if let Some(pair) = &inst.regions {
        parts.push(MassInstance::from_regions(&rasterize_at(&pair.a, h)?, &rasterize_at(&pair.b, h)?)?);
    }
    if let Some(path) = &inst.file {
        parts.push(MassInstance::load(path)?);
    }
    if parts.is_empty() {
        return Err(Error::InvalidParameter("needle instance needs arcs, regions or a file".into()));
    }
    let mut points = Vec::new();
    let (mut rho1, mut rho2) = (Vec::new(), Vec::new());
    for p in parts {
        points.extend_from_slice(p.points());
        rho1.extend_from_slice(p.rho1());
        rho2.extend_from_slice(p.rho2());
    }
    MassInstance::new(points, rho1, rho2)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn cmd_needles(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new(Experiment::Needles, config);
    let nc = &config.needles;
    let tol = config.tolerances.clone();
    let mut table = Table::new(
        "needles",
        &[
            "points",
            "w1",
            "plan_cost",
            "feasibility",
            "strain_tol",
            "pairs",
            "components",
            "rays",
            "component_balance",
            "worst_balance",
            "worst_suffix",
            "uncovered",
        ],
    );
    for (k, spec) in nc.instances.iter().enumerate() {
        let label = spec.label.clone().unwrap_or_else(|| format!("instance{k}"));
        let inst = build_instance(spec, config.grid_h)?;
        let sol = solve_kantorovich_with(&inst, nc.point_cap)?;
        let eps = nc.strain_tol.unwrap_or_else(|| default_strain_tol(&sol.dist));
        let pairs = strain_pairs(&sol.potential, &sol.dist, eps);
        let rays = extract_rays(&inst, &sol, &pairs, tol.fit);
        let bal = mass_balance(&inst, &rays, tol.balance);
        let comp = component_balance(&inst, &sol.potential, &pairs, tol.balance);
        let cov = coverage(&inst, &pairs, &rays);
        let comp_worst = comp.rays.iter().map(|r| r.residual.max(r.worst_suffix_excess)).fold(0.0, f64::max);
        let worst_balance = bal.rays.iter().map(|r| r.residual).fold(0.0, f64::max);
        let worst_suffix = bal.rays.iter().map(|r| r.worst_suffix_excess).fold(0.0, f64::max);
        table.push(
            label.clone(),
            vec![
                inst.len() as f64,
                sol.w1,
                sol.primal_cost,
                sol.feasibility_residual,
                eps,
                pairs.len() as f64,
                comp.rays.len() as f64,
                rays.len() as f64,
                comp_worst,
                worst_balance,
                worst_suffix,
                cov.uncovered_fraction,
            ],
        );

        let gap = (sol.w1 - sol.primal_cost).abs();
        report.verdict(format!("{label}: duality gap"), gap <= tol.duality, gap, tol.duality, "|dual objective - plan cost|");
        report.verdict(
            format!("{label}: potential feasibility"),
            sol.feasibility_residual <= tol.feasibility,
            sol.feasibility_residual,
            tol.feasibility,
            "max (u_j - u_i - d_ij)",
        );
        if !spec.arcs.is_empty() && spec.regions.is_none() && spec.file.is_none() {
            report.verdict(
                format!("{label}: ray count"),
                rays.len() == spec.arcs.len(),
                rays.len() as f64,
                0.0,
                format!("expected {} rays", spec.arcs.len()),
            );
            let mut worst = 0.0f64;
            for arc in &spec.arcs {
                let truth = arc.horocycle()?;
                let err = rays
                    .iter()
                    .map(|r| (r.horocycle.lambda() - truth.lambda()).abs().max((r.horocycle.omega() - truth.omega()).norm()))
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(err);
            }
            report.verdict(
                format!("{label}: ray parameters"),
                worst <= tol.ray_params,
                worst,
                tol.ray_params,
                "largest (lambda, omega) error against the generating horocycles",
            );
            report.verdict(
                format!("{label}: ray mass balance"),
                bal.violations == 0,
                worst_balance.max(worst_suffix),
                tol.balance,
                format!("{} of {} rays violate per-ray or positive-end balance", bal.violations, rays.len()),
            );
        }
        report.verdict(
            format!("{label}: component mass balance"),
            comp.violations == 0,
            comp_worst,
            tol.balance,
            format!("{} of {} strain components violate balance or the positive-end inequality", comp.violations, comp.rays.len()),
        );
        report.verdict(
            format!("{label}: coverage"),
            cov.uncovered_fraction <= tol.coverage,
            cov.uncovered_fraction,
            tol.coverage,
            "unbalanced mass that is neither on a ray nor loose",
        );
        let ray_report = serde_json::json!({
            "label": label,
            "w1": sol.w1,
            "strain_tol": eps,
            "rays": rays,
            "balance": bal,
            "component_balance": comp,
            "coverage": cov,
        });
        report.artifacts.push(Artifact { name: format!("{label}_rays.json"), contents: serde_json::to_string_pretty(&ray_report)? + "\n" });
    }

    let mut jac =
        Table::new("jacobian", &["y0", "slope", "intercept", "expected_slope", "expected_intercept", "fit_residual", "sign_constant"]);
    for (k, case) in nc.families.iter().enumerate() {
        let label = case.label.clone().unwrap_or_else(|| format!("family{k}"));
        let grid = linspace(case.t_grid.0, case.t_grid.1, case.t_grid.2);
        let fam = case.family;
        let rep = jacobian_affine_check(|y| fam.eval(y), case.y0, &grid)?;
        let sign = sign_constancy_check(&rep);
        jac.push(
            label.clone(),
            vec![
                rep.y0,
                rep.slope,
                rep.intercept,
                rep.expected_slope,
                rep.expected_intercept,
                rep.fit_residual,
                f64::from(u8::from(sign.constant)),
            ],
        );
        let coef = rep.slope_error.max(rep.intercept_error);
        report.verdict(
            format!("{label}: jacobian coefficients"),
            coef <= tol.jacobian_coef,
            coef,
            tol.jacobian_coef,
            "max slope/intercept error",
        );
        report.verdict(
            format!("{label}: jacobian is affine"),
            rep.fit_residual <= tol.jacobian_fit,
            rep.fit_residual,
            tol.jacobian_fit,
            "affine fit residual relative to range",
        );
    }
    if !jac.rows.is_empty() {
        report.tables.push(jac);
    }
    report.tables.push(table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bm() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "grid_h": 0.02,
                "bm": {
                    "lambdas": [0.5],
                    "pairs": [{"a": {"model": "poincare-disc", "discs": [{"cx": 0.0, "cy": 0.0, "r": 0.5}]},
                               "b": {"model": "poincare-disc", "discs": [{"cx": 0.0, "cy": 0.0, "r": 1.0}]},
                               "expect_equality": true}],
                    "random_pairs": 2
                },
                "tolerances": {"equality": 0.05, "max_slack": 0.2}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c.grid_h, 0.01);
        assert_eq!(c.tolerances.scaling, 0.02);
        assert_eq!(c.bottleneck.separations, vec![2.0, 4.0, 6.0, 8.0]);
        assert!(ExperimentConfig::from_json(r#"{"grid": 0.1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bbl": {"cases": [{"f": {"region": {"discs": [{"cx":0,"cy":0,"r":1}]}, "profile": {"kind": "indicator"}}, "g": {"region": {"discs": [{"cx":0,"cy":0,"r":1}]}, "profile": {"kind": "indicator"}}, "p": -0.7, "lambda": 0.5}]}}"#).is_err());
    }

    #[test]
    fn bm_report_is_deterministic_and_passes() {
        let c = small_bm();
        let r1 = run(Experiment::VerifyBm, &c).unwrap();
        let r2 = run(Experiment::VerifyBm, &c).unwrap();
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
        assert!(!r1.to_json().unwrap().contains("wall_clock"));
        assert!(r1.passed(), "{:#?}", r1.verdicts);
        assert!(r1.verdicts.iter().all(|v| v.tolerance.is_finite()));
        assert!(r1.verdicts_csv().unwrap().starts_with("name,passed,measured,tolerance,detail\n"));
    }

    #[test]
    fn writes_files() {
        let mut c = small_bm();
        c.bm.random_pairs = 0;
        c.output.svg = true;
        let r = run(Experiment::VerifyBm, &c).unwrap();
        let dir = std::env::temp_dir().join(format!("horobm-harness-{}", std::process::id()));
        let files = r.write(&dir).unwrap();
        let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
        for want in ["report.json", "verdicts.csv", "bm.csv", "timing.json", "pair0_horocyclic.svg", "pair0_geodesic.svg", "pair0_sum.json"]
        {
            assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
        }
        let export: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pair0_sum.json")).unwrap()).unwrap();
        assert!(export["area"].as_f64().unwrap() > 0.0);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn bbl_small() {
        let c = ExperimentConfig::from_json(
            r#"{
                "grid_h": 0.04,
                "tolerances": {"max_slack": 0.3},
                "bbl": {
                    "instances_1d": 8,
                    "cases": [{
                        "f": {"region": {"discs": [{"cx": 0.0, "cy": 0.0, "r": 0.8}]}, "profile": {"kind": "gaussian", "center": [0.0, 0.0], "sigma": 0.5}},
                        "g": {"region": {"discs": [{"cx": 0.2, "cy": 0.1, "r": 0.6}]}, "profile": {"kind": "indicator"}},
                        "p": 0, "lambda": 0.4
                    }]
                }
            }"#,
        )
        .unwrap();
        let r = run(Experiment::VerifyBbl, &c).unwrap();
        assert!(r.passed(), "{:#?}", r.verdicts);
        assert!(r.verdicts.iter().any(|v| v.name.contains("negative control")));
    }

    #[test]
    fn scaling_small() {
        let c = ExperimentConfig::from_json(
            r#"{
                "grid_h": 0.02,
                "tolerances": {"scaling": 0.08, "max_slack": 0.2, "equality": 0.08},
                "scaling": {
                    "regions": [{"discs": [{"cx": 0.1, "cy": 0.0, "r": 0.9}]}],
                    "factors": [0.5, 2.0],
                    "succinct": [{"a": {"discs": [{"cx": 0.0, "cy": 0.0, "r": 0.5}]}, "b": {"discs": [{"cx": 0.0, "cy": 0.0, "r": 0.8}]}, "expect_equality": true}]
                }
            }"#,
        )
        .unwrap();
        let r = run(Experiment::Scaling, &c).unwrap();
        assert!(r.passed(), "{:#?}", r.verdicts);
    }

    #[test]
    fn needles_small() {
        let c = ExperimentConfig::from_json(
            r#"{
                "needles": {
                    "instances": [{"label": "arc", "arcs": [{"lambda": 0.6, "t0": 0.0, "phi": 1.0, "t_start": -0.3, "t_end": 0.3, "n": 16}]}],
                    "families": [{"family": {"lambda": [1, 0, 0], "t0": [0, 0, 0], "phi": [0, 1, 0]}, "y0": 0.0, "t_grid": [0.1, 2.0, 20]}]
                }
            }"#,
        )
        .unwrap();
        let r = run(Experiment::Needles, &c).unwrap();
        assert!(r.passed(), "{:#?}", r.verdicts);
        assert!(r.artifacts.iter().any(|a| a.name == "arc_rays.json"));
    }

    #[test]
    fn radius_for_unit_area() {
        let r = radius_for_area(1.0);
        assert!((crate::hypdisc::disc_area(r) - 1.0).abs() < 1e-12);
    }
}
