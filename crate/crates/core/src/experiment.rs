//! Experiment configuration and runners behind the command-line front end.
//!
//! A run produces named text artifacts (CSV tables and JSON summaries); the
//! caller decides where they are written. Identical configurations give
//! identical bytes regardless of the worker count.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backward::{cost_per_path, solve_backward, Estimate};
use crate::error::{Error, Result};
use crate::grid::{caputo_left, rl_derivative_left, rl_integral_left, GridFunction, TimeGrid, WeightedGridFunction};
use crate::lq::{block_control, brute_force_optimize, cell_cost_rates, finite_difference_variation, first_variation_lq, ibp_pair, solve_lq, solve_lq_from, LqSolution, LqSpec};
use crate::model::{ControlBox, ControlProcess, ModelSpec, Terminal};
use crate::noise::{generate_paths, NoiseSpec, PathEnsemble};
use crate::quadrature::integrate_pieces;
use crate::resolvent::{build_resolvents, GeneratorSpec, ResolventTable, R_MAX};
use crate::smp::{maximum_principle_scan, moment_scaling_experiment, MarginReport, ScalingReport, SlopeFit};
use crate::special::{gamma_fn, mittag_leffler, wright_density, wright_moment, FracOrder};

pub const VERSION: &str = match option_env!("FBSEE_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OperatorsCheck,
    SmpScaling,
    LqSolve,
    LqVerify,
    IbpCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::OperatorsCheck => "operators-check",
            ExperimentKind::SmpScaling => "smp-scaling",
            ExperimentKind::LqSolve => "lq-solve",
            ExperimentKind::LqVerify => "lq-verify",
            ExperimentKind::IbpCheck => "ibp-check",
        }
    }
}

/// Model data; matrices are lists of rows. Defaults give the scalar benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub alpha: f64,
    pub horizon: f64,
    pub a: Vec<Vec<f64>>,
    pub b_op: Vec<Vec<f64>>,
    /// One coupling matrix per noise mode.
    pub c_ops: Vec<Vec<Vec<f64>>>,
    pub g: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    pub xi: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            horizon: 1.0,
            a: vec![vec![-1.0]],
            b_op: vec![vec![1.0]],
            c_ops: vec![vec![vec![0.5]]],
            g: vec![vec![1.0]],
            pi: vec![vec![1.0]],
            xi: vec![1.0],
            eigenvalues: vec![1.0],
            control_lower: vec![-3.0],
            control_upper: vec![3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub quad_nodes: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub epsilons: Vec<f64>,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            n_steps: 256,
            n_paths: 10_000,
            quad_nodes: 64,
            tol: 1e-8,
            max_iters: 100,
            epsilons: (0..6).map(|k| 0.2 * 0.05f64.powf(k as f64 / 5.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SmpConfig {
    pub t0: f64,
    pub v: Vec<f64>,
    pub n_test_controls: usize,
    /// Constant added to the optimal control for the negative-margin probe.
    pub shift: f64,
    /// Amplitude of the `β sin x` term of the nonlinear remainder run, taken
    /// around the zero control; 0 skips it.
    pub nonlinear_beta: f64,
}

impl Default for SmpConfig {
    fn default() -> Self {
        Self { t0: 0.5, v: vec![2.0], n_test_controls: 100, shift: 0.5, nonlinear_beta: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub blocks: usize,
    pub n_directions: usize,
    /// Blocks of the random deterministic directions.
    pub direction_blocks: usize,
    pub perturbation_sizes: Vec<f64>,
    pub fd_step: f64,
    pub fd_shift: f64,
    pub fd_directions: usize,
    /// Second starting value of `E x_0` for the uniqueness probe.
    pub alt_start: Vec<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            n_directions: 20,
            direction_blocks: 8,
            perturbation_sizes: vec![-0.3, -0.1, 0.1, 0.3],
            fd_step: 1e-3,
            fd_shift: 0.5,
            fd_directions: 3,
            alt_start: vec![5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct IbpConfig {
    pub levels: Vec<usize>,
}

impl Default for IbpConfig {
    fn default() -> Self {
        Self { levels: vec![256, 512, 1024] }
    }
}

fn default_seed() -> u64 {
    2024
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub smp: SmpConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub ibp: IbpConfig,
}

fn config_error(field: &str, detail: impl Into<String>) -> Error {
    Error::Config { field: field.into(), detail: detail.into() }
}

/// Parses and validates a JSON document; errors name the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        config_error(&path, format!("{inner}"))
    })?;
    de.end().map_err(|e| config_error(".", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// JSON schema of the configuration document.
pub fn schema() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}

fn matrix(field: &str, rows: &[Vec<f64>], shape: Option<(usize, usize)>) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(config_error(field, "matrix must be a non-empty list of equal-length rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(config_error(field, "matrix entries must be finite"));
    }
    if let Some((er, ec)) = shape {
        if (r, c) != (er, ec) {
            return Err(config_error(field, format!("expected a {er}x{ec} matrix, got {r}x{c}")));
        }
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let n = &self.numerics;
        if n.n_steps < 2 {
            return Err(config_error("numerics.n_steps", "must be at least 2"));
        }
        if n.n_paths < 2 {
            return Err(config_error("numerics.n_paths", "must be at least 2"));
        }
        if n.quad_nodes < 32 {
            return Err(config_error("numerics.quad_nodes", "must be at least 32"));
        }
        if !(n.tol > 0.0) {
            return Err(config_error("numerics.tol", "must be positive"));
        }
        if n.max_iters == 0 {
            return Err(config_error("numerics.max_iters", "must be at least 1"));
        }
        if n.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(config_error("numerics.epsilons", "must be positive"));
        }
        self.lq_spec(n.n_steps, self.seed)?;
        let d = self.model.b_op[0].len();
        if self.experiment == ExperimentKind::SmpScaling {
            let s = &self.smp;
            let lo = n.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = n.epsilons.iter().copied().fold(0.0, f64::max);
            if n.epsilons.len() < 5 || hi < 10.0 * lo {
                return Err(config_error("numerics.epsilons", "need at least 5 values spanning a decade"));
            }
            if !(s.t0 >= 0.0 && s.t0 + hi <= self.model.horizon) {
                return Err(config_error("smp.t0", "spikes must fit inside the horizon"));
            }
            if s.v.len() != d {
                return Err(config_error("smp.v", format!("expected {d} components")));
            }
            if s.n_test_controls == 0 {
                return Err(config_error("smp.n_test_controls", "must be at least 1"));
            }
        }
        if self.experiment == ExperimentKind::LqVerify {
            let v = &self.verify;
            if v.blocks == 0 || !n.n_steps.is_multiple_of(v.blocks) {
                return Err(config_error("verify.blocks", "must divide numerics.n_steps"));
            }
            if v.direction_blocks == 0 {
                return Err(config_error("verify.direction_blocks", "must be at least 1"));
            }
            if !(v.fd_step > 0.0) {
                return Err(config_error("verify.fd_step", "must be positive"));
            }
            if v.alt_start.len() != self.model.a.len() {
                return Err(config_error("verify.alt_start", "must have the state dimension"));
            }
        }
        if self.experiment == ExperimentKind::IbpCheck {
            let l = &self.ibp.levels;
            if l.len() < 2 || l.iter().any(|&k| k < 2) || l.windows(2).any(|w| w[1] <= w[0]) {
                return Err(config_error("ibp.levels", "need at least two increasing grid sizes"));
            }
        }
        Ok(())
    }

    /// The LQ specification on an `n_steps` grid with noise seed `seed`.
    pub fn lq_spec(&self, n_steps: usize, seed: u64) -> Result<LqSpec> {
        let m = &self.model;
        let alpha = FracOrder::for_solver(m.alpha).map_err(|e| config_error("model.alpha", e.to_string()))?;
        let grid = TimeGrid::new(m.horizon, n_steps).map_err(|e| config_error("model.horizon", e.to_string()))?;
        let a = matrix("model.a", &m.a, None)?;
        let dim = a.nrows();
        if a.ncols() != dim {
            return Err(config_error("model.a", "must be square"));
        }
        let b_op = matrix("model.b_op", &m.b_op, None)?;
        if b_op.nrows() != dim {
            return Err(config_error("model.b_op", format!("must have {dim} rows")));
        }
        let d = b_op.ncols();
        if m.c_ops.len() != m.eigenvalues.len() {
            return Err(config_error("model.c_ops", "need one matrix per noise eigenvalue"));
        }
        let c_ops = m.c_ops.iter().map(|c| matrix("model.c_ops", c, Some((dim, dim)))).collect::<Result<Vec<_>>>()?;
        let g = matrix("model.g", &m.g, Some((dim, dim)))?;
        let pi = matrix("model.pi", &m.pi, Some((d, d)))?;
        if m.xi.len() != dim || m.xi.iter().any(|v| !v.is_finite()) {
            return Err(config_error("model.xi", format!("must have {dim} finite entries")));
        }
        let noise = NoiseSpec::new(m.eigenvalues.clone(), seed).map_err(|e| config_error("model.eigenvalues", e.to_string()))?;
        if m.control_lower.len() != d {
            return Err(config_error("model.control_lower", format!("must have {d} entries")));
        }
        let control_box = ControlBox::new(m.control_lower.clone(), m.control_upper.clone()).map_err(|e| config_error("model.control_upper", e.to_string()))?;
        let spec = LqSpec {
            alpha,
            grid,
            a,
            b_op,
            c_ops,
            g,
            pi: vec![pi],
            xi: Terminal::constant(DVector::from_column_slice(&m.xi), m.eigenvalues.len()),
            noise,
            control_box,
        };
        spec.validate().map_err(|e| config_error("model", e.to_string()))?;
        Ok(spec)
    }
}

/// Named text artifacts of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn estimate_json(e: &Estimate) -> serde_json::Value {
    json!({ "value": e.value, "standard_error": e.standard_error })
}

fn slope_json(s: &SlopeFit) -> serde_json::Value {
    match s {
        SlopeFit::Fitted { slope, half_width, points } => json!({ "slope": slope, "half_width": half_width, "points": points }),
        SlopeFit::Inconclusive { points } => json!({ "inconclusive": true, "points": points }),
    }
}

/// Runs the configured experiment and returns its artifacts, manifest included.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut files = match cfg.experiment {
        ExperimentKind::OperatorsCheck => run_operators_check(cfg)?,
        ExperimentKind::SmpScaling => run_smp_scaling(cfg)?,
        ExperimentKind::LqSolve => run_lq_solve(cfg)?,
        ExperimentKind::LqVerify => run_lq_verify(cfg)?,
        ExperimentKind::IbpCheck => run_ibp_check(cfg)?,
    };
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    let manifest = json!({
        "version": VERSION,
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "files": names,
    });
    files.push(("manifest.json".into(), pretty(&manifest)));
    Ok(RunOutput { files })
}

/// One line of the operator self-check table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: &'static str,
    pub case: String,
    pub value: f64,
    pub reference: f64,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(suite: &'static str, case: String, value: f64, reference: f64, error: f64, tolerance: f64) -> Self {
        Self { suite, case, value, reference, error, tolerance, pass: error <= tolerance }
    }
}

/// Wright-density quadrature against the analytic moments, and the unit-order
/// Mittag-Leffler function against `exp`.
pub fn special_function_checks() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let breaks = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 12.0, R_MAX];
    for alpha in [0.55, 0.75, 0.9] {
        let order = FracOrder::new(alpha)?;
        for gamma in [0.0, 0.5, 1.0, 2.0] {
            let integral = integrate_pieces(|r| r.powf(gamma) * wright_density(order, r).unwrap_or(f64::NAN), &breaks, 1e-15, 1e-12);
            let exact = wright_moment(order, gamma)?;
            rows.push(CheckRow::new(
                "wright-moment",
                format!("alpha={alpha} gamma={gamma}"),
                integral.value,
                exact,
                (integral.value - exact).abs() / exact,
                1e-6,
            ));
        }
    }
    for k in -10..=10 {
        let z = k as f64;
        let v = mittag_leffler(1.0, 1.0, z)?;
        rows.push(CheckRow::new("mittag-leffler-exp", format!("z={z}"), v, z.exp(), (v - z.exp()).abs() / z.exp(), 1e-9));
    }
    Ok(rows)
}

fn max_error(approx: &GridFunction, exact: impl Fn(f64) -> f64, from: usize) -> (f64, f64) {
    let grid = approx.grid();
    (from..=grid.n_steps()).fold((0.0f64, 0.0f64), |(err, scale), i| {
        let e = exact(grid.t(i));
        (err.max((approx.value(i)[0] - e).abs()), scale.max(e.abs()))
    })
}

fn scaled_error(approx: &GridFunction, exact: impl Fn(f64) -> f64) -> f64 {
    let (err, scale) = max_error(approx, exact, 0);
    err / scale
}

/// Errors below this are roundoff and exempt from the refinement ordering.
const ROUNDOFF_ERROR: f64 = 1e-12;

/// Caputo monomial identities on a refinement ladder and the RL
/// integral/derivative composition.
pub fn fractional_operator_checks(alpha: f64) -> Result<Vec<CheckRow>> {
    let order = FracOrder::new(alpha)?;
    let ladder = [128usize, 256, 512, 1024];
    let mut rows = Vec::new();
    for p in [1i32, 2, 3] {
        let coef = gamma_fn(p as f64 + 1.0)? / gamma_fn(p as f64 + 1.0 - alpha)?;
        let errors: Vec<f64> = ladder
            .iter()
            .map(|&n| {
                let grid = TimeGrid::new(1.0, n)?;
                let f = GridFunction::scalar(&grid, |t| t.powi(p))?;
                Ok(scaled_error(&caputo_left(&f, order)?, |t| coef * t.powf(p as f64 - alpha)))
            })
            .collect::<Result<_>>()?;
        let monotone = errors.windows(2).all(|w| w[1] < w[0] || w[0].max(w[1]) < ROUNDOFF_ERROR);
        for (&n, &e) in ladder.iter().zip(&errors) {
            let mut row = CheckRow::new("caputo-monomial", format!("p={p} n={n}"), e, 0.0, e, if n == 512 { 5e-3 } else { f64::INFINITY });
            row.pass &= monotone;
            rows.push(row);
        }
    }
    // A nonzero value at the origin leaves an O(i^{-1-α}) error at node i, so
    // that case is measured past t = 0.05.
    let grid = TimeGrid::new(1.0, 512)?;
    for (case, shift, from) in [("f(0)=0 n=512", 0.0, 2), ("f(0)=1 t>=0.05 n=512", 1.0, grid.nearest_index(0.05))] {
        let smooth = |t: f64| (2.0 * t).sin() + t * t + shift;
        let f = GridFunction::scalar(&grid, smooth)?;
        let back = rl_derivative_left(&rl_integral_left(&f, alpha)?, order)?;
        let (err, _) = max_error(&back, smooth, from);
        rows.push(CheckRow::new("rl-composition", case.into(), err, 0.0, err, 5e-3));
    }
    Ok(rows)
}

/// A fixed stable 4×4 generator: a ChaCha-drawn matrix shifted left of the
/// imaginary axis.
pub fn random_stable_generator(seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(4, 4, |_, _| 2.0 * unit(&mut rng) - 1.0);
    let shift = raw.clone().symmetric_part_max() + 0.5;
    raw - DMatrix::identity(4, 4) * shift
}

trait SymmetricPartMax {
    fn symmetric_part_max(self) -> f64;
}

impl SymmetricPartMax for DMatrix<f64> {
    fn symmetric_part_max(self) -> f64 {
        ((&self + self.transpose()) * 0.5).symmetric_eigenvalues().max()
    }
}

fn unit(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Norm bounds for three generators and three orders, and scalar `S_α`
/// against the Mittag-Leffler function.
pub fn resolvent_checks(quad_nodes: usize) -> Result<Vec<CheckRow>> {
    let generators = [
        ("zero", DMatrix::zeros(2, 2)),
        ("diag(-1,-2)", DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]))),
        ("random-stable-4x4", random_stable_generator(7)),
    ];
    let grid = TimeGrid::new(1.0, 64)?;
    let mut rows = Vec::new();
    for alpha in [0.6, 0.75, 0.9] {
        let order = FracOrder::new(alpha)?;
        for (name, a) in &generators {
            let table = build_resolvents(&GeneratorSpec::new(a.clone())?, &grid, order, quad_nodes)?;
            let violations = table.bound_violations(1e-3)?;
            rows.push(CheckRow::new("resolvent-bounds", format!("{name} alpha={alpha}"), violations.len() as f64, 0.0, violations.len() as f64, 0.0));
        }
        let table = build_resolvents(&GeneratorSpec::scalar(-1.0)?, &grid, order, quad_nodes)?;
        let mut worst = 0.0f64;
        let (mut at, mut reference) = (0.0, 0.0);
        for (i, s) in table.s_alpha.iter().enumerate() {
            let exact = mittag_leffler(alpha, 1.0, -grid.t(i).powf(alpha))?;
            let e = (s[(0, 0)] - exact).abs() / exact.abs();
            if e >= worst {
                worst = e;
                at = s[(0, 0)];
                reference = exact;
            }
        }
        rows.push(CheckRow::new("resolvent-mittag-leffler", format!("a=-1 alpha={alpha}"), at, reference, worst, 1e-5));
    }
    Ok(rows)
}

fn check_csv(rows: &[CheckRow]) -> String {
    csv(
        &["suite", "case", "value", "reference", "error", "tolerance", "pass"],
        rows.iter().map(|r| {
            vec![r.suite.to_string(), r.case.clone(), num(r.value), num(r.reference), num(r.error), num(r.tolerance), r.pass.to_string()]
        }),
    )
}

fn run_operators_check(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let mut rows = special_function_checks()?;
    rows.extend(fractional_operator_checks(cfg.model.alpha)?);
    rows.extend(resolvent_checks(cfg.numerics.quad_nodes)?);
    let failed = rows.iter().filter(|r| !r.pass).count();
    let summary = json!({ "checks": rows.len(), "failed": failed });
    Ok(vec![("operators.csv".into(), check_csv(&rows)), ("operators_summary.json".into(), pretty(&summary))])
}

/// Specification, resolvents and noise for one grid size.
pub struct LqContext {
    pub spec: LqSpec,
    pub table: ResolventTable,
    pub ensemble: PathEnsemble,
}

impl LqContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.lq_spec(cfg.numerics.n_steps, cfg.seed)?;
        let table = build_resolvents(&GeneratorSpec::new(spec.a.clone())?, &spec.grid, spec.alpha, cfg.numerics.quad_nodes)?;
        let ensemble = generate_paths(&spec.noise, &spec.grid, cfg.numerics.n_paths)?;
        Ok(Self { spec, table, ensemble })
    }

    pub fn solve(&self, cfg: &ExperimentConfig) -> Result<LqSolution> {
        solve_lq(&self.spec, &self.table, &self.ensemble, cfg.numerics.tol, cfg.numerics.max_iters)
    }
}

fn solution_json(sol: &LqSolution) -> serde_json::Value {
    json!({
        "x0_mean": sol.x0_mean,
        "cost": sol.cost.value,
        "cost_standard_error": sol.cost.standard_error,
        "fixed_point_iters": sol.fixed_point_iters,
        "fixed_point_residual": sol.fixed_point_residual,
        "residual_history": sol.residual_history,
    })
}

/// Path means of the control and of the adjoint cell values, one row per node.
pub fn control_table(ctx: &LqContext, sol: &LqSolution) -> String {
    let grid = &ctx.spec.grid;
    let n_paths = ctx.ensemble.n_paths();
    let d = sol.u_opt.dim();
    let n = sol.psi.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|k| format!("u{k}")));
    header.extend((0..n).map(|k| format!("psi{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv(
        &header,
        (0..=grid.n_steps()).map(|i| {
            let mut row = vec![num(grid.t(i))];
            let mut u = vec![0.0; d];
            let mut psi = vec![0.0; n];
            for p in 0..n_paths {
                u.iter_mut().zip(sol.u_opt.value(p, i)).for_each(|(a, b)| *a += b);
                psi.iter_mut().zip(sol.psi.cell_value(p, i)).for_each(|(a, b)| *a += b);
            }
            row.extend(u.iter().map(|v| num(v / n_paths as f64)));
            row.extend(psi.iter().map(|v| num(v / n_paths as f64)));
            row
        }),
    )
}

fn run_lq_solve(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let ctx = LqContext::new(cfg)?;
    let sol = ctx.solve(cfg)?;
    Ok(vec![("lq_summary.json".into(), pretty(&solution_json(&sol))), ("control.csv".into(), control_table(&ctx, &sol))])
}

/// Results of the maximum-principle experiment.
pub struct SmpResults {
    pub solution: LqSolution,
    pub lq: ScalingReport,
    pub nonlinear: Option<ScalingReport>,
    pub margin: MarginReport,
    pub shifted_margin: MarginReport,
}

/// LQ candidate, moment scaling on the LQ model and its bounded-nonlinear
/// variant, and Hamiltonian margins for the optimal and a shifted control.
pub fn smp_experiment(cfg: &ExperimentConfig) -> Result<SmpResults> {
    let ctx = LqContext::new(cfg)?;
    let sol = ctx.solve(cfg)?;
    let model = ctx.spec.model()?;
    let s = &cfg.smp;
    let eps = &cfg.numerics.epsilons;
    let lq = moment_scaling_experiment(&model, &sol.solved, &sol.u_opt, s.t0, &s.v, eps, &ctx.table, &ctx.ensemble)?;
    let nonlinear = if s.nonlinear_beta != 0.0 {
        let nl = ModelSpec { driver: model.driver.clone().bounded_nonlinear(s.nonlinear_beta)?, ..model.clone() };
        let u0 = ControlProcess::constant(&ctx.spec.grid, &vec![0.0; model.control_dim()])?;
        let base = solve_backward(&nl, &u0, &ctx.table, &ctx.ensemble)?;
        Some(moment_scaling_experiment(&nl, &base, &u0, s.t0, &s.v, eps, &ctx.table, &ctx.ensemble)?)
    } else {
        None
    };
    let scan_seed = cfg.seed ^ 0x5eed_0001;
    let margin = maximum_principle_scan(&model, &sol.psi, &sol.solved, &sol.u_opt, s.n_test_controls, scan_seed)?;
    let offset = ControlProcess::constant(&ctx.spec.grid, &vec![s.shift; model.control_dim()])?;
    let shifted = sol.u_opt.shifted(&offset, 1.0, ctx.ensemble.n_paths())?;
    let shifted_margin = maximum_principle_scan(&model, &sol.psi, &sol.solved, &shifted, s.n_test_controls, scan_seed)?;
    Ok(SmpResults { solution: sol, lq, nonlinear, margin, shifted_margin })
}

pub fn scaling_csv(report: &ScalingReport) -> String {
    csv(
        &["epsilon", "sup_E_p2", "sup_E_p4", "remainder", "flags"],
        report.rows.iter().map(|r| vec![num(r.epsilon), num(r.second_moment.value), num(r.fourth_moment.value), num(r.remainder.value), r.flag_label()]),
    )
}

pub fn variation_csv(report: &ScalingReport) -> String {
    csv(
        &["epsilon", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se"],
        report.rows.iter().map(|r| {
            let v = &r.variation;
            vec![num(r.epsilon), num(v.lhs.value), num(v.lhs.standard_error), num(v.rhs.value), num(v.rhs.standard_error), num(v.gap.value), num(v.gap.standard_error)]
        }),
    )
}

fn scaling_json(r: &ScalingReport) -> serde_json::Value {
    json!({
        "second_moment_slope": slope_json(&r.second_slope),
        "fourth_moment_slope": slope_json(&r.fourth_slope),
        "remainder_slope": slope_json(&r.remainder_slope),
        "variation_gap_slope": slope_json(&r.gap_slope),
    })
}

fn margin_json(m: &MarginReport) -> serde_json::Value {
    json!({ "worst_margin": estimate_json(&m.worst), "node": m.node, "v": m.v, "pairs": m.pairs })
}

fn run_smp_scaling(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let res = smp_experiment(cfg)?;
    let mut files = vec![("scaling.csv".to_string(), scaling_csv(&res.lq)), ("variation.csv".to_string(), variation_csv(&res.lq))];
    if let Some(nl) = &res.nonlinear {
        files.push(("scaling_nonlinear.csv".into(), scaling_csv(nl)));
        files.push(("variation_nonlinear.csv".into(), variation_csv(nl)));
    }
    let summary = json!({
        "solution": solution_json(&res.solution),
        "lq": scaling_json(&res.lq),
        "nonlinear": res.nonlinear.as_ref().map(scaling_json),
        "hamiltonian_margin": margin_json(&res.margin),
        "shifted_control_margin": margin_json(&res.shifted_margin),
    });
    files.push(("smp_summary.json".into(), pretty(&summary)));
    Ok(files)
}

/// Random deterministic directions, piecewise constant with values in `[−1, 1]`.
pub fn random_directions(grid: &TimeGrid, dim: usize, count: usize, blocks: usize, seed: u64) -> Result<Vec<ControlProcess>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let values: Vec<Vec<f64>> = (0..blocks).map(|_| (0..dim).map(|_| 2.0 * unit(&mut rng) - 1.0).collect()).collect();
            block_control(grid, blocks, &values)
        })
        .collect()
}

/// Pathwise `J(u + εv) − J(u)` on common random numbers.
pub fn cost_increase(ctx: &LqContext, sol: &LqSolution, v: &ControlProcess, eps: f64) -> Result<Estimate> {
    let model = ctx.spec.model()?;
    let u = sol.u_opt.shifted(v, eps, ctx.ensemble.n_paths())?;
    let solved = solve_backward(&model, &u, &ctx.table, &ctx.ensemble)?;
    let j = cost_per_path(&model, &u, &solved)?;
    let j0 = cost_per_path(&model, &sol.u_opt, &sol.solved)?;
    Ok(Estimate::from_samples(&j.iter().zip(&j0).map(|(a, b)| a - b).collect::<Vec<_>>()))
}

#[derive(Debug, Clone)]
pub struct PerturbationRow {
    pub direction: usize,
    pub epsilon: f64,
    pub increase: Estimate,
}

#[derive(Debug, Clone)]
pub struct StationarityRow {
    pub direction: usize,
    pub variation: Estimate,
}

#[derive(Debug, Clone)]
pub struct FiniteDifferenceRow {
    pub direction: usize,
    pub adjoint_variation: Estimate,
    pub finite_difference: Estimate,
}

pub struct VerifyResults {
    pub solution: LqSolution,
    pub brute_force: crate::lq::BruteForce,
    pub one_block: crate::lq::BruteForce,
    pub perturbations: Vec<PerturbationRow>,
    pub stationarity: Vec<StationarityRow>,
    pub finite_differences: Vec<FiniteDifferenceRow>,
    pub alternative: LqSolution,
    pub dt: f64,
}

/// Optimality certificates for the LQ solution.
pub fn lq_verification(cfg: &ExperimentConfig) -> Result<VerifyResults> {
    let ctx = LqContext::new(cfg)?;
    let sol = ctx.solve(cfg)?;
    let v = &cfg.verify;
    let grid = &ctx.spec.grid;
    let n = grid.n_steps();
    let brute_force = brute_force_optimize(&ctx.spec, &ctx.table, &ctx.ensemble, n / v.blocks)?;
    let one_block = brute_force_optimize(&ctx.spec, &ctx.table, &ctx.ensemble, n)?;
    let d = ctx.spec.b_op.ncols();
    let dirs = random_directions(grid, d, v.n_directions, v.direction_blocks, cfg.seed ^ 0x5eed_0002)?;
    let mut perturbations = Vec::new();
    let mut stationarity = Vec::new();
    for (k, dir) in dirs.iter().enumerate() {
        for &eps in &v.perturbation_sizes {
            perturbations.push(PerturbationRow { direction: k, epsilon: eps, increase: cost_increase(&ctx, &sol, dir, eps)? });
        }
        stationarity.push(StationarityRow { direction: k, variation: first_variation_lq(&ctx.spec, &sol, dir, &ctx.table, &ctx.ensemble)? });
    }
    let model = ctx.spec.model()?;
    let offset = ControlProcess::constant(grid, &vec![v.fd_shift; d])?;
    let shifted_u = sol.u_opt.shifted(&offset, 1.0, ctx.ensemble.n_paths())?;
    let shifted_solved = solve_backward(&model, &shifted_u, &ctx.table, &ctx.ensemble)?;
    let shifted = LqSolution { u_opt: shifted_u, solved: shifted_solved, ..sol.clone() };
    let finite_differences = dirs
        .iter()
        .take(v.fd_directions)
        .enumerate()
        .map(|(k, dir)| {
            Ok(FiniteDifferenceRow {
                direction: k,
                adjoint_variation: first_variation_lq(&ctx.spec, &shifted, dir, &ctx.table, &ctx.ensemble)?,
                finite_difference: finite_difference_variation(&ctx.spec, &shifted.u_opt, dir, v.fd_step, &ctx.table, &ctx.ensemble)?,
            })
        })
        .collect::<Result<_>>()?;
    let alternative = solve_lq_from(&ctx.spec, &ctx.table, &ctx.ensemble, cfg.numerics.tol, cfg.numerics.max_iters, &v.alt_start)?;
    Ok(VerifyResults { solution: sol, brute_force, one_block, perturbations, stationarity, finite_differences, alternative, dt: grid.dt() })
}

fn run_lq_verify(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let r = lq_verification(cfg)?;
    let perturbations = csv(
        &["direction", "epsilon", "cost_increase", "standard_error"],
        r.perturbations.iter().map(|p| vec![p.direction.to_string(), num(p.epsilon), num(p.increase.value), num(p.increase.standard_error)]),
    );
    let stationarity = csv(
        &["direction", "first_variation", "standard_error"],
        r.stationarity.iter().map(|s| vec![s.direction.to_string(), num(s.variation.value), num(s.variation.standard_error)]),
    );
    let fd = csv(
        &["direction", "adjoint_variation", "adjoint_se", "finite_difference", "finite_difference_se"],
        r.finite_differences.iter().map(|f| {
            vec![
                f.direction.to_string(),
                num(f.adjoint_variation.value),
                num(f.adjoint_variation.standard_error),
                num(f.finite_difference.value),
                num(f.finite_difference.standard_error),
            ]
        }),
    );
    let x0_gap: f64 = r.solution.x0_mean.iter().zip(&r.alternative.x0_mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let summary = json!({
        "solution": solution_json(&r.solution),
        "brute_force": { "cost": estimate_json(&r.brute_force.cost), "block_values": r.brute_force.block_values, "evaluations": r.brute_force.evaluations },
        "one_block": { "cost": estimate_json(&r.one_block.cost), "block_values": r.one_block.block_values },
        "alternative_start": { "x0_mean": r.alternative.x0_mean, "cost": r.alternative.cost.value, "x0_difference": x0_gap },
        "dt": r.dt,
    });
    Ok(vec![
        ("perturbations.csv".into(), perturbations),
        ("stationarity.csv".into(), stationarity),
        ("finite_difference.csv".into(), fd),
        ("verify_summary.json".into(), pretty(&summary)),
    ])
}

/// Integration-by-parts gap for one grid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpLevel {
    pub n_steps: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// The smooth pair `ψ(t) = t^{α−1}(1 + t)`, `δx(t) = (b − t)²`.
pub fn ibp_test_pair(alpha: FracOrder, horizon: f64, n_steps: usize) -> Result<IbpLevel> {
    let grid = TimeGrid::new(horizon, n_steps)?;
    let psi = WeightedGridFunction::new(alpha.value() - 1.0, GridFunction::scalar(&grid, |t| 1.0 + t)?)?;
    let dx = GridFunction::scalar(&grid, |t| (horizon - t).powi(2))?;
    let r = ibp_pair(&psi, &dx, alpha)?;
    Ok(IbpLevel { n_steps, lhs: r.lhs, rhs: r.rhs, gap: r.gap })
}

/// The uncoupled LQ adjoint in closed form, `ψ(t) = t^{α−1}E_{α,α}(a t^α)·2g x0`,
/// against `δx(t) = (b − t)²`.
pub fn ibp_mittag_leffler(alpha: FracOrder, a: f64, weight: f64, horizon: f64, n_steps: usize) -> Result<IbpLevel> {
    let grid = TimeGrid::new(horizon, n_steps)?;
    let al = alpha.value();
    let values = grid.nodes().iter().map(|&t| mittag_leffler(al, al, a * t.powf(al)).map(|e| DVector::from_element(1, weight * e))).collect::<Result<Vec<_>>>()?;
    let psi = WeightedGridFunction::new(al - 1.0, GridFunction::new(&grid, values)?)?;
    let dx = GridFunction::scalar(&grid, |t| (horizon - t).powi(2))?;
    let r = ibp_pair(&psi, &dx, alpha)?;
    Ok(IbpLevel { n_steps, lhs: r.lhs, rhs: r.rhs, gap: r.gap })
}

fn run_ibp_check(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let alpha = FracOrder::new(cfg.model.alpha)?;
    let b = cfg.model.horizon;
    let levels = cfg.ibp.levels.iter().map(|&n| ibp_test_pair(alpha, b, n)).collect::<Result<Vec<_>>>()?;
    let a = cfg.model.a[0][0];
    let weight = 2.0 * cfg.model.g[0][0] * cfg.model.xi[0];
    let closed = cfg.ibp.levels.iter().map(|&n| ibp_mittag_leffler(alpha, a, weight, b, n)).collect::<Result<Vec<_>>>()?;
    let rows = |name: &'static str, ls: &[IbpLevel]| -> Vec<Vec<String>> {
        ls.iter()
            .enumerate()
            .map(|(k, l)| {
                let ratio = if k == 0 { f64::NAN } else { ls[k - 1].gap / l.gap };
                vec![name.to_string(), l.n_steps.to_string(), num(l.lhs), num(l.rhs), num(l.gap), num(ratio)]
            })
            .collect()
    };
    let mut all = rows("smooth-pair", &levels);
    all.extend(rows("mittag-leffler", &closed));
    Ok(vec![("ibp.csv".into(), csv(&["pair", "n_steps", "lhs", "rhs", "gap", "ratio"], all))])
}

/// Path-mean cost rates used by the control formula, exposed for reporting.
pub fn cost_rates(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let spec = cfg.lq_spec(cfg.numerics.n_steps, cfg.seed)?;
    cell_cost_rates(spec.alpha, &spec.grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<ExperimentConfig> {
        parse_config(text)
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c = cfg(r#"{"experiment": "lq-solve"}"#).unwrap();
        assert_eq!(c.seed, 2024);
        assert_eq!(c.numerics.n_steps, 256);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = cfg(r#"{"experiment": "lq-solve", "numerics": {"n_step": 4}}"#).unwrap_err();
        match err {
            Error::Config { field, detail } => {
                assert_eq!(field, "numerics.n_step");
                assert!(detail.contains("n_step"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_steps_name_the_field() {
        let err = cfg("{\n  \"experiment\": \"lq-solve\",\n  \"numerics\": {\"n_steps\": -4}\n}").unwrap_err();
        match err {
            Error::Config { field, detail } => {
                assert_eq!(field, "numerics.n_steps");
                assert!(detail.contains("line 3"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_validation() {
        let e = cfg(r#"{"experiment": "lq-verify", "numerics": {"n_steps": 30}, "verify": {"blocks": 4}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "verify.blocks"));
        let e = cfg(r#"{"experiment": "lq-solve", "model": {"pi": [[-1.0]]}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "model"));
        let e = cfg(r#"{"experiment": "smp-scaling", "numerics": {"epsilons": [0.1, 0.05]}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "numerics.epsilons"));
    }

    #[test]
    fn schema_lists_experiments() {
        let s = schema();
        for name in ["operators-check", "smp-scaling", "lq-solve", "lq-verify", "ibp-check", "n_paths"] {
            assert!(s.contains(name), "{name}");
        }
    }

    #[test]
    fn random_generator_is_stable() {
        let a = random_stable_generator(7);
        assert!(((&a + a.transpose()) * 0.5).symmetric_eigenvalues().max() <= -0.5 + 1e-12);
    }

    #[test]
    fn number_format_has_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
    }
}
