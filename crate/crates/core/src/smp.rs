//! Maximum-principle laboratory: spike variations, the variational backward
//! equation, moment-scaling rates, the first-variation formula and the
//! Hamiltonian inequality.
//!
//! Every comparison between perturbed and unperturbed systems runs on one
//! frozen ensemble, so differences are pathwise.

use std::ops::Range;

use nalgebra::DVector;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::adjoint::AdjointProcess;
use crate::backward::{check_model, cost_per_path, solve_backward, sweep, Estimate, SolvedBackward};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{ControlProcess, ModelSpec};
use crate::noise::{PathEnsemble, ProcessArray};
use crate::resolvent::ResolventTable;

const NOISE_FLOOR_RATIO: f64 = 10.0;
const ROUNDOFF_RATIO: f64 = 1e-20;
const MIN_FIT_POINTS: usize = 4;

/// Spike of height `v` on `[t0, t0 + ε]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSpec {
    pub t0: f64,
    pub epsilon: f64,
    pub v: Vec<f64>,
}

/// Grid cells covered by a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeCells {
    pub start: usize,
    pub count: usize,
}

impl SpikeCells {
    pub fn effective_epsilon(&self, grid: &TimeGrid) -> f64 {
        self.count as f64 * grid.dt()
    }

    /// Overridden nodes; the terminal node joins when the spike reaches `b`.
    pub fn nodes(&self, grid: &TimeGrid) -> Range<usize> {
        let end = self.start + self.count;
        if end == grid.n_steps() {
            self.start..end + 1
        } else {
            self.start..end
        }
    }

    pub fn contains_cell(&self, i: usize) -> bool {
        (self.start..self.start + self.count).contains(&i)
    }
}

impl SpikeSpec {
    pub fn new(t0: f64, epsilon: f64, v: Vec<f64>) -> Self {
        Self { t0, epsilon, v }
    }

    /// Snaps the spike to whole cells: `round(t0/dt)` onwards, at least one.
    pub fn cells(&self, grid: &TimeGrid) -> Result<SpikeCells> {
        let b = grid.b();
        let slack = 1e-12 * b;
        if !(self.epsilon > 0.0) {
            return Err(Error::domain("spike_control", format!("empty spike (epsilon = {})", self.epsilon)));
        }
        if !(self.t0 >= 0.0 && self.t0 < b && self.t0 + self.epsilon <= b + slack) {
            return Err(Error::domain("spike_control", format!("[{}, {}] is not inside [0, {b}]", self.t0, self.t0 + self.epsilon)));
        }
        let n = grid.n_steps();
        let dt = grid.dt();
        let start = ((self.t0 / dt).round() as usize).min(n - 1);
        let count = ((self.epsilon / dt).round() as usize).clamp(1, n - start);
        Ok(SpikeCells { start, count })
    }
}

/// `u^ε`: `v` on the spike nodes and `u⁰` elsewhere.
pub fn spike_control(u0: &ControlProcess, spike: &SpikeSpec, grid: &TimeGrid) -> Result<(ControlProcess, SpikeCells)> {
    if spike.v.len() != u0.dim() || spike.v.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("spike_control", "spike value has the wrong dimension"));
    }
    if u0.n_nodes() != grid.n_steps() + 1 {
        return Err(Error::domain("spike_control", "control and grid disagree"));
    }
    let cells = spike.cells(grid)?;
    Ok((u0.overridden(cells.nodes(grid), &spike.v, usize::MAX), cells))
}

/// First-order perturbation pair `(p, q)` stored as `x` and `z`.
#[derive(Debug, Clone)]
pub struct Variational {
    pub pq: SolvedBackward,
    pub cells: SpikeCells,
}

/// Linear backward sweep with driver `κ_x p + Σ κ_{z,k} q_k + 1_spike Δ_uκ`,
/// all derivatives frozen along `solved0`, zero terminal value.
pub fn solve_variational(
    model: &ModelSpec,
    solved0: &SolvedBackward,
    control0: &ControlProcess,
    spike: &SpikeSpec,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<Variational> {
    check_model(model, table, ensemble)?;
    if !model.control_box.contains(&spike.v) {
        return Err(Error::domain("solve_variational", "spike value lies outside the control set"));
    }
    let cells = spike.cells(&model.grid)?;
    let n = model.state_dim();
    let m = model.noise.modes();
    let terminal = ProcessArray::zeros(ensemble.n_paths(), 1, n);
    let pq = sweep("solve_variational", table, ensemble, &terminal, control0.features(), |path, i, p, q, out| {
        let xp = solved0.x_pred.get(path, i);
        let z0 = solved0.z.get(path, i);
        let jac = model.driver.kappa_x(xp);
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += jac[(r, c)] * p[c];
            }
            for (k, kz) in model.driver.kappa_z().iter().enumerate().take(m) {
                for c in 0..n {
                    acc += kz[(r, c)] * q[k * n + c];
                }
            }
            out[r] = acc;
        }
        if cells.contains_cell(i) {
            let mut with_v = vec![0.0; n];
            let mut with_u = vec![0.0; n];
            model.driver.kappa(xp, z0, &spike.v, &mut with_v);
            model.driver.kappa(xp, z0, control0.value(path, i), &mut with_u);
            for r in 0..n {
                out[r] += with_v[r] - with_u[r];
            }
        }
    })?;
    Ok(Variational { pq, cells })
}

/// Pathwise `sup_i E f(p, i) + Σ_{i<N} dt E g(p, i)`, the supremum node chosen
/// on the path means.
fn sup_plus_integral(n_paths: usize, grid: &TimeGrid, f: impl Fn(usize, usize) -> f64 + Sync, g: impl Fn(usize, usize) -> f64 + Sync) -> Estimate {
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let node_means: Vec<f64> = (0..=n_steps)
        .into_par_iter()
        .map(|i| (0..n_paths).map(|p| f(p, i)).sum::<f64>() / n_paths as f64)
        .collect();
    let top = node_means
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| f(p, top) + dt * (0..n_steps).map(|i| g(p, i)).sum::<f64>())
        .collect();
    Estimate::from_samples(&samples)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff_norm_sq(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(b).zip(c).map(|((a, b), c)| (a - b - c).powi(2)).sum()
}

/// `sup_t E‖p_t‖^{2k} + ∫ E‖q_t‖^{2k} dt` for `k = power / 2`.
pub fn variational_moment(var: &Variational, grid: &TimeGrid, power: i32) -> Estimate {
    let half = power / 2;
    let pq = &var.pq;
    sup_plus_integral(pq.n_paths(), grid, |p, i| norm_sq(pq.x.get(p, i)).powi(half), |p, i| norm_sq(pq.z.get(p, i)).powi(half))
}

/// `sup_t E‖x^ε − x⁰ − p‖² + ∫ E‖z^ε − z⁰ − q‖² dt`.
pub fn expansion_remainder(perturbed: &SolvedBackward, base: &SolvedBackward, var: &Variational, grid: &TimeGrid) -> Estimate {
    sup_plus_integral(
        base.n_paths(),
        grid,
        |p, i| diff_norm_sq(perturbed.x.get(p, i), base.x.get(p, i), var.pq.x.get(p, i)),
        |p, i| diff_norm_sq(perturbed.z.get(p, i), base.z.get(p, i), var.pq.z.get(p, i)),
    )
}

/// Both sides of the first-variation formula with a pathwise gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationCheck {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub gap: Estimate,
}

fn variation_from_parts(
    model: &ModelSpec,
    control0: &ControlProcess,
    solved0: &SolvedBackward,
    spiked: &ControlProcess,
    perturbed: &SolvedBackward,
    var: &Variational,
) -> Result<VariationCheck> {
    let j0 = cost_per_path(model, control0, solved0)?;
    let je = cost_per_path(model, spiked, perturbed)?;
    let weights = model.cost_weights()?;
    let rhs: Vec<f64> = (0..solved0.n_paths())
        .into_par_iter()
        .map(|p| {
            let dot = |a: &DVector<f64>, b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut acc = dot(&model.cost.terminal_x(solved0.x.get(p, 0)), var.pq.x.get(p, 0));
            for (k, c) in weights.iter().enumerate() {
                let (x, z) = (solved0.x.get(p, k), solved0.z.get(p, k));
                let mut local = dot(&model.cost.running_x(x), var.pq.x.get(p, k)) + dot(&model.cost.running_z(z), var.pq.z.get(p, k));
                if var.cells.contains_cell(k) {
                    local += model.cost.running(k, x, z, spiked.value(p, k)) - model.cost.running(k, x, z, control0.value(p, k));
                }
                acc += c * local;
            }
            acc
        })
        .collect();
    let lhs: Vec<f64> = je.iter().zip(&j0).map(|(a, b)| a - b).collect();
    let gap: Vec<f64> = lhs.iter().zip(&rhs).map(|(l, r)| l - r).collect();
    Ok(VariationCheck { lhs: Estimate::from_samples(&lhs), rhs: Estimate::from_samples(&rhs), gap: Estimate::from_samples(&gap) })
}

/// `J(u^ε) − J(u⁰)` against `E⟨h_x(x⁰_0), p_0⟩ + Σ_k c_k E[⟨l_x, p⟩ + ⟨l_z, q⟩ + Δl_u]`.
pub fn first_variation_check(
    model: &ModelSpec,
    solved0: &SolvedBackward,
    control0: &ControlProcess,
    spike: &SpikeSpec,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<VariationCheck> {
    let (spiked, _) = spike_control(control0, spike, &model.grid)?;
    let var = solve_variational(model, solved0, control0, spike, table, ensemble)?;
    let perturbed = solve_backward(model, &spiked, table, ensemble)?;
    variation_from_parts(model, control0, solved0, &spiked, &perturbed, &var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuantityFlags {
    /// Value below ten standard errors.
    pub noise_floor: bool,
    /// Value indistinguishable from rounding of the first-order term.
    pub roundoff: bool,
}

impl QuantityFlags {
    fn usable(&self) -> bool {
        !self.noise_floor && !self.roundoff
    }

    fn label(&self) -> &'static str {
        match (self.noise_floor, self.roundoff) {
            (false, false) => "",
            (true, false) => "noise",
            (false, true) => "roundoff",
            (true, true) => "noise+roundoff",
        }
    }
}

fn flags_for(value: &Estimate, reference: f64) -> QuantityFlags {
    QuantityFlags {
        noise_floor: value.value.abs() < NOISE_FLOOR_RATIO * value.standard_error,
        roundoff: value.value.abs() <= ROUNDOFF_RATIO * reference,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub epsilon_requested: f64,
    /// Snapped length `count · dt`.
    pub epsilon: f64,
    pub second_moment: Estimate,
    pub fourth_moment: Estimate,
    pub remainder: Estimate,
    pub variation: VariationCheck,
    /// Flags for second moment, fourth moment, remainder and variation gap.
    pub flags: [QuantityFlags; 4],
}

impl ScalingRow {
    pub fn flag_label(&self) -> String {
        let names = ["p2", "p4", "rem", "gap"];
        let parts: Vec<String> = names
            .iter()
            .zip(&self.flags)
            .filter(|(_, f)| !f.usable())
            .map(|(n, f)| format!("{n}:{}", f.label()))
            .collect();
        if parts.is_empty() {
            "ok".into()
        } else {
            parts.join(";")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeFit {
    Fitted { slope: f64, half_width: f64, points: usize },
    Inconclusive { points: usize },
}

impl SlopeFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            SlopeFit::Fitted { slope, .. } => Some(*slope),
            SlopeFit::Inconclusive { .. } => None,
        }
    }
}

/// Least-squares slope of `ln y` on `ln x` with a two-standard-error half width.
pub fn fit_slope(points: &[(f64, f64)]) -> SlopeFit {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = usable.len();
    if n < MIN_FIT_POINTS {
        return SlopeFit::Inconclusive { points: n };
    }
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return SlopeFit::Inconclusive { points: n };
    }
    let slope = sxy / sxx;
    let rss: f64 = usable.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let se = (rss / (n - 2) as f64 / sxx).sqrt();
    SlopeFit::Fitted { slope, half_width: 2.0 * se, points: n }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub t0: f64,
    pub v: Vec<f64>,
    /// Rows ordered by strictly decreasing effective ε.
    pub rows: Vec<ScalingRow>,
    pub second_slope: SlopeFit,
    pub fourth_slope: SlopeFit,
    pub remainder_slope: SlopeFit,
    pub gap_slope: SlopeFit,
}

fn scaling_row(
    model: &ModelSpec,
    solved0: &SolvedBackward,
    control0: &ControlProcess,
    spike: &SpikeSpec,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<ScalingRow> {
    let grid = &model.grid;
    let (spiked, cells) = spike_control(control0, spike, grid)?;
    let var = solve_variational(model, solved0, control0, spike, table, ensemble)?;
    let perturbed = solve_backward(model, &spiked, table, ensemble)?;
    let second = variational_moment(&var, grid, 2);
    let fourth = variational_moment(&var, grid, 4);
    let remainder = expansion_remainder(&perturbed, solved0, &var, grid);
    let variation = variation_from_parts(model, control0, solved0, &spiked, &perturbed, &var)?;
    let flags = [
        flags_for(&second, 0.0),
        flags_for(&fourth, 0.0),
        flags_for(&remainder, second.value),
        flags_for(&variation.gap, variation.rhs.value.abs() * variation.rhs.value.abs()),
    ];
    Ok(ScalingRow {
        epsilon_requested: spike.epsilon,
        epsilon: cells.effective_epsilon(grid),
        second_moment: second,
        fourth_moment: fourth,
        remainder,
        variation,
        flags,
    })
}

fn slope_of(rows: &[ScalingRow], slot: usize, value: impl Fn(&ScalingRow) -> f64) -> SlopeFit {
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.flags[slot].usable()).map(|r| (r.epsilon, value(r))).collect();
    fit_slope(&pts)
}

/// Solves the variational and perturbed systems for every ε and fits the
/// log-log slopes of the moments, the remainder and the variation gap.
#[allow(clippy::too_many_arguments)]
pub fn moment_scaling_experiment(
    model: &ModelSpec,
    solved0: &SolvedBackward,
    control0: &ControlProcess,
    t0: f64,
    v: &[f64],
    epsilons: &[f64],
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<ScalingReport> {
    let lo = epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = epsilons.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if epsilons.len() < 5 || !(hi >= 10.0 * lo) || !(lo > 0.0) {
        return Err(Error::domain("moment_scaling_experiment", "need at least 5 positive epsilons spanning a decade"));
    }
    let mut rows: Vec<ScalingRow> = epsilons
        .par_iter()
        .map(|&eps| scaling_row(model, solved0, control0, &SpikeSpec::new(t0, eps, v.to_vec()), table, ensemble))
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    if rows.windows(2).any(|w| w[0].epsilon <= w[1].epsilon) {
        return Err(Error::domain("moment_scaling_experiment", "epsilons collapse to the same number of grid cells"));
    }
    Ok(ScalingReport {
        t0,
        v: v.to_vec(),
        second_slope: slope_of(&rows, 0, |r| r.second_moment.value),
        fourth_slope: slope_of(&rows, 1, |r| r.fourth_moment.value),
        remainder_slope: slope_of(&rows, 2, |r| r.remainder.value),
        gap_slope: slope_of(&rows, 3, |r| r.variation.gap.value.abs()),
        rows,
    })
}

/// Per-path Hamiltonian `−⟨κ(x̃, z, v), ψ̂⟩ − ω l(x, z, v)` at one node. The
/// sign makes the LQ control of the adjoint module its maximizer.
struct NodeHamiltonian<'a> {
    model: &'a ModelSpec,
    solved: &'a SolvedBackward,
    node: usize,
    omega: f64,
    psi: Vec<f64>,
}

impl<'a> NodeHamiltonian<'a> {
    fn new(model: &'a ModelSpec, psi: &AdjointProcess, solved: &'a SolvedBackward, node: usize) -> Result<Self> {
        let grid = &model.grid;
        if node > grid.n_steps() {
            return Err(Error::domain("hamiltonian", format!("node {node} outside the grid")));
        }
        if psi.grid() != grid || psi.dim() != model.state_dim() || psi.values.n_paths() != solved.n_paths() {
            return Err(Error::domain("hamiltonian", "adjoint does not match the model or solution"));
        }
        let weights = model.cost_weights()?;
        let omega = weights[node.min(grid.n_steps() - 1)] / grid.dt();
        let psi = (0..solved.n_paths()).flat_map(|p| psi.cell_value(p, node)).collect();
        Ok(Self { model, solved, node, omega, psi })
    }

    fn value(&self, path: usize, v: &[f64], kappa: &mut [f64]) -> f64 {
        let n = kappa.len();
        let (x, xp, z) = (self.solved.x.get(path, self.node), self.solved.x_pred.get(path, self.node), self.solved.z.get(path, self.node));
        self.model.driver.kappa(xp, z, v, kappa);
        let psi = &self.psi[path * n..(path + 1) * n];
        -kappa.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>() - self.omega * self.model.cost.running(self.node, x, z, v)
    }
}

/// Monte-Carlo mean of the Hamiltonian at node `t_index` for the constant point `v`.
pub fn hamiltonian(model: &ModelSpec, psi: &AdjointProcess, solved0: &SolvedBackward, t_index: usize, v: &[f64]) -> Result<Estimate> {
    let h = NodeHamiltonian::new(model, psi, solved0, t_index)?;
    let n = model.state_dim();
    let samples: Vec<f64> = (0..solved0.n_paths())
        .into_par_iter()
        .map_init(|| vec![0.0; n], |buf, p| h.value(p, v, buf))
        .collect();
    Ok(Estimate::from_samples(&samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    /// Smallest mean of `H(t, u⁰_t) − H(t, v)` over the scanned pairs.
    pub worst: Estimate,
    pub node: usize,
    pub v: Vec<f64>,
    pub pairs: usize,
}

fn unit_uniform(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform test points in the control box, reproducible from `seed`.
pub fn random_controls(model: &ModelSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = model.control_dim();
    (0..count)
        .map(|_| {
            let s: Vec<f64> = (0..d).map(|_| unit_uniform(&mut rng)).collect();
            model.control_box.from_unit(&s)
        })
        .collect()
}

/// Minimum over every node and `n_test_controls` random points of the
/// pathwise margin `H(t, u⁰_t) − H(t, v)`.
pub fn maximum_principle_scan(
    model: &ModelSpec,
    psi: &AdjointProcess,
    solved0: &SolvedBackward,
    control0: &ControlProcess,
    n_test_controls: usize,
    seed: u64,
) -> Result<MarginReport> {
    if control0.dim() != model.control_dim() || control0.n_nodes() != model.grid.n_steps() + 1 {
        return Err(Error::domain("maximum_principle_scan", "control shape does not match the model"));
    }
    let tests = random_controls(model, n_test_controls, seed);
    let n = model.state_dim();
    let n_paths = solved0.n_paths();
    let mut worst: Option<MarginReport> = None;
    for node in 0..=model.grid.n_steps() {
        let h = NodeHamiltonian::new(model, psi, solved0, node)?;
        let at_u0: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map_init(|| vec![0.0; n], |buf, p| h.value(p, control0.value(p, node), buf))
            .collect();
        for v in &tests {
            let margins: Vec<f64> = (0..n_paths)
                .into_par_iter()
                .map_init(|| vec![0.0; n], |buf, p| at_u0[p] - h.value(p, v, buf))
                .collect();
            let est = Estimate::from_samples(&margins);
            if worst.as_ref().is_none_or(|w| est.value < w.worst.value) {
                worst = Some(MarginReport { worst: est, node, v: v.clone(), pairs: 0 });
            }
        }
    }
    let mut report = worst.ok_or_else(|| Error::domain("maximum_principle_scan", "no test controls requested"))?;
    report.pairs = (model.grid.n_steps() + 1) * n_test_controls;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::kernel_weights;
    use crate::model::{ControlBox, CostSpec, DriverSpec, Terminal};
    use crate::noise::{generate_paths, NoiseSpec};
    use crate::resolvent::{build_resolvents, GeneratorSpec};
    use crate::special::{gamma_fn, FracOrder};
    use nalgebra::DMatrix;

    fn scalar_model(a: f64, driver: DriverSpec, n_steps: usize) -> ModelSpec {
        ModelSpec {
            alpha: FracOrder::new(0.75).unwrap(),
            grid: TimeGrid::new(1.0, n_steps).unwrap(),
            generator: GeneratorSpec::scalar(a).unwrap(),
            driver,
            terminal: Terminal::constant(DVector::from_element(1, 1.0), 1),
            cost: CostSpec::quadratic(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)),
            noise: NoiseSpec::new(vec![1.0], 11).unwrap(),
            control_box: ControlBox::new(vec![-3.0], vec![3.0]).unwrap(),
        }
    }

    fn control_driver() -> DriverSpec {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        DriverSpec::linear(one(0.0), vec![one(0.0)], one(1.0), DVector::zeros(1)).unwrap()
    }

    #[test]
    fn spike_grid_arithmetic() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let u0 = ControlProcess::constant(&grid, &[0.0]).unwrap();
        let (u, cells) = spike_control(&u0, &SpikeSpec::new(0.5, 0.1, vec![1.0]), &grid).unwrap();
        assert_eq!(cells, SpikeCells { start: 50, count: 10 });
        assert_eq!((0..=100).filter(|&i| u.value(0, i)[0] == 1.0).count(), 10);
        let (small, cells) = spike_control(&u0, &SpikeSpec::new(0.3, 0.001, vec![1.0]), &grid).unwrap();
        assert_eq!(cells.count, 1);
        assert!((cells.effective_epsilon(&grid) - 0.01).abs() < 1e-15);
        assert_eq!(small.value(0, 30)[0], 1.0);
    }

    #[test]
    fn whole_horizon_spike_is_constant() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let u0 = ControlProcess::constant(&grid, &[0.2]).unwrap();
        let (u, _) = spike_control(&u0, &SpikeSpec::new(0.0, 1.0, vec![-1.5]), &grid).unwrap();
        assert_eq!(u, ControlProcess::constant(&grid, &[-1.5]).unwrap());
    }

    #[test]
    fn bad_spikes_rejected() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let u0 = ControlProcess::constant(&grid, &[0.0]).unwrap();
        for spike in [SpikeSpec::new(0.5, 0.0, vec![1.0]), SpikeSpec::new(0.9, 0.2, vec![1.0]), SpikeSpec::new(-0.1, 0.05, vec![1.0])] {
            assert!(matches!(spike_control(&u0, &spike, &grid), Err(Error::Domain { .. })));
        }
    }

    #[test]
    fn null_spike_is_exactly_zero() {
        let model = scalar_model(-1.0, control_driver(), 32);
        let table = build_resolvents(&model.generator, &model.grid, model.alpha, 32).unwrap();
        let ens = generate_paths(&model.noise, &model.grid, 200).unwrap();
        let u0 = ControlProcess::constant(&model.grid, &[0.4]).unwrap();
        let solved0 = solve_backward(&model, &u0, &table, &ens).unwrap();
        let spike = SpikeSpec::new(0.25, 0.25, vec![0.4]);
        let var = solve_variational(&model, &solved0, &u0, &spike, &table, &ens).unwrap();
        assert!(var.pq.x.as_slice().iter().chain(var.pq.z.as_slice()).all(|v| *v == 0.0));
        let check = first_variation_check(&model, &solved0, &u0, &spike, &table, &ens).unwrap();
        assert_eq!((check.lhs.value, check.rhs.value, check.gap.value), (0.0, 0.0, 0.0));
    }

    #[test]
    fn decoupled_variation_matches_weight_sum() {
        let n_steps = 64;
        let model = scalar_model(-1.0, control_driver(), n_steps);
        let table = build_resolvents(&model.generator, &model.grid, model.alpha, 32).unwrap();
        let ens = generate_paths(&model.noise, &model.grid, 50).unwrap();
        let u0 = ControlProcess::constant(&model.grid, &[0.0]).unwrap();
        let solved0 = solve_backward(&model, &u0, &table, &ens).unwrap();
        let spike = SpikeSpec::new(0.5, 0.125, vec![2.0]);
        let var = solve_variational(&model, &solved0, &u0, &spike, &table, &ens).unwrap();
        let dt = model.grid.dt();
        let w = kernel_weights(0.75, n_steps, dt);
        let cells = var.cells;
        let bound = 2.0 * spike.epsilon.powf(0.75) / gamma_fn(1.75).unwrap();
        for i in 0..=n_steps {
            let expected: f64 = (cells.start..cells.start + cells.count)
                .filter(|&j| j >= i)
                .map(|j| w[j - i] * table.p_alpha[j - i][(0, 0)] * 2.0)
                .sum();
            let got = var.pq.x.get(3, i)[0];
            assert!((got - expected).abs() < 1e-12, "node {i}: {got} vs {expected}");
            assert!(got.abs() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [0.2, 0.1, 0.05, 0.02, 0.01].iter().map(|&e: &f64| (e, 3.0 * e.powf(1.5))).collect();
        match fit_slope(&pts) {
            SlopeFit::Fitted { slope, half_width, points } => {
                assert!((slope - 1.5).abs() < 1e-12);
                assert!(half_width < 1e-10);
                assert_eq!(points, 5);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(fit_slope(&pts[..3]), SlopeFit::Inconclusive { points: 3 });
    }

    #[test]
    fn zero_model_has_zero_hamiltonian_and_margin() {
        let mut model = scalar_model(-1.0, DriverSpec::zero(1, 1, 1), 16);
        model.cost = CostSpec::quadratic(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1));
        let table = build_resolvents(&model.generator, &model.grid, model.alpha, 32).unwrap();
        let ens = generate_paths(&model.noise, &model.grid, 40).unwrap();
        let u0 = ControlProcess::constant(&model.grid, &[0.0]).unwrap();
        let solved0 = solve_backward(&model, &u0, &table, &ens).unwrap();
        let psi = crate::adjoint::solve_psi_general(&model, &solved0, &table, &ens).unwrap();
        assert_eq!(hamiltonian(&model, &psi, &solved0, 5, &[1.3]).unwrap().value, 0.0);
        let scan = maximum_principle_scan(&model, &psi, &solved0, &u0, 10, 1).unwrap();
        assert_eq!(scan.worst.value, 0.0);
        assert_eq!(scan.pairs, 170);
    }

    #[test]
    fn random_controls_are_reproducible_and_inside() {
        let model = scalar_model(-1.0, control_driver(), 8);
        let a = random_controls(&model, 50, 9);
        assert_eq!(a, random_controls(&model, 50, 9));
        assert!(a.iter().all(|v| model.control_box.contains(v)));
        assert_ne!(a, random_controls(&model, 50, 10));
    }
}
