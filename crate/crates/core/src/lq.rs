//! Backward linear-quadratic problem: coupled state/adjoint fixed point,
//! closed-form control, cost, first variation and brute-force checks.
//!
//! The generator `A` lives in the resolvents, so the driver of the state is
//! `B u + Σ_k C_k z_k`. The control is formed cell by cell from the adjoint
//! cell average `ψ̂_k`: `u_k = −Π_k^{-1} B*ψ̂_k / (2ω_k)`, where
//! `ω_k = c_k/dt` is the average of `(b−t)^{α−1}/Γ(α)` over the cell.

use nalgebra::{DMatrix, DVector};

use crate::adjoint::{singular_adjoint, AdjointProcess};
use crate::backward::{check_model, cost_per_path, evaluate_cost, solve_backward, sweep, Estimate, SolvedBackward};
use crate::error::{Error, Result};
use crate::grid::{caputo_right, integrate_product, integrate_weighted_product, rl_derivative_left_weighted, rl_integral_left_weighted, GridFunction, TimeGrid, WeightedGridFunction};
use crate::model::{horizon_weights, ControlBox, ControlProcess, CostSpec, DriverSpec, ModelSpec, Terminal};
use crate::noise::{NoiseSpec, PathEnsemble, ProcessArray};
use crate::resolvent::{GeneratorSpec, ResolventTable};
use crate::special::FracOrder;

const DAMPING: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct LqSpec {
    pub alpha: FracOrder,
    pub grid: TimeGrid,
    pub a: DMatrix<f64>,
    pub b_op: DMatrix<f64>,
    /// One coupling matrix per noise mode.
    pub c_ops: Vec<DMatrix<f64>>,
    pub g: DMatrix<f64>,
    /// One weight for all times, or one per grid node.
    pub pi: Vec<DMatrix<f64>>,
    pub xi: Terminal,
    pub noise: NoiseSpec,
    pub control_box: ControlBox,
}

fn symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

impl LqSpec {
    pub fn validate(&self) -> Result<()> {
        if !symmetric(&self.g) {
            return Err(Error::domain("LqSpec", "G must be symmetric"));
        }
        for (i, p) in self.pi.iter().enumerate() {
            if !symmetric(p) {
                return Err(Error::domain("LqSpec", format!("Pi at entry {i} must be symmetric")));
            }
            let gamma = p.clone().symmetric_eigenvalues().min();
            if !(gamma > 0.0) {
                return Err(Error::domain("LqSpec", format!("Pi at entry {i} has smallest eigenvalue {gamma} <= 0")));
            }
        }
        self.model()?.validate()
    }

    /// The equivalent general model with quadratic costs and a linear driver.
    pub fn model(&self) -> Result<ModelSpec> {
        let n = self.a.nrows();
        let driver = DriverSpec::linear(DMatrix::zeros(n, n), self.c_ops.clone(), self.b_op.clone(), DVector::zeros(n))?;
        let mut cost = CostSpec::quadratic(self.g.clone(), self.pi[0].clone());
        cost.pi = self.pi.clone();
        Ok(ModelSpec {
            alpha: self.alpha,
            grid: self.grid.clone(),
            generator: GeneratorSpec::new(self.a.clone())?,
            driver,
            terminal: self.xi.clone(),
            cost,
            noise: self.noise.clone(),
            control_box: self.control_box.clone(),
        })
    }

    /// Scalar benchmark with `α = 0.75, A = −1, B = 1, C = 0.5, Π = 1, G = 1, ξ = 1, b = 1`.
    pub fn scalar_benchmark(n_steps: usize, seed: u64) -> Result<Self> {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        Ok(Self {
            alpha: FracOrder::for_solver(0.75)?,
            grid: TimeGrid::new(1.0, n_steps)?,
            a: one(-1.0),
            b_op: one(1.0),
            c_ops: vec![one(0.5)],
            g: one(1.0),
            pi: vec![one(1.0)],
            xi: Terminal::constant(DVector::from_element(1, 1.0), 1),
            noise: NoiseSpec::new(vec![1.0], seed)?,
            control_box: ControlBox::new(vec![-3.0], vec![3.0])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LqSolution {
    pub u_opt: ControlProcess,
    pub psi: AdjointProcess,
    pub solved: SolvedBackward,
    pub x0_mean: Vec<f64>,
    pub cost: Estimate,
    pub fixed_point_iters: usize,
    pub fixed_point_residual: f64,
    pub residual_history: Vec<f64>,
}

/// Cell averages `ω_k` of the cost kernel, with the last cell repeated at `t_N`.
pub fn cell_cost_rates(alpha: FracOrder, grid: &TimeGrid) -> Result<Vec<f64>> {
    let mut w: Vec<f64> = horizon_weights(alpha, grid)?.into_iter().map(|c| c / grid.dt()).collect();
    w.push(*w.last().expect("grid has at least one step"));
    Ok(w)
}

/// `u_k = −Π_k^{-1} B*ψ̂_k / (2ω_k)` on every path and node. Regressions keep
/// conditioning on Brownian values only: the heavy-tailed adjoint as a feature
/// destabilizes the explicit sweep on fine grids.
pub fn control_from_adjoint(spec: &LqSpec, psi: &AdjointProcess) -> Result<ControlProcess> {
    let grid = &spec.grid;
    let omega = cell_cost_rates(spec.alpha, grid)?;
    let n_paths = psi.values.n_paths();
    let d = spec.b_op.ncols();
    let gains: Vec<DMatrix<f64>> = (0..=grid.n_steps())
        .map(|k| {
            let pi = if spec.pi.len() == 1 { &spec.pi[0] } else { &spec.pi[k] };
            let inv = pi.clone().try_inverse().ok_or_else(|| Error::domain("control_from_adjoint", format!("Pi singular at node {k}")))?;
            Ok(inv * spec.b_op.transpose() * (-0.5 / omega[k]))
        })
        .collect::<Result<_>>()?;
    let mut values = ProcessArray::zeros(n_paths, grid.n_steps() + 1, d);
    for p in 0..n_paths {
        for (k, gain) in gains.iter().enumerate() {
            let u = gain * DVector::from_vec(psi.cell_value(p, k));
            values.get_mut(p, k).copy_from_slice(u.as_slice());
        }
    }
    ControlProcess::adapted(values, None)
}

pub fn cost_functional(spec: &LqSpec, control: &ControlProcess, solved: &SolvedBackward) -> Result<Estimate> {
    evaluate_cost(&spec.model()?, control, solved)
}

/// Damped fixed point on `E x_0` starting from `S_α(b) E ξ`.
pub fn solve_lq(spec: &LqSpec, table: &ResolventTable, ensemble: &PathEnsemble, tol: f64, max_iters: usize) -> Result<LqSolution> {
    let x0 = &table.s_alpha[spec.grid.n_steps()] * &spec.xi.base;
    solve_lq_from(spec, table, ensemble, tol, max_iters, x0.as_slice())
}

pub fn solve_lq_from(
    spec: &LqSpec,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
    tol: f64,
    max_iters: usize,
    x0_start: &[f64],
) -> Result<LqSolution> {
    spec.validate()?;
    let model = spec.model()?;
    check_model(&model, table, ensemble)?;
    let mut x0 = DVector::from_column_slice(x0_start);
    let mut history = Vec::new();
    for iter in 1..=max_iters {
        let ic = model.cost.terminal_x(x0.as_slice());
        let psi = singular_adjoint(table, ensemble, &spec.c_ops, &ic)?;
        let control = control_from_adjoint(spec, &psi)?;
        let solved = solve_backward(&model, &control, table, ensemble)?;
        let x0_new = DVector::from_vec(solved.mean_x0());
        let residual = (model.cost.terminal_x(x0_new.as_slice()) - &ic).norm();
        history.push(residual);
        if residual <= tol {
            let cost = evaluate_cost(&model, &control, &solved)?;
            return Ok(LqSolution {
                u_opt: control,
                psi,
                solved,
                x0_mean: x0_new.iter().copied().collect(),
                cost,
                fixed_point_iters: iter,
                fixed_point_residual: residual,
                residual_history: history,
            });
        }
        x0 = x0 * (1.0 - DAMPING) + x0_new * DAMPING;
    }
    Err(Error::NonConvergence { residuals: history })
}

/// Deterministic piecewise-constant control on `blocks` equal blocks.
pub fn block_control(grid: &TimeGrid, blocks: usize, values: &[Vec<f64>]) -> Result<ControlProcess> {
    let n = grid.n_steps();
    let d = values[0].len();
    ControlProcess::deterministic(grid, d, |i| values[(i.min(n - 1) * blocks) / n].clone())
}

#[derive(Debug, Clone)]
pub struct BruteForce {
    pub u_best: ControlProcess,
    pub block_values: Vec<Vec<f64>>,
    pub cost: Estimate,
    pub evaluations: usize,
}

fn golden_section(f: &mut dyn FnMut(f64) -> Result<f64>, centre: f64, f_centre: f64) -> Result<(f64, f64)> {
    let mut step = 0.5 * (1.0 + centre.abs());
    let (mut a, mut b);
    let mut f_lo = f(centre - step)?;
    let mut f_hi = f(centre + step)?;
    loop {
        if f_lo >= f_centre && f_hi >= f_centre {
            a = centre - step;
            b = centre + step;
            break;
        }
        step *= 2.0;
        if step > 1e6 {
            return Err(Error::Divergence { op: "brute_force_optimize", step: 0 });
        }
        if f_lo < f_centre {
            f_lo = f(centre - step)?;
        }
        if f_hi < f_centre {
            f_hi = f(centre + step)?;
        }
    }
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a) > 1e-7 * (1.0 + c.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    Ok(if fx < f_centre { (x, fx) } else { (centre, f_centre) })
}

/// Coordinate descent with golden-section line searches over deterministic
/// controls that are constant on `n_steps / grid_coarsening` blocks.
pub fn brute_force_optimize(spec: &LqSpec, table: &ResolventTable, ensemble: &PathEnsemble, grid_coarsening: usize) -> Result<BruteForce> {
    let n = spec.grid.n_steps();
    if grid_coarsening == 0 || !n.is_multiple_of(grid_coarsening) {
        return Err(Error::domain("brute_force_optimize", format!("coarsening {grid_coarsening} must divide {n}")));
    }
    let blocks = n / grid_coarsening;
    let model = spec.model()?;
    let d = spec.b_op.ncols();
    let mut evaluations = 0usize;
    let mut cost_of = |values: &[Vec<f64>]| -> Result<f64> {
        evaluations += 1;
        let u = block_control(&spec.grid, blocks, values)?;
        let solved = solve_backward(&model, &u, table, ensemble)?;
        Ok(evaluate_cost(&model, &u, &solved)?.value)
    };
    let mut values = vec![vec![0.0; d]; blocks];
    let mut best = cost_of(&values)?;
    loop {
        let start = best;
        for blk in 0..blocks {
            for comp in 0..d {
                let centre = values[blk][comp];
                let mut line = |s: f64| {
                    let mut trial = values.clone();
                    trial[blk][comp] = s;
                    cost_of(&trial)
                };
                let (x, fx) = golden_section(&mut line, centre, best)?;
                values[blk][comp] = x;
                best = fx;
            }
        }
        if start - best < 1e-8 {
            break;
        }
    }
    let u_best = block_control(&spec.grid, blocks, &values)?;
    let solved = solve_backward(&model, &u_best, table, ensemble)?;
    let cost = evaluate_cost(&model, &u_best, &solved)?;
    Ok(BruteForce { u_best, block_values: values, cost, evaluations })
}

/// Solution of the linearized state equation in direction `v` (zero terminal
/// value), on the regression design of the optimal control.
pub fn linearized_state(spec: &LqSpec, solution: &LqSolution, v: &ControlProcess, table: &ResolventTable, ensemble: &PathEnsemble) -> Result<SolvedBackward> {
    let model = spec.model()?;
    let n = model.state_dim();
    let terminal = ProcessArray::zeros(ensemble.n_paths(), 1, n);
    let zero = vec![0.0; n];
    sweep("linearized_state", table, ensemble, &terminal, solution.u_opt.features(), |p, i, _x, z, out| {
        model.driver.kappa(&zero, z, v.value(p, i), out)
    })
}

/// `δJ(v) = E⟨h_x(x_0), δx_0⟩ + 2 Σ_k c_k E⟨Π_k u_k, v_k⟩`.
pub fn first_variation_lq(spec: &LqSpec, solution: &LqSolution, v: &ControlProcess, table: &ResolventTable, ensemble: &PathEnsemble) -> Result<Estimate> {
    let model = spec.model()?;
    let dx = linearized_state(spec, solution, v, table, ensemble)?;
    let weights = model.cost_weights()?;
    let samples: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| {
            let hx = model.cost.terminal_x(solution.solved.x.get(p, 0));
            let terminal = hx.dot(&DVector::from_column_slice(dx.x.get(p, 0)));
            let running: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let u = DVector::from_column_slice(solution.u_opt.value(p, k));
                    let vk = DVector::from_column_slice(v.value(p, k));
                    2.0 * c * (model.cost.pi_at(k) * u).dot(&vk)
                })
                .sum();
            terminal + running
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Central difference `(J(u + h v) − J(u − h v)) / 2h` on common random numbers.
pub fn finite_difference_variation(
    spec: &LqSpec,
    u: &ControlProcess,
    v: &ControlProcess,
    h: f64,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<Estimate> {
    let model = spec.model()?;
    let n_paths = ensemble.n_paths();
    let plus = u.shifted(v, h, n_paths)?;
    let minus = u.shifted(v, -h, n_paths)?;
    let jp = cost_per_path(&model, &plus, &solve_backward(&model, &plus, table, ensemble)?)?;
    let jm = cost_per_path(&model, &minus, &solve_backward(&model, &minus, table, ensemble)?)?;
    let diff: Vec<f64> = jp.iter().zip(&jm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    Ok(Estimate::from_samples(&diff))
}

/// Both sides of the fractional integration-by-parts identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// `∫⟨ψ, ᶜD^α_{b−} δx⟩ dt` against `⟨I^{1−α}ψ(0⁺), δx(0)⟩ + ∫⟨D^α_{0+} ψ, δx⟩ dt`
/// for one deterministic pair.
pub fn ibp_pair(psi: &WeightedGridFunction, delta_x: &GridFunction, alpha: FracOrder) -> Result<IbpReport> {
    let lhs = integrate_weighted_product(psi, &caputo_right(delta_x, alpha)?);
    let boundary = rl_integral_left_weighted(psi, 1.0 - alpha.value())?.value(0).dot(delta_x.value(0));
    let rhs = boundary + integrate_product(&rl_derivative_left_weighted(psi, alpha)?, delta_x);
    Ok(IbpReport { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Path-averaged identity for an adjoint process and linearized state paths.
pub fn ibp_identity_check(psi: &AdjointProcess, delta_x: &ProcessArray, alpha: FracOrder) -> Result<IbpReport> {
    let grid = psi.grid();
    let n_paths = delta_x.n_paths();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for p in 0..n_paths {
        let node = |arr: &ProcessArray, i: usize| DVector::from_column_slice(arr.get(p, i));
        let factor = GridFunction::new(grid, (0..=grid.n_steps()).map(|i| node(&psi.values, i)).collect())?;
        let exponent = match psi.form {
            crate::adjoint::AdjointForm::Regular => 0.0,
            crate::adjoint::AdjointForm::Singular => alpha.value() - 1.0,
        };
        let dx = GridFunction::new(grid, (0..=grid.n_steps()).map(|i| node(delta_x, i)).collect())?;
        let r = ibp_pair(&WeightedGridFunction::new(exponent, factor)?, &dx, alpha)?;
        lhs += r.lhs;
        rhs += r.rhs;
    }
    lhs /= n_paths as f64;
    rhs /= n_paths as f64;
    Ok(IbpReport { lhs, rhs, gap: (lhs - rhs).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::generate_paths;
    use crate::resolvent::build_resolvents;
    use crate::special::gamma_fn;

    fn setup(spec: &LqSpec, n_paths: usize) -> (ResolventTable, PathEnsemble) {
        let gen = GeneratorSpec::new(spec.a.clone()).unwrap();
        (build_resolvents(&gen, &spec.grid, spec.alpha, 32).unwrap(), generate_paths(&spec.noise, &spec.grid, n_paths).unwrap())
    }

    #[test]
    fn zero_terminal_weight_gives_zero_control() {
        let mut spec = LqSpec::scalar_benchmark(32, 1).unwrap();
        spec.g = DMatrix::zeros(1, 1);
        let (table, ens) = setup(&spec, 200);
        let sol = solve_lq(&spec, &table, &ens, 1e-10, 5).unwrap();
        assert_eq!(sol.fixed_point_iters, 1);
        assert!(sol.u_opt.value(17, 9).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_control_cost_telescopes() {
        let mut spec = LqSpec::scalar_benchmark(40, 1).unwrap();
        spec.g = DMatrix::zeros(1, 1);
        spec.pi = vec![DMatrix::from_element(1, 1, 2.0)];
        let (table, ens) = setup(&spec, 10);
        let u = ControlProcess::constant(&spec.grid, &[0.7]).unwrap();
        let solved = solve_backward(&spec.model().unwrap(), &u, &table, &ens).unwrap();
        let j = cost_functional(&spec, &u, &solved).unwrap();
        assert!((j.value - 2.0 * 0.49 / gamma_fn(1.75).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn control_follows_adjoint_formula() {
        let spec = LqSpec::scalar_benchmark(32, 3).unwrap();
        let (table, ens) = setup(&spec, 300);
        let sol = solve_lq(&spec, &table, &ens, 1e-8, 60).unwrap();
        let omega = cell_cost_rates(spec.alpha, &spec.grid).unwrap();
        for &(p, k) in &[(0, 0), (5, 10), (299, 31), (7, 32)] {
            let expected = -sol.psi.cell_value(p, k)[0] / (2.0 * omega[k]);
            assert!((sol.u_opt.value(p, k)[0] - expected).abs() <= 1e-14 * expected.abs());
        }
        assert!(sol.fixed_point_residual <= 1e-8);
    }

    #[test]
    fn block_control_layout() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let u = block_control(&grid, 4, &[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let v: Vec<f64> = (0..=8).map(|i| u.value(0, i)[0]).collect();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn invalid_weights_rejected() {
        let mut spec = LqSpec::scalar_benchmark(8, 1).unwrap();
        spec.pi = vec![DMatrix::from_element(1, 1, -1.0)];
        assert!(spec.validate().is_err());
        let mut spec = LqSpec::scalar_benchmark(8, 1).unwrap();
        spec.g = DMatrix::from_row_slice(1, 1, &[1.0]);
        spec.a = DMatrix::zeros(2, 2);
        assert!(spec.validate().is_err());
    }
}
