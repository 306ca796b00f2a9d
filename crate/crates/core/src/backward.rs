//! Backward sweep for the mild-form fractional backward equation.
//!
//! At node `t_i` every path forms
//! `R_i = S_α(b−t_i)ξ + Σ_{j>i} w_{j−i} P_α(t_j−t_i) (κ_j + z_j ΔB_j/dt)`,
//! the predictor `x̃_i = E[R_i | F_i]` and `z_{i,k} = E[(R_i − x̃_i)ΔB^k_i | F_i]/(λ_k dt)`
//! are regressed on time-`t_i` features, and the local cell is closed by
//! `x_i = x̃_i + w_0 P_α(0) κ(x̃_i, z_i, u_i)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::kernel_weights;
use crate::model::{ControlProcess, ModelSpec};
use crate::noise::{PathEnsemble, ProcessArray};
use crate::regression::fit_projection;
use crate::resolvent::ResolventTable;

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub residual_rms: f64,
    pub condition: f64,
    pub features: usize,
}

/// Solution pair on every path and node, with the regression predictor kept
/// for linearizations around it.
#[derive(Debug, Clone)]
pub struct SolvedBackward {
    pub x: ProcessArray,
    pub x_pred: ProcessArray,
    /// `n·m` values per node, mode-major; zero at the terminal node.
    pub z: ProcessArray,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SolvedBackward {
    pub fn n_paths(&self) -> usize {
        self.x.n_paths()
    }

    pub fn mean_x0(&self) -> Vec<f64> {
        self.x.mean_at(0)
    }
}

/// Square matrices flattened row-major.
pub(crate) struct Kernels {
    pub n: usize,
    pub terminal: Vec<Vec<f64>>,
    pub forcing: Vec<Vec<f64>>,
}

impl Kernels {
    pub fn new(table: &ResolventTable) -> Self {
        let grid = &table.grid;
        let n_steps = grid.n_steps();
        let w = kernel_weights(table.alpha.value(), n_steps, grid.dt());
        let flat = |m: &nalgebra::DMatrix<f64>, s: f64| -> Vec<f64> {
            let n = m.nrows();
            (0..n * n).map(|k| s * m[(k / n, k % n)]).collect()
        };
        Self {
            n: table.dim(),
            terminal: table.s_alpha.iter().map(|s| flat(s, 1.0)).collect(),
            forcing: (0..n_steps).map(|d| flat(&table.p_alpha[d], w[d])).collect(),
        }
    }
}

pub(crate) fn mat_vec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub(crate) fn check_compatible(table: &ResolventTable, ensemble: &PathEnsemble, dim: usize) -> Result<()> {
    if &table.grid != ensemble.grid() {
        return Err(Error::domain("solve_backward", "resolvent table and ensemble use different grids"));
    }
    if table.dim() != dim {
        return Err(Error::domain("solve_backward", "resolvent dimension differs from the state dimension"));
    }
    Ok(())
}

/// Feature rows at node `i`: Brownian values of modes with positive variance,
/// then any extra per-path features.
fn feature_rows(brownian: &ProcessArray, active: &[usize], extra: Option<&ProcessArray>, node: usize) -> Vec<Vec<f64>> {
    (0..brownian.n_paths())
        .map(|p| {
            let b = brownian.get(p, node);
            let mut row: Vec<f64> = active.iter().map(|&k| b[k]).collect();
            if let Some(e) = extra {
                row.extend_from_slice(e.get(p, node));
            }
            row
        })
        .collect()
}

/// Generic explicit backward sweep. `local(path, node, x_pred, z, out)` writes
/// the driver value of the cell starting at `node`.
pub(crate) fn sweep<F>(
    op: &'static str,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
    terminal: &ProcessArray,
    extra_features: Option<&ProcessArray>,
    local: F,
) -> Result<SolvedBackward>
where
    F: Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync,
{
    let kernels = Kernels::new(table);
    let n = kernels.n;
    check_compatible(table, ensemble, n)?;
    let grid = ensemble.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_paths = ensemble.n_paths();
    let m = ensemble.modes();
    let lambdas = ensemble.spec().eigenvalues().to_vec();
    let active: Vec<usize> = (0..m).filter(|&k| lambdas[k] > 0.0).collect();
    let brownian = ensemble.brownian_values();

    let mut x = ProcessArray::zeros(n_paths, n_steps + 1, n);
    let mut x_pred = ProcessArray::zeros(n_paths, n_steps + 1, n);
    let mut z = ProcessArray::zeros(n_paths, n_steps + 1, n * m);
    let mut forcing = ProcessArray::zeros(n_paths, n_steps, n);
    for p in 0..n_paths {
        x.get_mut(p, n_steps).copy_from_slice(terminal.get(p, 0));
        x_pred.get_mut(p, n_steps).copy_from_slice(terminal.get(p, 0));
    }
    let scalar_kernel: Vec<f64> = kernels.forcing.iter().map(|k| k[0]).collect();
    let mut diagnostics = Vec::with_capacity(n_steps);
    let mut raw = vec![0.0; n_paths * n];

    for i in (0..n_steps).rev() {
        raw.par_chunks_mut(n).enumerate().for_each(|(p, r)| {
            r.fill(0.0);
            mat_vec_add(&kernels.terminal[n_steps - i], terminal.get(p, 0), r);
            if n == 1 {
                let history = &forcing.path(p)[i + 1..n_steps];
                r[0] += scalar_kernel[1..n_steps - i].iter().zip(history).map(|(k, g)| k * g).sum::<f64>();
            } else {
                for j in i + 1..n_steps {
                    mat_vec_add(&kernels.forcing[j - i], forcing.get(p, j), r);
                }
            }
        });
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { op, step: i });
        }
        let rows = feature_rows(&brownian, &active, extra_features, i);
        let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let proj = fit_projection(i, &row_refs)?;

        let mut pred = vec![0.0; n_paths * n];
        let mut response = vec![0.0; n_paths];
        for r in 0..n {
            response.iter_mut().enumerate().for_each(|(p, v)| *v = raw[p * n + r]);
            for (p, v) in proj.project(&response).into_iter().enumerate() {
                pred[p * n + r] = v;
            }
        }
        let mut zi = vec![0.0; n_paths * n * m];
        for &k in &active {
            let denom = lambdas[k] * dt;
            for r in 0..n {
                response.iter_mut().enumerate().for_each(|(p, v)| {
                    *v = (raw[p * n + r] - pred[p * n + r]) * ensemble.increment(p, i)[k] / denom;
                });
                for (p, v) in proj.project(&response).into_iter().enumerate() {
                    zi[p * n * m + k * n + r] = v;
                }
            }
        }
        let residual_rms = (raw.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();

        let k0 = &kernels.forcing[0];
        let updates: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let xp = &pred[p * n..(p + 1) * n];
                let zp = &zi[p * n * m..(p + 1) * n * m];
                let mut kappa = vec![0.0; n];
                local(p, i, xp, zp, &mut kappa);
                let mut xi = xp.to_vec();
                mat_vec_add(k0, &kappa, &mut xi);
                let dw = ensemble.increment(p, i);
                for (k, dwk) in dw.iter().enumerate() {
                    for r in 0..n {
                        kappa[r] += zp[k * n + r] * dwk / dt;
                    }
                }
                (xi, kappa)
            })
            .collect();
        for (p, (xi, g)) in updates.into_iter().enumerate() {
            if xi.iter().chain(&g).any(|v| !v.is_finite()) {
                return Err(Error::Divergence { op, step: i });
            }
            x.get_mut(p, i).copy_from_slice(&xi);
            x_pred.get_mut(p, i).copy_from_slice(&pred[p * n..(p + 1) * n]);
            z.get_mut(p, i).copy_from_slice(&zi[p * n * m..(p + 1) * n * m]);
            forcing.get_mut(p, i).copy_from_slice(&g);
        }
        diagnostics.push(StepDiagnostics { step: i, residual_rms, condition: proj.condition, features: proj.kept_features });
    }
    diagnostics.reverse();
    Ok(SolvedBackward { x, x_pred, z, diagnostics })
}

/// Terminal values `ξ(path)` as an `M × 1 × n` array.
pub(crate) fn terminal_values(model: &ModelSpec, ensemble: &PathEnsemble) -> ProcessArray {
    let n = model.state_dim();
    let n_steps = ensemble.grid().n_steps();
    let mut out = ProcessArray::zeros(ensemble.n_paths(), 1, n);
    if model.terminal.is_deterministic() {
        for p in 0..ensemble.n_paths() {
            out.get_mut(p, 0).copy_from_slice(model.terminal.base.as_slice());
        }
    } else {
        let brownian = ensemble.brownian_values();
        for p in 0..ensemble.n_paths() {
            model.terminal.value(brownian.get(p, n_steps), out.get_mut(p, 0));
        }
    }
    out
}

pub(crate) fn check_model(model: &ModelSpec, table: &ResolventTable, ensemble: &PathEnsemble) -> Result<()> {
    model.validate()?;
    if model.grid != table.grid || model.alpha != table.alpha {
        return Err(Error::domain("solve_backward", "resolvent table was built for another grid or order"));
    }
    if ensemble.spec().modes() != model.noise.modes() {
        return Err(Error::domain("solve_backward", "ensemble noise modes differ from the model"));
    }
    check_compatible(table, ensemble, model.state_dim())
}

/// Solves the controlled backward equation for `control` on every path.
pub fn solve_backward(
    model: &ModelSpec,
    control: &ControlProcess,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<SolvedBackward> {
    check_model(model, table, ensemble)?;
    if control.dim() != model.control_dim() || control.n_nodes() != model.grid.n_steps() + 1 {
        return Err(Error::domain("solve_backward", "control shape does not match the model"));
    }
    let terminal = terminal_values(model, ensemble);
    sweep("solve_backward", table, ensemble, &terminal, control.features(), |p, i, x, z, out| {
        model.driver.kappa(x, z, control.value(p, i), out)
    })
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let value = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - value).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { value, standard_error: (var / n).sqrt() }
    }
}

/// Per-path cost `h(x_0) + Σ_k c_k l(t_k, x_k, z_k, u_k)`.
pub fn cost_per_path(model: &ModelSpec, control: &ControlProcess, solved: &SolvedBackward) -> Result<Vec<f64>> {
    let weights = model.cost_weights()?;
    Ok((0..solved.n_paths())
        .into_par_iter()
        .map(|p| {
            let running: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, c)| c * model.cost.running(k, solved.x.get(p, k), solved.z.get(p, k), control.value(p, k)))
                .sum();
            model.cost.terminal(solved.x.get(p, 0)) + running
        })
        .collect())
}

pub fn evaluate_cost(model: &ModelSpec, control: &ControlProcess, solved: &SolvedBackward) -> Result<Estimate> {
    Ok(Estimate::from_samples(&cost_per_path(model, control, solved)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::model::{ControlBox, CostSpec, DriverSpec, Terminal};
    use crate::noise::{generate_paths, NoiseSpec};
    use crate::resolvent::{build_resolvents, GeneratorSpec};
    use crate::special::{gamma_fn, FracOrder};
    use nalgebra::{DMatrix, DVector};

    fn model(a: f64, driver: DriverSpec, xi: f64, lambda: f64, n_steps: usize) -> ModelSpec {
        let grid = TimeGrid::new(1.0, n_steps).unwrap();
        ModelSpec {
            alpha: FracOrder::new(0.75).unwrap(),
            grid,
            generator: GeneratorSpec::scalar(a).unwrap(),
            driver,
            terminal: Terminal::constant(DVector::from_element(1, xi), 1),
            cost: CostSpec::quadratic(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)),
            noise: NoiseSpec::new(vec![lambda], 5).unwrap(),
            control_box: ControlBox::new(vec![-5.0], vec![5.0]).unwrap(),
        }
    }

    #[test]
    fn zero_driver_propagates_terminal_value() {
        let m = model(-1.0, DriverSpec::zero(1, 1, 1), 1.5, 1.0, 32);
        let table = build_resolvents(&m.generator, &m.grid, m.alpha, 32).unwrap();
        let ens = generate_paths(&m.noise, &m.grid, 200).unwrap();
        let u = ControlProcess::constant(&m.grid, &[0.0]).unwrap();
        let sol = solve_backward(&m, &u, &table, &ens).unwrap();
        for p in [0, 77, 199] {
            assert_eq!(sol.x.get(p, 32)[0], 1.5);
            for i in 0..=32 {
                let exact = table.s_alpha[32 - i][(0, 0)] * 1.5;
                assert!((sol.x.get(p, i)[0] - exact).abs() < 1e-12);
                assert!(sol.z.get(p, i)[0].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_driver_telescopes() {
        let c = 0.8;
        let d = DriverSpec::linear(DMatrix::zeros(1, 1), vec![DMatrix::zeros(1, 1)], DMatrix::zeros(1, 1), DVector::from_element(1, c)).unwrap();
        let m = model(0.0, d, 0.0, 0.0, 40);
        let table = build_resolvents(&m.generator, &m.grid, m.alpha, 32).unwrap();
        let ens = generate_paths(&m.noise, &m.grid, 1).unwrap();
        let u = ControlProcess::constant(&m.grid, &[0.0]).unwrap();
        let sol = solve_backward(&m, &u, &table, &ens).unwrap();
        let g = gamma_fn(1.75).unwrap();
        for i in 0..=40 {
            let exact = c * (1.0 - m.grid.t(i)).powf(0.75) / g;
            assert!((sol.x.get(0, i)[0] - exact).abs() < 1e-10, "node {i}");
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let d = DriverSpec::linear(DMatrix::zeros(1, 1), vec![DMatrix::from_element(1, 1, 0.5)], DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap();
        let mut m = model(-1.0, d, 1.0, 1.0, 16);
        m.terminal.loading[(0, 0)] = 0.7;
        let table = build_resolvents(&m.generator, &m.grid, m.alpha, 32).unwrap();
        let ens = generate_paths(&m.noise, &m.grid, 300).unwrap();
        let u = ControlProcess::deterministic(&m.grid, 1, |i| vec![(i as f64 * 0.3).sin()]).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| solve_backward(&m, &u, &table, &ens).unwrap());
        let b = three.install(|| solve_backward(&m, &u, &table, &ens).unwrap());
        assert_eq!(a.x, b.x);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let m = model(-1.0, DriverSpec::zero(1, 1, 1), 1.0, 1.0, 8);
        let table = build_resolvents(&m.generator, &TimeGrid::new(1.0, 9).unwrap(), m.alpha, 32).unwrap();
        let ens = generate_paths(&m.noise, &m.grid, 10).unwrap();
        let u = ControlProcess::constant(&m.grid, &[0.0]).unwrap();
        assert!(solve_backward(&m, &u, &table, &ens).is_err());
    }
}
