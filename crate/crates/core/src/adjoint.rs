//! Forward adjoint processes.
//!
//! The LQ adjoint is singular at the origin, `ψ(t) = t^{α−1}φ(t)`, and is stored
//! through its regular factor `φ`; the weighted initial datum
//! `I^{1−α}ψ(0⁺) = Γ(α)φ(0)` is kept alongside. Its discretization is the exact
//! transpose of the backward sweep, so the gradient of the discrete cost with
//! respect to `u_k` is `2 c_k Π u_k + w_k B*φ_k`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::backward::SolvedBackward;
use crate::error::{Error, Result};
use crate::grid::{kernel_weights, GridFunction, TimeGrid, WeightedGridFunction};
use crate::model::ModelSpec;
use crate::noise::{PathEnsemble, ProcessArray};
use crate::resolvent::ResolventTable;
use crate::special::FracOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointForm {
    /// Node values are `ψ(t_i)`.
    Regular,
    /// Node values are `φ(t_i)` with `ψ = t^{α−1}φ`.
    Singular,
}

#[derive(Debug, Clone)]
pub struct AdjointProcess {
    pub form: AdjointForm,
    pub values: ProcessArray,
    pub weighted_ic: DVector<f64>,
    alpha: FracOrder,
    grid: TimeGrid,
    origin_weights: Vec<f64>,
}

impl AdjointProcess {
    fn new(form: AdjointForm, values: ProcessArray, weighted_ic: DVector<f64>, alpha: FracOrder, grid: &TimeGrid) -> Self {
        let origin_weights = kernel_weights(alpha.value(), grid.n_steps() + 1, grid.dt());
        Self { form, values, weighted_ic, alpha, grid: grid.clone(), origin_weights }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values.width()
    }

    /// `ψ(t_i)`; for the singular form only defined for `i ≥ 1`.
    pub fn node_value(&self, path: usize, i: usize) -> Vec<f64> {
        let v = self.values.get(path, i);
        match self.form {
            AdjointForm::Regular => v.to_vec(),
            AdjointForm::Singular => {
                let s = self.grid.t(i).powf(self.alpha.value() - 1.0);
                v.iter().map(|x| x * s).collect()
            }
        }
    }

    /// Average of `ψ` over the cell `[t_i, t_i + dt]` (node value for the
    /// regular form).
    pub fn cell_value(&self, path: usize, i: usize) -> Vec<f64> {
        let v = self.values.get(path, i);
        match self.form {
            AdjointForm::Regular => v.to_vec(),
            AdjointForm::Singular => {
                let s = self.origin_weights[i] / self.grid.dt();
                v.iter().map(|x| x * s).collect()
            }
        }
    }

    /// Path average as a weighted grid function `t^{α−1}φ̄` (singular form) or
    /// `ψ̄` (regular form).
    pub fn mean_weighted(&self) -> Result<WeightedGridFunction> {
        let values = (0..=self.grid.n_steps()).map(|i| DVector::from_vec(self.values.mean_at(i))).collect();
        let factor = GridFunction::new(&self.grid, values)?;
        let exponent = match self.form {
            AdjointForm::Regular => 0.0,
            AdjointForm::Singular => self.alpha.value() - 1.0,
        };
        WeightedGridFunction::new(exponent, factor)
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }
}

fn flat_transpose(m: &DMatrix<f64>, s: f64) -> Vec<f64> {
    let n = m.nrows();
    (0..n * n).map(|k| s * m[(k % n, k / n)]).collect()
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    crate::backward::mat_vec_add(m, v, out)
}

/// Forward Volterra sweep for the general adjoint with frozen candidate data.
pub fn solve_psi_general(
    model: &ModelSpec,
    solved: &SolvedBackward,
    table: &ResolventTable,
    ensemble: &PathEnsemble,
) -> Result<AdjointProcess> {
    crate::backward::check_model(model, table, ensemble)?;
    let n = model.state_dim();
    let m = ensemble.modes();
    let grid = &model.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let w = kernel_weights(model.alpha.value(), n_steps, dt);
    let s_t: Vec<Vec<f64>> = table.s_alpha.iter().map(|s| flat_transpose(s, 1.0)).collect();
    let kernel: Vec<Vec<f64>> = (1..=n_steps).map(|d| flat_transpose(&table.p_alpha[d], w[d - 1])).collect();
    let kernel: Vec<Vec<f64>> = std::iter::once(Vec::new()).chain(kernel).collect();
    let kz_t: Vec<DMatrix<f64>> = model.driver.kappa_z().iter().map(|k| k.transpose()).collect();
    let lambdas = ensemble.spec().eigenvalues();
    let n_paths = ensemble.n_paths();

    let mut values = ProcessArray::zeros(n_paths, n_steps + 1, n);
    values.paths_mut().enumerate().try_for_each(|(p, row)| -> Result<()> {
        let hx = model.cost.terminal_x(solved.x.get(p, 0));
        mat_vec(&s_t[0], hx.as_slice(), &mut row[..n]);
        // Forcing of each cell: drift part and noise part (already divided by dt).
        let mut drift = vec![0.0; n_steps * n];
        for i in 1..=n_steps {
            let j = i - 1;
            let psi_j = DVector::from_column_slice(&row[j * n..(j + 1) * n]);
            let xp = solved.x_pred.get(p, j);
            let zj = solved.z.get(p, j);
            let mut f = model.driver.kappa_x(xp).transpose() * &psi_j + model.cost.running_x(solved.x.get(p, j));
            let lz = model.cost.running_z(zj);
            let dw = ensemble.increment(p, j);
            for k in 0..m {
                if lambdas[k] > 0.0 {
                    let lzk = DVector::from_column_slice(&lz.as_slice()[k * n..(k + 1) * n]);
                    f += (&kz_t[k] * &psi_j + lzk) * (dw[k] / (lambdas[k] * dt));
                }
            }
            drift[j * n..(j + 1) * n].copy_from_slice(f.as_slice());
            let out = &mut row[i * n..(i + 1) * n];
            mat_vec(&s_t[i], hx.as_slice(), out);
            for jj in 0..i {
                mat_vec(&kernel[i - jj], &drift[jj * n..(jj + 1) * n], out);
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { op: "solve_psi_general", step: i });
            }
        }
        Ok(())
    })?;
    let ic = DVector::from_vec(values.mean_at(0));
    Ok(AdjointProcess::new(AdjointForm::Regular, values, ic, model.alpha, grid))
}

/// LQ adjoint with weighted initial datum `2G·x0` (more generally `h_x(x0)`),
/// noise coupling `C_k^*` taken from the driver's `z`-derivative.
pub fn solve_psi_lq(model: &ModelSpec, x0: &[f64], table: &ResolventTable, ensemble: &PathEnsemble) -> Result<AdjointProcess> {
    crate::backward::check_model(model, table, ensemble)?;
    let ic = model.cost.terminal_x(x0);
    singular_adjoint(table, ensemble, model.driver.kappa_z(), &ic)
}

/// `φ_k = P*(t_k)·ic + (1/w_k) Σ_{j<k} w_{k−j} P*(t_k−t_j) Σ_m C_m^* w_j φ_j ΔB^m_j/(λ_m dt)`.
pub(crate) fn singular_adjoint(
    table: &ResolventTable,
    ensemble: &PathEnsemble,
    c_ops: &[DMatrix<f64>],
    ic: &DVector<f64>,
) -> Result<AdjointProcess> {
    let grid = &table.grid;
    let n = table.dim();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let w = kernel_weights(table.alpha.value(), n_steps + 1, dt);
    let p_t: Vec<Vec<f64>> = table.p_alpha.iter().map(|p| flat_transpose(p, 1.0)).collect();
    let c_t: Vec<Vec<f64>> = c_ops.iter().map(|c| flat_transpose(c, 1.0)).collect();
    let kernel: Vec<Vec<f64>> = table.p_alpha.iter().zip(&w).map(|(p, wd)| flat_transpose(p, *wd)).collect();
    let lambdas = ensemble.spec().eigenvalues();
    let coupled = c_ops.iter().zip(lambdas).any(|(c, l)| *l > 0.0 && c.iter().any(|v| *v != 0.0));
    let n_paths = ensemble.n_paths();

    let mut values = ProcessArray::zeros(n_paths, n_steps + 1, n);
    let deterministic: Vec<Vec<f64>> = (0..=n_steps)
        .map(|k| {
            let mut v = vec![0.0; n];
            mat_vec(&p_t[k], ic.as_slice(), &mut v);
            v
        })
        .collect();
    values.paths_mut().enumerate().try_for_each(|(p, row)| -> Result<()> {
        let mut noise = vec![0.0; n_steps * n];
        for k in 0..=n_steps {
            let (head, tail) = row.split_at_mut(k * n);
            let out = &mut tail[..n];
            out.copy_from_slice(&deterministic[k]);
            if coupled && k > 0 {
                let j = k - 1;
                let phi_j = &head[j * n..(j + 1) * n];
                let dw = ensemble.increment(p, j);
                let seg = &mut noise[j * n..(j + 1) * n];
                for (mode, ct) in c_t.iter().enumerate() {
                    if lambdas[mode] > 0.0 {
                        let mut tmp = vec![0.0; n];
                        mat_vec(ct, phi_j, &mut tmp);
                        let s = w[j] * dw[mode] / (lambdas[mode] * dt);
                        for (a, t) in seg.iter_mut().zip(&tmp) {
                            *a += s * t;
                        }
                    }
                }
                let mut acc = vec![0.0; n];
                for jj in 0..k {
                    mat_vec(&kernel[k - jj], &noise[jj * n..(jj + 1) * n], &mut acc);
                }
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o += a / w[k];
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { op: "solve_psi_lq", step: k });
            }
        }
        Ok(())
    })?;
    let weighted_ic = ic.clone();
    Ok(AdjointProcess::new(AdjointForm::Singular, values, weighted_ic, table.alpha, grid))
}
