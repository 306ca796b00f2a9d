//! Discrete fractional calculus on a uniform time grid.
//!
//! Every singular kernel is integrated exactly (or by an endpoint-adapted
//! Gauss rule when no closed form exists) cell by cell, so the uniform grid
//! never needs grading near the singular endpoints.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;
use crate::special::{gamma_fn, FracOrder};

/// Uniform partition of `[0, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    b: f64,
    n_steps: usize,
    dt: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(b: f64, n_steps: usize) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::domain("TimeGrid", format!("horizon {b} must be positive and finite")));
        }
        if n_steps == 0 {
            return Err(Error::domain("TimeGrid", "n_steps must be positive"));
        }
        let dt = b / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
        nodes[n_steps] = b;
        Ok(Self { b, n_steps, dt, nodes })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Nearest node index to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }
}

/// Vector-valued function sampled on every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
    dim: usize,
    /// Node whose value was copied from its neighbour because the operator is
    /// singular there.
    extrapolated_node: Option<usize>,
}

impl GridFunction {
    pub fn new(grid: &TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_steps() + 1 {
            return Err(Error::domain(
                "GridFunction",
                format!("expected {} node values, got {}", grid.n_steps() + 1, values.len()),
            ));
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::domain("GridFunction", "dimension must be positive"));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::domain("GridFunction", format!("node {i} has dimension {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain("GridFunction", format!("non-finite value at node {i}")));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            values,
            dim,
            extrapolated_node: None,
        })
    }

    pub fn from_fn(grid: &TimeGrid, dim: usize, f: impl Fn(f64) -> DVector<f64>) -> Result<Self> {
        Self::new(grid, grid.nodes().iter().map(|&t| f(t)).collect::<Vec<_>>()).and_then(|g| {
            if g.dim == dim {
                Ok(g)
            } else {
                Err(Error::domain("GridFunction", format!("closure returned dimension {}, expected {dim}", g.dim)))
            }
        })
    }

    pub fn scalar(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn(grid, 1, |t| DVector::from_element(1, f(t)))
    }

    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![DVector::zeros(dim); grid.n_steps() + 1],
            dim,
            extrapolated_node: None,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn extrapolated_node(&self) -> Option<usize> {
        self.extrapolated_node
    }

    /// Scalar component `k` as a plain vector over nodes.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[k]).collect()
    }

    fn from_components(grid: &TimeGrid, comps: &[Vec<f64>]) -> Self {
        let values = (0..=grid.n_steps())
            .map(|i| DVector::from_iterator(comps.len(), comps.iter().map(|c| c[i])))
            .collect();
        Self {
            grid: grid.clone(),
            values,
            dim: comps.len(),
            extrapolated_node: None,
        }
    }

    fn map_components(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let comps: Vec<Vec<f64>> = (0..self.dim).map(|k| f(&self.component(k))).collect();
        Self::from_components(&self.grid, &comps)
    }
}

/// Which side of the evaluation node a singular weighted sum covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// ∫₀^t (t−s)^{α−1} f(s) ds
    LeftOfT,
    /// ∫_t^b (s−t)^{α−1} f(s) ds
    RightOfT,
}

/// Exact cell integrals of the singular kernel: `w[d] = ∫ over the cell at
/// distance d of u^{α−1} du = dt^α((d+1)^α − d^α)/α`.
pub fn kernel_weights(alpha: f64, n: usize, dt: f64) -> Vec<f64> {
    let scale = dt.powf(alpha) / alpha;
    (0..n)
        .map(|d| {
            let d = d as f64;
            scale * ((d + 1.0).powf(alpha) - d.powf(alpha))
        })
        .collect()
}

/// Product-integration sum of the kernel (s−t)^{α−1} (or (t−s)^{α−1})
/// against left-endpoint values of `f`.
pub fn singular_weighted_sum(f: &GridFunction, t_index: usize, alpha: FracOrder, side: Side) -> Result<DVector<f64>> {
    let grid = f.grid();
    let n = grid.n_steps();
    if t_index > n {
        return Err(Error::domain("singular_weighted_sum", format!("node {t_index} beyond {n}")));
    }
    let w = kernel_weights(alpha.value(), n, grid.dt());
    let mut acc = DVector::zeros(f.dim());
    match side {
        Side::RightOfT => {
            for j in t_index..n {
                acc.axpy(w[j - t_index], f.value(j), 1.0);
            }
        }
        Side::LeftOfT => {
            for j in 0..t_index {
                acc.axpy(w[t_index - 1 - j], f.value(j), 1.0);
            }
        }
    }
    Ok(acc)
}

fn check_order(op: &'static str, order: f64) -> Result<()> {
    if order > 0.0 && order < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("order {order} outside (0, 1)")))
    }
}

/// Left Riemann–Liouville integral by product integration against the
/// piecewise-linear interpolant.
pub fn rl_integral_left(f: &GridFunction, order: f64) -> Result<GridFunction> {
    check_order("rl_integral_left", order)?;
    let stencil = RlStencil::new(f.grid(), order, 0.0)?;
    Ok(f.map_components(|c| stencil.apply(c)))
}

/// L1 weights `a[k] = dt^{1−α}(k^{1−α} − (k−1)^{1−α})/Γ(2−α)` for k ≥ 1.
fn l1_weights(alpha: f64, n: usize, dt: f64) -> Result<Vec<f64>> {
    let beta = 1.0 - alpha;
    let scale = dt.powf(beta) / gamma_fn(2.0 - alpha)?;
    Ok((0..=n)
        .map(|k| if k == 0 { 0.0 } else { scale * ((k as f64).powf(beta) - ((k - 1) as f64).powf(beta)) })
        .collect())
}

/// Left Caputo derivative by the L1 scheme; zero at t₀.
pub fn caputo_left(f: &GridFunction, alpha: FracOrder) -> Result<GridFunction> {
    let grid = f.grid();
    let n = grid.n_steps();
    if n < 2 {
        return Err(Error::domain("caputo_left", "needs at least two steps"));
    }
    let a = l1_weights(alpha.value(), n, grid.dt())?;
    let dt = grid.dt();
    Ok(f.map_components(|c| {
        (0..=n)
            .map(|i| (1..=i).map(|k| a[k] * (c[i - k + 1] - c[i - k]) / dt).sum())
            .collect()
    }))
}

/// Right Caputo derivative by the mirrored L1 scheme; zero at t_N.
pub fn caputo_right(f: &GridFunction, alpha: FracOrder) -> Result<GridFunction> {
    let grid = f.grid();
    let n = grid.n_steps();
    if n < 2 {
        return Err(Error::domain("caputo_right", "needs at least two steps"));
    }
    let a = l1_weights(alpha.value(), n, grid.dt())?;
    let dt = grid.dt();
    Ok(f.map_components(|c| {
        (0..=n)
            .map(|i| (1..=n - i).map(|k| a[k] * (c[i + k - 1] - c[i + k]) / dt).sum())
            .collect()
    }))
}

/// Left Riemann–Liouville derivative: backward difference of the (1−α)
/// integral. The value at t₀ is copied from t₁ and flagged.
pub fn rl_derivative_left(f: &GridFunction, alpha: FracOrder) -> Result<GridFunction> {
    let integral = rl_integral_left(f, 1.0 - alpha.value())?;
    Ok(difference_quotient(&integral))
}

fn difference_quotient(g: &GridFunction) -> GridFunction {
    let dt = g.grid().dt();
    let mut out = g.map_components(|c| {
        let mut d: Vec<f64> = (0..c.len()).map(|i| if i == 0 { 0.0 } else { (c[i] - c[i - 1]) / dt }).collect();
        if d.len() > 1 {
            d[0] = d[1];
        }
        d
    });
    out.extrapolated_node = Some(0);
    out
}

/// A grid function with an explicit algebraic factor at the origin:
/// `f(t) = t^{exponent} · factor(t)` with a regular `factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGridFunction {
    pub exponent: f64,
    pub factor: GridFunction,
}

impl WeightedGridFunction {
    pub fn new(exponent: f64, factor: GridFunction) -> Result<Self> {
        if !(exponent > -1.0 && exponent <= 0.0) {
            return Err(Error::domain("WeightedGridFunction", format!("exponent {exponent} outside (-1, 0]")));
        }
        Ok(Self { exponent, factor })
    }

    /// Pointwise value at node `i ≥ 1`.
    pub fn node_value(&self, i: usize) -> DVector<f64> {
        self.factor.value(i) * self.factor.grid().t(i).powf(self.exponent)
    }
}

/// Product-integration weights for `(1/Γ(order))∫₀^{t_i}(t_i−s)^{order−1} s^q φ̃(s) ds`
/// with φ̃ the piecewise-linear interpolant of node values.
#[derive(Debug, Clone)]
pub struct RlStencil {
    rows: Vec<Vec<f64>>,
}

impl RlStencil {
    pub fn new(grid: &TimeGrid, order: f64, weight_exponent: f64) -> Result<Self> {
        check_order("RlStencil", order)?;
        let n = grid.n_steps();
        let dt = grid.dt();
        let scale = 1.0 / gamma_fn(order)?;
        let p = order - 1.0;
        let q = weight_exponent;
        let rule = gauss_legendre(20);
        let rows = (0..=n)
            .map(|i| {
                let ti = i as f64 * dt;
                let mut row = vec![0.0; i + 1];
                for j in 0..i {
                    let (a, b) = (j as f64 * dt, (j + 1) as f64 * dt);
                    let (m0, m1) = if q == 0.0 {
                        exact_kernel_moments(ti, a, b, p)
                    } else {
                        adapted_moments(&rule, ti, a, b, p, q)
                    };
                    // Linear interpolant: φ_j (b − s)/dt + φ_{j+1} (s − a)/dt.
                    row[j] += scale * (b * m0 - m1) / dt;
                    row[j + 1] += scale * (m1 - a * m0) / dt;
                }
                row
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().zip(values).map(|(w, v)| w * v).sum())
            .collect()
    }
}

/// ∫_a^b (T−s)^p {1, s} ds in closed form.
fn exact_kernel_moments(t: f64, a: f64, b: f64, p: f64) -> (f64, f64) {
    let (ua, ub) = (t - a, t - b);
    let e1 = p + 1.0;
    let e2 = p + 2.0;
    let i0 = (ua.powf(e1) - ub.powf(e1)) / e1;
    let i1 = (ua.powf(e2) - ub.powf(e2)) / e2;
    // s = T − u
    (i0, t * i0 - i1)
}

/// ∫_a^b (T−s)^p s^q {1, s} ds with power substitutions at singular endpoints.
fn adapted_moments(rule: &(Vec<f64>, Vec<f64>), t: f64, a: f64, b: f64, p: f64, q: f64) -> (f64, f64) {
    const STRETCH: f64 = 3.0;
    let left_singular = a == 0.0 && q < 0.0;
    let right_singular = (t - b).abs() <= 1e-12 * t.max(1.0) && p < 0.0;
    if left_singular && right_singular {
        let mid = 0.5 * (a + b);
        let (l0, l1) = adapted_moments(rule, t, a, mid, p, q);
        let (r0, r1) = adapted_moments(rule, t, mid, b, p, q);
        return (l0 + r0, l1 + r1);
    }
    let (xs, ws) = rule;
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    for (&x, &w) in xs.iter().zip(ws) {
        let v = 0.5 * (x + 1.0);
        let (s, weight) = if left_singular {
            let e = STRETCH / (1.0 + q);
            let s = b * v.powf(e);
            (s, 0.5 * w * b.powf(1.0 + q) * e * v.powf(STRETCH - 1.0) * (t - s).powf(p))
        } else if right_singular {
            let e = STRETCH / (1.0 + p);
            let u = (t - a) * v.powf(e);
            let s = t - u;
            (s, 0.5 * w * (t - a).powf(1.0 + p) * e * v.powf(STRETCH - 1.0) * s.powf(q))
        } else {
            let s = a + (b - a) * v;
            (s, 0.5 * w * (b - a) * (t - s).powf(p) * s.powf(q))
        };
        m0 += weight;
        m1 += weight * s;
    }
    (m0, m1)
}

/// `(1/Γ(order))∫₀^{t}(t−s)^{order−1} f(s) ds` for a weighted grid function.
/// Node 0 carries the limit at 0⁺ (finite when exponent + order ≥ 0).
pub fn rl_integral_left_weighted(f: &WeightedGridFunction, order: f64) -> Result<GridFunction> {
    let grid = f.factor.grid();
    let stencil = RlStencil::new(grid, order, f.exponent)?;
    let q = f.exponent;
    let limit_scale = if (q + order).abs() < 1e-14 {
        gamma_fn(q + 1.0)? / gamma_fn(q + 1.0 + order)?
    } else if q + order > 0.0 {
        0.0
    } else {
        return Err(Error::domain(
            "rl_integral_left_weighted",
            format!("integral diverges at 0+ for exponent {q} and order {order}"),
        ));
    };
    let mut out = f.factor.map_components(|c| stencil.apply(c));
    for k in 0..out.dim {
        out.values[0][k] = limit_scale * f.factor.value(0)[k];
    }
    Ok(out)
}

/// Left RL derivative of a weighted grid function (see [`rl_derivative_left`]).
pub fn rl_derivative_left_weighted(f: &WeightedGridFunction, alpha: FracOrder) -> Result<GridFunction> {
    Ok(difference_quotient(&rl_integral_left_weighted(f, 1.0 - alpha.value())?))
}

/// ∫₀^b ⟨f, g⟩ dt with the singular factor integrated exactly against the
/// piecewise-linear interpolant of ⟨factor, g⟩.
pub fn integrate_weighted_product(f: &WeightedGridFunction, g: &GridFunction) -> f64 {
    let grid = g.grid();
    let dt = grid.dt();
    let q = f.exponent;
    let prod: Vec<f64> = (0..=grid.n_steps()).map(|i| f.factor.value(i).dot(g.value(i))).collect();
    let mut total = 0.0;
    for k in 0..grid.n_steps() {
        let (a, b) = (k as f64 * dt, (k + 1) as f64 * dt);
        let m0 = (b.powf(q + 1.0) - a.powf(q + 1.0)) / (q + 1.0);
        let m1 = (b.powf(q + 2.0) - a.powf(q + 2.0)) / (q + 2.0);
        total += prod[k] * (b * m0 - m1) / dt + prod[k + 1] * (m1 - a * m0) / dt;
    }
    total
}

/// Trapezoidal ∫₀^b ⟨f, g⟩ dt.
pub fn integrate_product(f: &GridFunction, g: &GridFunction) -> f64 {
    let n = f.grid().n_steps();
    let dt = f.grid().dt();
    (0..n)
        .map(|k| 0.5 * dt * (f.value(k).dot(g.value(k)) + f.value(k + 1).dot(g.value(k + 1))))
        .sum()
}
