//! Controlled backward system data: driver, costs, terminal datum, controls.
//!
//! A state process carries `n` components, the noise `m` modes and the
//! control `d` components. The martingale integrand `z` is stored per node as
//! `n·m` values, mode-major: mode `k` occupies `z[k n .. (k+1) n]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{kernel_weights, TimeGrid};
use crate::noise::{NoiseSpec, ProcessArray};
use crate::resolvent::GeneratorSpec;
use crate::special::{gamma_fn, FracOrder};

fn check_shape(what: &'static str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::domain(what, format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(what, "non-finite entry"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Linear,
    BoundedNonlinear,
}

/// `κ(x, z, u) = K_x x + Σ_k K_{z,k} z_k + K_u u + c + β sin(x)`, the sine
/// acting componentwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSpec {
    kx: DMatrix<f64>,
    kz: Vec<DMatrix<f64>>,
    ku: DMatrix<f64>,
    offset: DVector<f64>,
    sine: f64,
}

impl DriverSpec {
    pub fn linear(kx: DMatrix<f64>, kz: Vec<DMatrix<f64>>, ku: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let n = kx.nrows();
        check_shape("driver K_x", &kx, n, n)?;
        for k in &kz {
            check_shape("driver K_z", k, n, n)?;
        }
        check_shape("driver K_u", &ku, n, ku.ncols())?;
        if kz.is_empty() || offset.len() != n || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("DriverSpec", "need one K_z per noise mode and an offset of length n"));
        }
        Ok(Self { kx, kz, ku, offset, sine: 0.0 })
    }

    pub fn bounded_nonlinear(self, beta: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::domain("DriverSpec", "non-finite sine amplitude"));
        }
        Ok(Self { sine: beta, ..self })
    }

    pub fn zero(n: usize, modes: usize, control_dim: usize) -> Self {
        Self {
            kx: DMatrix::zeros(n, n),
            kz: vec![DMatrix::zeros(n, n); modes],
            ku: DMatrix::zeros(n, control_dim),
            offset: DVector::zeros(n),
            sine: 0.0,
        }
    }

    pub fn kind(&self) -> DriverKind {
        if self.sine == 0.0 {
            DriverKind::Linear
        } else {
            DriverKind::BoundedNonlinear
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kx.nrows()
    }

    pub fn modes(&self) -> usize {
        self.kz.len()
    }

    pub fn control_dim(&self) -> usize {
        self.ku.ncols()
    }

    pub fn kappa(&self, x: &[f64], z: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        for r in 0..n {
            let mut acc = self.offset[r] + self.sine * x[r].sin();
            for (c, xc) in x.iter().enumerate().take(n) {
                acc += self.kx[(r, c)] * xc;
            }
            for (k, kz) in self.kz.iter().enumerate() {
                for c in 0..n {
                    acc += kz[(r, c)] * z[k * n + c];
                }
            }
            for (c, uc) in u.iter().enumerate() {
                acc += self.ku[(r, c)] * uc;
            }
            out[r] = acc;
        }
    }

    pub fn kappa_x(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.kx.clone();
        if self.sine != 0.0 {
            for (r, xr) in x.iter().enumerate() {
                m[(r, r)] += self.sine * xr.cos();
            }
        }
        m
    }

    pub fn kappa_z(&self) -> &[DMatrix<f64>] {
        &self.kz
    }

    pub fn kappa_u(&self) -> &DMatrix<f64> {
        &self.ku
    }

    /// Bound on `‖κ_x‖ + ‖κ_z‖`.
    pub fn lipschitz_bound(&self) -> f64 {
        crate::resolvent::operator_norm(&self.kx)
            + self.sine.abs()
            + self.kz.iter().map(crate::resolvent::operator_norm).sum::<f64>()
    }
}

/// Terminal datum `ξ = base + loading · B(b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    pub base: DVector<f64>,
    pub loading: DMatrix<f64>,
}

impl Terminal {
    pub fn constant(base: DVector<f64>, modes: usize) -> Self {
        let n = base.len();
        Self { base, loading: DMatrix::zeros(n, modes) }
    }

    pub fn is_deterministic(&self) -> bool {
        self.loading.iter().all(|v| *v == 0.0)
    }

    pub fn value(&self, brownian_end: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.base[r] + brownian_end.iter().enumerate().map(|(k, b)| self.loading[(r, k)] * b).sum::<f64>();
        }
    }
}

/// Quadratic costs:
/// `h(x) = xᵀGx + gᵀx`, `l(t_i, x, z, u) = xᵀQx + qᵀx + ρ‖z‖² + uᵀΠ_i u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub g: DMatrix<f64>,
    pub g_lin: DVector<f64>,
    pub q: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub z_weight: f64,
    /// One matrix for a constant weight, or one per grid node.
    pub pi: Vec<DMatrix<f64>>,
}

impl CostSpec {
    pub fn quadratic(g: DMatrix<f64>, pi: DMatrix<f64>) -> Self {
        let n = g.nrows();
        Self { g, g_lin: DVector::zeros(n), q: DMatrix::zeros(n, n), q_lin: DVector::zeros(n), z_weight: 0.0, pi: vec![pi] }
    }

    pub fn pi_at(&self, node: usize) -> &DMatrix<f64> {
        if self.pi.len() == 1 {
            &self.pi[0]
        } else {
            &self.pi[node]
        }
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        quad_form(&self.g, x) + self.g_lin.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn terminal_x(&self, x: &[f64]) -> DVector<f64> {
        let x = DVector::from_column_slice(x);
        (&self.g + self.g.transpose()) * x + &self.g_lin
    }

    pub fn running(&self, node: usize, x: &[f64], z: &[f64], u: &[f64]) -> f64 {
        quad_form(&self.q, x)
            + self.q_lin.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            + self.z_weight * z.iter().map(|v| v * v).sum::<f64>()
            + quad_form(self.pi_at(node), u)
    }

    pub fn running_x(&self, x: &[f64]) -> DVector<f64> {
        (&self.q + self.q.transpose()) * DVector::from_column_slice(x) + &self.q_lin
    }

    pub fn running_z(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(z.len(), z.iter().map(|v| 2.0 * self.z_weight * v))
    }
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (r, vr) in v.iter().enumerate() {
        for (c, vc) in v.iter().enumerate() {
            acc += vr * m[(r, c)] * vc;
        }
    }
    acc
}

/// Box `U = Π_k [lower_k, upper_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::domain("ControlBox", "bounds must be finite with lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(self.lower.iter().zip(&self.upper)).map(|(s, (l, h))| l + s * (h - l)).collect()
    }
}

/// Everything needed to pose the backward control problem on a grid.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub alpha: FracOrder,
    pub grid: TimeGrid,
    pub generator: GeneratorSpec,
    pub driver: DriverSpec,
    pub terminal: Terminal,
    pub cost: CostSpec,
    pub noise: NoiseSpec,
    pub control_box: ControlBox,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.generator.dim();
        let m = self.noise.modes();
        let d = self.control_box.dim();
        if self.driver.state_dim() != n || self.driver.modes() != m || self.driver.control_dim() != d {
            return Err(Error::domain("ModelSpec", "driver dimensions disagree with generator, noise or control box"));
        }
        check_shape("terminal loading", &self.terminal.loading, n, m)?;
        if self.terminal.base.len() != n {
            return Err(Error::domain("ModelSpec", "terminal base has wrong length"));
        }
        check_shape("cost G", &self.cost.g, n, n)?;
        check_shape("cost Q", &self.cost.q, n, n)?;
        if self.cost.g_lin.len() != n || self.cost.q_lin.len() != n {
            return Err(Error::domain("ModelSpec", "linear cost terms have wrong length"));
        }
        if self.cost.pi.len() != 1 && self.cost.pi.len() != self.grid.n_steps() + 1 {
            return Err(Error::domain("ModelSpec", "control weight needs 1 or n_steps + 1 entries"));
        }
        for p in &self.cost.pi {
            check_shape("cost Pi", p, d, d)?;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_box.dim()
    }

    /// Running-cost cell weights `c_k = (1/Γ(α))∫_{t_k}^{t_{k+1}}(b−s)^{α−1} ds`.
    pub fn cost_weights(&self) -> Result<Vec<f64>> {
        horizon_weights(self.alpha, &self.grid)
    }
}

pub fn horizon_weights(alpha: FracOrder, grid: &TimeGrid) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let w = kernel_weights(alpha.value(), n, grid.dt());
    let g = gamma_fn(alpha.value())?;
    Ok((0..n).map(|k| w[n - 1 - k] / g).collect())
}

#[derive(Debug, Clone, PartialEq)]
enum ControlValues {
    Deterministic(Vec<f64>),
    Adapted(ProcessArray),
}

/// Control values on every node, optionally with per-path features that
/// regressions may condition on.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess {
    dim: usize,
    n_nodes: usize,
    values: ControlValues,
    features: Option<ProcessArray>,
}

impl ControlProcess {
    pub fn deterministic(grid: &TimeGrid, dim: usize, f: impl Fn(usize) -> Vec<f64>) -> Result<Self> {
        let n_nodes = grid.n_steps() + 1;
        let mut data = Vec::with_capacity(n_nodes * dim);
        for i in 0..n_nodes {
            let v = f(i);
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain("ControlProcess", format!("bad value at node {i}")));
            }
            data.extend(v);
        }
        Ok(Self { dim, n_nodes, values: ControlValues::Deterministic(data), features: None })
    }

    pub fn constant(grid: &TimeGrid, value: &[f64]) -> Result<Self> {
        Self::deterministic(grid, value.len(), |_| value.to_vec())
    }

    pub fn adapted(values: ProcessArray, features: Option<ProcessArray>) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::domain("ControlProcess", "non-finite control value"));
        }
        if let Some(f) = &features {
            if f.n_paths() != values.n_paths() || f.n_nodes() != values.n_nodes() {
                return Err(Error::domain("ControlProcess", "feature array shape differs from values"));
            }
        }
        Ok(Self { dim: values.width(), n_nodes: values.n_nodes(), values: ControlValues::Adapted(values), features })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.values, ControlValues::Deterministic(_))
    }

    pub fn value(&self, path: usize, node: usize) -> &[f64] {
        match &self.values {
            ControlValues::Deterministic(d) => &d[node * self.dim..(node + 1) * self.dim],
            ControlValues::Adapted(a) => a.get(path, node),
        }
    }

    pub fn features(&self) -> Option<&ProcessArray> {
        self.features.as_ref()
    }

    pub fn feature_width(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.width())
    }

    /// Replaces the value at `nodes` by `v` on every path.
    pub fn overridden(&self, nodes: std::ops::Range<usize>, v: &[f64], n_paths: usize) -> Self {
        let mut out = self.clone();
        match &mut out.values {
            ControlValues::Deterministic(d) => {
                for i in nodes {
                    d[i * self.dim..(i + 1) * self.dim].copy_from_slice(v);
                }
            }
            ControlValues::Adapted(a) => {
                for p in 0..n_paths.min(a.n_paths()) {
                    for i in nodes.clone() {
                        a.get_mut(p, i).copy_from_slice(v);
                    }
                }
            }
        }
        out
    }

    /// Pointwise `self + scale · other`; features of `self` are kept.
    pub fn shifted(&self, other: &ControlProcess, scale: f64, n_paths: usize) -> Result<Self> {
        if other.dim != self.dim || other.n_nodes != self.n_nodes {
            return Err(Error::domain("ControlProcess", "shape mismatch in shift"));
        }
        let values = match (&self.values, &other.values) {
            (ControlValues::Deterministic(a), ControlValues::Deterministic(b)) => {
                ControlValues::Deterministic(a.iter().zip(b).map(|(x, y)| x + scale * y).collect())
            }
            _ => {
                let mut arr = ProcessArray::zeros(n_paths, self.n_nodes, self.dim);
                for p in 0..n_paths {
                    for i in 0..self.n_nodes {
                        let (a, b) = (self.value(p, i), other.value(p, i));
                        for (o, (x, y)) in arr.get_mut(p, i).iter_mut().zip(a.iter().zip(b)) {
                            *o = x + scale * y;
                        }
                    }
                }
                ControlValues::Adapted(arr)
            }
        };
        Ok(Self { values, ..self.clone() })
    }
}
