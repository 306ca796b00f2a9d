//! Fractional resolvent families built by averaging the matrix semigroup
//! against the Mainardi density.
//!
//! `S_α(t) = ∫ M_α(r) exp(t^α r A) dr` and `P_α(t) = α ∫ r M_α(r) exp(t^α r A) dr`,
//! so that for scalar `A = a` they reduce to `E_α(a t^α)` and `E_{α,α}(a t^α)`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quadrature::{self, Rule};
use crate::special::{gamma_fn, wright_density, FracOrder};

/// Truncation point of the Mainardi quadrature.
pub const R_MAX: f64 = 20.0;

/// Generator of the matrix semigroup `exp(tA)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    a: DMatrix<f64>,
}

impl GeneratorSpec {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::domain("GeneratorSpec", format!("matrix is {}x{}, expected square n >= 1", a.nrows(), a.ncols())));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("GeneratorSpec", "non-finite entry"));
        }
        Ok(Self { a })
    }

    pub fn scalar(a: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, a))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Spectral norm.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().singular_values().max()
}

fn exp_scaled(a: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    if a.nrows() == 1 {
        DMatrix::from_element(1, 1, (tau * a[(0, 0)]).exp())
    } else {
        (a * tau).exp()
    }
}

/// `exp(τA)` by scaling and squaring with a Padé core.
pub fn semigroup(gen: &GeneratorSpec, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::domain("semigroup", format!("time {tau} must be finite and >= 0")));
    }
    let e = exp_scaled(&gen.a, tau);
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(Error::evaluation("semigroup", format!("overflow at tau = {tau}")))
    }
}

/// Precomputed `S_α(t_i)`, `P_α(t_i)` on every node of a grid.
#[derive(Debug, Clone)]
pub struct ResolventTable {
    pub grid: TimeGrid,
    pub alpha: FracOrder,
    pub s_alpha: Vec<DMatrix<f64>>,
    pub p_alpha: Vec<DMatrix<f64>>,
    pub m0: f64,
    pub m1: f64,
    /// Estimated absolute quadrature error (rule error plus truncation tail).
    pub quadrature_error: f64,
    pub quadrature_nodes: usize,
}

/// A resolvent bound that failed: which table, node and values.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub family: &'static str,
    pub node: usize,
    pub norm: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ResolventTable {
    pub fn dim(&self) -> usize {
        self.s_alpha[0].nrows()
    }

    /// Checks `‖S‖ ≤ m1(1+tol)` and `α m0/Γ(1+α)(1−tol) ≤ ‖P‖ ≤ α m1/Γ(1+α)(1+tol)`.
    pub fn bound_violations(&self, tol: f64) -> Result<Vec<BoundViolation>> {
        let a = self.alpha.value();
        let c = a / gamma_fn(1.0 + a)?;
        let mut out = Vec::new();
        for (i, (s, p)) in self.s_alpha.iter().zip(&self.p_alpha).enumerate() {
            let ns = operator_norm(s);
            if ns > self.m1 * (1.0 + tol) {
                out.push(BoundViolation { family: "S", node: i, norm: ns, lower: 0.0, upper: self.m1 });
            }
            let np = operator_norm(p);
            let (lo, hi) = (c * self.m0, c * self.m1);
            if np > hi * (1.0 + tol) || np < lo * (1.0 - tol) {
                out.push(BoundViolation { family: "P", node: i, norm: np, lower: lo, upper: hi });
            }
        }
        Ok(out)
    }
}

fn mainardi_rule(alpha: FracOrder, panels: usize) -> Result<Rule> {
    // Probe once so that evaluation failures surface as errors, not NaNs.
    wright_density(alpha, 1.0)?;
    let density = |r: f64| wright_density(alpha, r).unwrap_or(f64::NAN);
    let rule = quadrature::adaptive_rule(|r| density(r) * (1.0 + r), 0.0, R_MAX, panels, 1e-13);
    if rule.nodes.iter().any(|&r| !density(r).is_finite()) {
        return Err(Error::evaluation("build_resolvents", "Mainardi density failed on a quadrature node"));
    }
    Ok(rule)
}

fn semigroup_range(gen: &GeneratorSpec, tau_max: f64) -> (f64, f64) {
    const SAMPLES: usize = 2001;
    let norms: Vec<f64> = (0..SAMPLES)
        .map(|k| operator_norm(&exp_scaled(&gen.a, tau_max * k as f64 / (SAMPLES - 1) as f64)))
        .collect();
    let m1 = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m0 = norms.iter().copied().fold(f64::INFINITY, f64::min);
    (m0, m1)
}

/// Builds the resolvent table for every node of `grid`.
///
/// `quad_nodes` is the number of initial quadrature panels on `[0, R_MAX]`;
/// the panel count is raised further when the generator is stiff.
pub fn build_resolvents(gen: &GeneratorSpec, grid: &TimeGrid, alpha: FracOrder, quad_nodes: usize) -> Result<ResolventTable> {
    if quad_nodes < 32 {
        return Err(Error::domain("build_resolvents", format!("quad_nodes = {quad_nodes} < 32")));
    }
    let a = alpha.value();
    let n = gen.dim();
    let tau_max = grid.b().powf(a);
    let rate = operator_norm(&gen.a) * tau_max;
    let panels = quad_nodes.max((R_MAX * rate / 3.0).ceil() as usize);
    let rule = mainardi_rule(alpha, panels)?;
    let weights: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&r, &w)| w * wright_density(alpha, r).unwrap_or(0.0))
        .collect();

    let (m0, m1) = semigroup_range(gen, tau_max * R_MAX);

    // Truncation tail, bounded with the semigroup growth beyond R_MAX.
    let log_norm = ((&gen.a + gen.a.transpose()) * 0.5).symmetric_eigenvalues().max();
    let growth = log_norm.max(0.0);
    let tail = quadrature::integrate(
        |r| wright_density(alpha, r).unwrap_or(0.0) * (1.0 + r) * (growth * tau_max * r).exp(),
        R_MAX,
        2.0 * R_MAX,
        1e-300,
        1e-6,
    )
    .value;
    let quadrature_error = rule.profile_error + m1.max(1.0) * tail;

    let identity = DMatrix::<f64>::identity(n, n);
    let p0 = a / gamma_fn(1.0 + a)?;
    let entries: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..=grid.n_steps())
        .into_par_iter()
        .map(|i| {
            if i == 0 {
                return (identity.clone(), &identity * p0);
            }
            let ta = grid.t(i).powf(a);
            let mut s = DMatrix::zeros(n, n);
            let mut p = DMatrix::zeros(n, n);
            for (&r, &w) in rule.nodes.iter().zip(&weights) {
                let e = exp_scaled(&gen.a, ta * r);
                s += &e * w;
                p += e * (a * r * w);
            }
            (s, p)
        })
        .collect();
    let (s_alpha, p_alpha): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
    if s_alpha.iter().chain(&p_alpha).any(|m| m.iter().any(|x| !x.is_finite())) {
        return Err(Error::evaluation("build_resolvents", "non-finite resolvent entry"));
    }
    let scale = s_alpha.iter().map(operator_norm).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if m1.max(1.0) * tail > 1e-8 * scale {
        return Err(Error::Accuracy {
            op: "build_resolvents",
            estimate: m1.max(1.0) * tail,
            limit: 1e-8 * scale,
        });
    }
    Ok(ResolventTable {
        grid: grid.clone(),
        alpha,
        s_alpha,
        p_alpha,
        m0,
        m1,
        quadrature_error,
        quadrature_nodes: rule.nodes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::mittag_leffler;

    #[test]
    fn semigroup_examples() {
        let zero = GeneratorSpec::new(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(semigroup(&zero, 2.0).unwrap(), DMatrix::identity(3, 3));
        let decay = GeneratorSpec::scalar(-1.0).unwrap();
        assert!((semigroup(&decay, 1.0).unwrap()[(0, 0)] - (-1f64).exp()).abs() < 1e-16);
        let nil = GeneratorSpec::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap();
        let e = semigroup(&nil, 2.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!((e - expected).amax() < 1e-14);
        assert!(semigroup(&decay, -1.0).is_err());
    }

    #[test]
    fn matrix_exponential_is_accurate_for_large_arguments() {
        let d = GeneratorSpec::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, -2.5, 0.3]))).unwrap();
        let e = semigroup(&d, 20.0).unwrap();
        for (k, lam) in [-1.0f64, -2.5, 0.3].iter().enumerate() {
            let exact = (20.0 * lam).exp();
            assert!(((e[(k, k)] - exact) / exact).abs() < 1e-12, "{} vs {exact}", e[(k, k)]);
        }
    }

    #[test]
    fn zero_generator_gives_constant_families() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let alpha = FracOrder::new(0.7).unwrap();
        let t = build_resolvents(&GeneratorSpec::new(DMatrix::zeros(2, 2)).unwrap(), &grid, alpha, 32).unwrap();
        let p0 = 0.7 / gamma_fn(1.7).unwrap();
        for i in 0..=8 {
            assert!((&t.s_alpha[i] - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
            assert!((&t.p_alpha[i] - DMatrix::<f64>::identity(2, 2) * p0).amax() < 1e-10);
        }
        assert_eq!((t.m0, t.m1), (1.0, 1.0));
    }

    #[test]
    fn scalar_families_match_mittag_leffler() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        for alpha in [0.5, 0.75, 0.9] {
            let order = FracOrder::new(alpha).unwrap();
            let t = build_resolvents(&GeneratorSpec::scalar(-1.0).unwrap(), &grid, order, 32).unwrap();
            for i in 1..=10 {
                let z = -grid.t(i).powf(alpha);
                let s = mittag_leffler(alpha, 1.0, z).unwrap();
                let p = mittag_leffler(alpha, alpha, z).unwrap();
                assert!(((t.s_alpha[i][(0, 0)] - s) / s).abs() < 1e-8, "alpha {alpha} node {i}");
                assert!(((t.p_alpha[i][(0, 0)] - p) / p).abs() < 1e-8, "alpha {alpha} node {i}");
            }
        }
        let half = build_resolvents(&GeneratorSpec::scalar(-1.0).unwrap(), &grid, FracOrder::new(0.5).unwrap(), 32).unwrap();
        assert!((half.s_alpha[10][(0, 0)] - 0.427_583_576_155_807).abs() < 1e-9);
    }

    #[test]
    fn too_few_panels_rejected() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let r = build_resolvents(&GeneratorSpec::scalar(-1.0).unwrap(), &grid, FracOrder::new(0.7).unwrap(), 8);
        assert!(matches!(r, Err(Error::Domain { .. })));
    }
}
