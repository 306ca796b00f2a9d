#![allow(dead_code)]

use fbsee::model::{ControlBox, CostSpec, DriverSpec, ModelSpec, Terminal};
use fbsee::noise::NoiseSpec;
use fbsee::resolvent::GeneratorSpec;
use fbsee::special::{gamma_fn, FracOrder};
use fbsee::grid::TimeGrid;
use nalgebra::{DMatrix, DVector};

pub fn one(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Scalar model with generator `a_gen`, driver `kx·x + c·z + ku·u`, terminal
/// `ξ = xi + loading·B(b)` and costs `g x² + π u²`.
pub struct Scalar {
    pub alpha: f64,
    pub n_steps: usize,
    pub a_gen: f64,
    pub kx: f64,
    pub c: f64,
    pub ku: f64,
    pub xi: f64,
    pub loading: f64,
    pub lambda: f64,
    pub g: f64,
    pub pi: f64,
    pub seed: u64,
}

impl Default for Scalar {
    fn default() -> Self {
        Self { alpha: 0.75, n_steps: 64, a_gen: 0.0, kx: 0.0, c: 0.0, ku: 0.0, xi: 1.0, loading: 0.0, lambda: 1.0, g: 1.0, pi: 1.0, seed: 9 }
    }
}

impl Scalar {
    pub fn model(&self) -> ModelSpec {
        let driver = DriverSpec::linear(one(self.kx), vec![one(self.c)], one(self.ku), DVector::zeros(1)).unwrap();
        let mut terminal = Terminal::constant(DVector::from_element(1, self.xi), 1);
        terminal.loading = one(self.loading);
        ModelSpec {
            alpha: FracOrder::for_solver(self.alpha).unwrap(),
            grid: TimeGrid::new(1.0, self.n_steps).unwrap(),
            generator: GeneratorSpec::scalar(self.a_gen).unwrap(),
            driver,
            terminal,
            cost: CostSpec::quadratic(one(self.g), one(self.pi)),
            noise: NoiseSpec::new(vec![self.lambda], self.seed).unwrap(),
            control_box: ControlBox::new(vec![-3.0], vec![3.0]).unwrap(),
        }
    }
}

/// Fine-grid Picard iteration for `y(τ) = y0 + (a/Γ(α))∫₀^τ (τ−σ)^{α−1} y(σ) dσ`
/// on `[0, 1]` with product-trapezoid weights; returns `y` on `n + 1` nodes.
pub fn picard_volterra(alpha: f64, a: f64, y0: f64, n: usize) -> Vec<f64> {
    let h = 1.0 / n as f64;
    let scale = a * h.powf(alpha) / (alpha * (alpha + 1.0) * gamma_fn(alpha).unwrap());
    let pw: Vec<f64> = (0..=n + 1).map(|k| (k as f64).powf(alpha + 1.0)).collect();
    // Interior weights depend on the distance k = n_i − j only.
    let interior: Vec<f64> = (0..=n).map(|k| if k == 0 { 1.0 } else { pw[k + 1] - 2.0 * pw[k] + pw[k - 1] }).collect();
    let start = |m: usize| if m == 0 { 0.0 } else { pw[m - 1] - (m as f64 - 1.0 - alpha) * (m as f64).powf(alpha) };
    let mut y = vec![y0; n + 1];
    for _ in 0..200 {
        let next: Vec<f64> = (0..=n)
            .map(|m| {
                if m == 0 {
                    return y0;
                }
                let mut acc = start(m) * y[0];
                for j in 1..=m {
                    acc += interior[m - j] * y[j];
                }
                y0 + scale * acc
            })
            .collect();
        let change = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        y = next;
        if change < 1e-14 {
            return y;
        }
    }
    panic!("Picard iteration did not settle");
}
