//! Gamma function, the Mainardi (M-Wright) density and its moments, and the
//! two-parameter Mittag-Leffler function.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quadrature;

/// Fractional order in the open unit interval.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FracOrder(f64);

impl FracOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::domain("FracOrder", format!("order {alpha} outside (0, 1)")))
        }
    }

    /// Order accepted by the stochastic solvers, which need `alpha > 1/2`.
    pub fn for_solver(alpha: f64) -> Result<Self> {
        let order = Self::new(alpha)?;
        if alpha <= 0.5 {
            return Err(Error::domain("FracOrder", format!("solvers need order in (1/2, 1), got {alpha}")));
        }
        Ok(order)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// sin(πx) with exact zeros at the integers.
pub(crate) fn sin_pi(x: f64) -> f64 {
    let r = x - 2.0 * (0.5 * x).round();
    let (r, sign) = if r > 0.5 {
        (1.0 - r, 1.0)
    } else if r < -0.5 {
        (-1.0 - r, 1.0)
    } else {
        (r, 1.0)
    };
    sign * (PI * r).sin()
}

fn cos_pi(x: f64) -> f64 {
    sin_pi(x + 0.5)
}

fn lanczos_series(x: f64) -> (f64, f64) {
    let y = x - 1.0;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (y + i as f64);
    }
    (a, y + LANCZOS_G + 0.5)
}

fn gamma_positive(x: f64) -> f64 {
    let (a, t) = lanczos_series(x);
    let half = t.powf(0.5 * (x - 0.5));
    (2.0 * PI).sqrt() * half * ((-t).exp() * half) * a
}

/// Γ(x) for real x off the non-positive integers.
pub fn gamma_fn(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain("gamma_fn", format!("non-finite argument {x}")));
    }
    if x <= 0.0 && x == x.floor() {
        return Err(Error::domain("gamma_fn", format!("pole at {x}")));
    }
    let g = if x < 0.5 {
        PI / (sin_pi(x) * gamma_positive(1.0 - x))
    } else {
        gamma_positive(x)
    };
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::evaluation("gamma_fn", format!("overflow at {x}")))
    }
}

/// ln|Γ(x)|.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        (PI / sin_pi(x).abs()).ln() - ln_gamma(1.0 - x)
    } else {
        let (a, t) = lanczos_series(x);
        0.5 * (2.0 * PI).ln() + (x - 0.5) * t.ln() - t + a.ln()
    }
}

/// 1/Γ(x), zero at the poles.
pub fn rgamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        return 0.0;
    }
    if x >= 0.5 {
        if x < 170.0 {
            1.0 / gamma_positive(x)
        } else {
            (-ln_gamma(x)).exp()
        }
    } else if x > -169.0 {
        sin_pi(x) * gamma_positive(1.0 - x) / PI
    } else {
        sin_pi(x).signum() * (sin_pi(x).abs().ln() + ln_gamma(1.0 - x) - PI.ln()).exp()
    }
}

/// Compensated (Neumaier) accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

const WRIGHT_SERIES_LIMIT: f64 = 1.0;
const WRIGHT_MAX_TERMS: usize = 400;

/// Mainardi density M_α(r) = Σ_n (−r)^n / (n! Γ(1 − α − αn)), the probability
/// density on [0, ∞) whose Laplace transform is E_α(−s).
///
/// Small arguments use the compensated power series; beyond r = 1 the series
/// cancels catastrophically for α near 1, so a positive integral
/// representation over [0, π] is used instead. α = 1/2 uses the closed form.
pub fn wright_density(alpha: FracOrder, r: f64) -> Result<f64> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::domain("wright_density", format!("argument {r} must be finite and >= 0")));
    }
    let a = alpha.value();
    if a == 0.5 {
        return Ok((-0.25 * r * r).exp() / PI.sqrt());
    }
    if r <= WRIGHT_SERIES_LIMIT {
        wright_series(a, r)
    } else {
        Ok(wright_integral(a, r))
    }
}

fn wright_series(a: f64, r: f64) -> Result<f64> {
    let mut acc = Compensated::default();
    let mut power = 1.0;
    let mut small_run = 0;
    for n in 0..WRIGHT_MAX_TERMS {
        if n > 0 {
            power *= -r / n as f64;
        }
        acc.add(power * rgamma(1.0 - a - a * n as f64));
        // |1/Γ(1−y)| ≤ Γ(y)/π bounds every later term independently of poles.
        let y = a * (n + 1) as f64;
        let bound = power.abs() * (ln_gamma(y).exp() / PI) * r / (n + 1) as f64;
        if bound <= 1e-16 * acc.value().abs() || bound < 1e-300 {
            small_run += 1;
            if small_run >= 2 {
                return Ok(acc.value().max(0.0));
            }
        } else {
            small_run = 0;
        }
    }
    Err(Error::evaluation(
        "wright_density",
        format!("series did not converge in {WRIGHT_MAX_TERMS} terms at r = {r}; partial sum {}", acc.value()),
    ))
}

fn zolotarev_kernel(a: f64, phi: f64) -> f64 {
    let sa = (a * phi).sin();
    let ratio = sa / phi.sin();
    ratio.powf(1.0 / (1.0 - a)) * ((1.0 - a) * phi).sin() / sa
}

fn wright_integral(a: f64, r: f64) -> f64 {
    let c = r.powf(1.0 / (1.0 - a));
    let floor = a.powf(a / (1.0 - a)) * (1.0 - a);
    let log_pre = (a / (1.0 - a)) * r.ln() - ((1.0 - a) * PI).ln() - c * floor;
    if log_pre < -760.0 {
        return 0.0;
    }
    let f = |phi: f64| {
        if phi <= 0.0 {
            return floor;
        }
        let k = zolotarev_kernel(a, phi);
        let e = c * (k - floor);
        if !k.is_finite() || e > 745.0 {
            0.0
        } else {
            k * (-e).exp()
        }
    };
    let breaks = [0.0, 1e-3 * PI, 1e-2 * PI, 0.1 * PI, 0.5 * PI, PI];
    // Rounding in k - floor is amplified by c.
    let rel_tol = 2e-14f64.max(64.0 * f64::EPSILON * c * floor);
    let inner = quadrature::integrate_pieces(f, &breaks, 1e-17 * floor, rel_tol);
    inner.value * log_pre.exp()
}

/// ∫₀^∞ r^γ M_α(r) dr = Γ(1+γ)/Γ(1+αγ).
pub fn wright_moment(alpha: FracOrder, gamma_exp: f64) -> Result<f64> {
    if !(gamma_exp > -1.0) {
        return Err(Error::domain("wright_moment", format!("exponent {gamma_exp} must exceed -1")));
    }
    Ok(gamma_fn(1.0 + gamma_exp)? / gamma_fn(1.0 + alpha.value() * gamma_exp)?)
}

const ML_MAX_TERMS: usize = 20_000;

/// Two-parameter Mittag-Leffler function E_{a,b}(z) = Σ_k z^k / Γ(ak + b).
///
/// Routes: power series for positive or small arguments; a double-word series
/// for a = 1; a real integral along the branch cut for 0 < a < 1 and z < −1.
pub fn mittag_leffler(a: f64, b: f64, z: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() || !b.is_finite() || !z.is_finite() {
        return Err(Error::domain("mittag_leffler", format!("invalid parameters a={a}, b={b}, z={z}")));
    }
    if z == 0.0 {
        return Ok(rgamma(b));
    }
    if z > 0.0 || z >= -1.0 {
        return ml_series(a, b, z);
    }
    if a < 1.0 {
        return ml_branch_cut(a, b, -z);
    }
    if a == 1.0 && b > 0.0 {
        if z >= -25.0 {
            return Ok(ml_series_double_word(b, z));
        }
        if b == b.floor() {
            let mut e = z.exp();
            for k in 1..(b as usize) {
                e = (e - rgamma(k as f64)) / z;
            }
            return Ok(e);
        }
    }
    ml_series(a, b, z)
}

fn ml_series(a: f64, b: f64, z: f64) -> Result<f64> {
    let lz = z.abs().ln();
    let mut acc = Compensated::default();
    let mut largest: f64 = 0.0;
    let mut prev = f64::INFINITY;
    for k in 0..ML_MAX_TERMS {
        let y = a * k as f64 + b;
        let sign = if z < 0.0 && k % 2 == 1 { -1.0 } else { 1.0 };
        let term = if y > 0.0 {
            sign * (k as f64 * lz - ln_gamma(y)).exp()
        } else {
            z.powi(k as i32) * rgamma(y)
        };
        if !term.is_finite() {
            return Err(Error::evaluation("mittag_leffler", format!("series overflow at term {k}")));
        }
        acc.add(term);
        largest = largest.max(term.abs());
        let sum = acc.value();
        if y > 1.0 && term.abs() <= 1e-17 * sum.abs() && term.abs() < prev {
            // Each log-evaluated term carries a relative error of order ε·|exponent|.
            let noise = largest * 2e-16 * (1.0 + k as f64 * lz.abs() + ln_gamma(y).abs());
            if noise > 1e-10 * sum.abs() {
                return Err(Error::evaluation(
                    "mittag_leffler",
                    format!("series cancellation too severe at z = {z} (largest term {largest:.3e})"),
                ));
            }
            return Ok(sum);
        }
        prev = term.abs();
    }
    Err(Error::evaluation("mittag_leffler", format!("term cap {ML_MAX_TERMS} exceeded at z = {z}")))
}

#[derive(Debug, Clone, Copy)]
struct DoubleWord {
    hi: f64,
    lo: f64,
}

impl DoubleWord {
    fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn normalized(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Self { hi: s, lo: lo - (s - hi) }
    }

    fn add(self, o: Self) -> Self {
        let s = self.hi + o.hi;
        let v = s - self.hi;
        let e = (self.hi - (s - v)) + (o.hi - v);
        Self::normalized(s, e + self.lo + o.lo)
    }

    fn mul(self, f: f64) -> Self {
        let p = self.hi * f;
        let e = self.hi.mul_add(f, -p) + self.lo * f;
        Self::normalized(p, e)
    }

    fn div(self, f: f64) -> Self {
        let q1 = self.hi / f;
        let p = q1 * f;
        let pe = q1.mul_add(f, -p);
        let r = ((self.hi - p) - pe) + self.lo;
        Self::normalized(q1, r / f)
    }
}

fn ml_series_double_word(b: f64, z: f64) -> f64 {
    let mut term = DoubleWord::new(rgamma(b));
    let mut sum = term;
    for k in 1..4000 {
        term = term.mul(z).div(k as f64 + b - 1.0);
        sum = sum.add(term);
        if k as f64 > z.abs() && term.hi.abs() <= 1e-34 * sum.hi.abs() {
            break;
        }
    }
    sum.hi + sum.lo
}

/// E_{a,b}(−x) for 0 < a < 1, x > 0, via the collapsed Hankel contour:
/// (1/π)∫₀^∞ e^{−r} r^{a−b} [r^a sin πb − x sin π(a−b)] / (r^{2a} + 2x r^a cos πa + x²) dr.
fn ml_branch_cut(a: f64, b: f64, x: f64) -> Result<f64> {
    if b >= 1.0 + a {
        let lower = ml_branch_cut(a, b - a, x)?;
        return Ok((lower - rgamma(b - a)) / -x);
    }
    let g = 1.0 + a - b;
    let (sb, sab, ca) = (sin_pi(b), sin_pi(a - b), cos_pi(a));
    let f = |u: f64| {
        if u <= 0.0 {
            return if g == 1.0 { -sab / x } else { 0.0 };
        }
        let r = u.powf(1.0 / g);
        let ra = r.powf(a);
        let den = ra * ra + 2.0 * x * ra * ca + x * x;
        (-r).exp() * (ra * sb - x * sab) / den
    };
    let r_max: f64 = 60.0;
    let mut breaks = vec![0.0];
    let peak = x.powf(1.0 / a);
    for r in [1e-3 * peak, 0.5 * peak, peak, 2.0 * peak] {
        if r < r_max {
            breaks.push(r.powf(g));
        }
    }
    breaks.push(r_max.powf(g));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let res = quadrature::integrate_pieces(f, &breaks, 1e-300, 1e-13);
    let value = res.value / (PI * g);
    if !value.is_finite() || res.error > 1e-9 * res.value.abs() {
        return Err(Error::evaluation(
            "mittag_leffler",
            format!("branch-cut quadrature failed at z = {}: estimate {value}, error {}", -x, res.error),
        ));
    }
    Ok(value)
}
