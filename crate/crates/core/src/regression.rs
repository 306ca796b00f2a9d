//! Least-squares conditional expectations on a degree-2 polynomial basis.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const RIDGE: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e13;

/// `[1, s_1..s_p, s_a s_b for a ≤ b]`.
pub fn regression_basis(features: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(basis_len(features.len()));
    push_basis(features, &mut out);
    out
}

pub fn basis_len(n_features: usize) -> usize {
    1 + n_features + n_features * (n_features + 1) / 2
}

fn push_basis(features: &[f64], out: &mut Vec<f64>) {
    out.push(1.0);
    out.extend_from_slice(features);
    for a in 0..features.len() {
        for b in a..features.len() {
            out.push(features[a] * features[b]);
        }
    }
}

/// A fitted projection onto the span of the basis evaluated at one step's
/// features. The same design serves any number of responses.
#[derive(Debug, Clone)]
pub struct Projection {
    design: DMatrix<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub condition: f64,
    pub kept_features: usize,
}

/// Per-path feature rows, one slice of equal length per path.
pub fn fit_projection(step: usize, rows: &[&[f64]]) -> Result<Projection> {
    let n_paths = rows.len();
    let width = rows.first().map_or(0, |r| r.len());
    let mut kept = Vec::new();
    let mut centre = Vec::new();
    let mut scale = Vec::new();
    for k in 0..width {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n_paths as f64;
        let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n_paths as f64;
        let sd = var.sqrt();
        if !sd.is_finite() || !mean.is_finite() {
            return Err(Error::RankDeficient { step, detail: format!("feature {k} is not finite") });
        }
        if sd > 1e-12 * mean.abs() && sd > 0.0 {
            kept.push(k);
            centre.push(mean);
            scale.push(sd);
        }
    }
    // Drop features that are affine combinations of earlier ones.
    let mut basis_cols: Vec<Vec<f64>> = Vec::new();
    let mut independent = Vec::new();
    for (slot, (&k, (c, sd))) in kept.iter().zip(centre.iter().zip(&scale)).enumerate() {
        let mut col: Vec<f64> = rows.iter().map(|r| (r[k] - c) / sd).collect();
        for q in &basis_cols {
            let dot: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 * (n_paths as f64).sqrt() {
            col.iter_mut().for_each(|v| *v /= norm);
            basis_cols.push(col);
            independent.push(slot);
        }
    }
    let kept: Vec<usize> = independent.iter().map(|&s| kept[s]).collect();
    let centre: Vec<f64> = independent.iter().map(|&s| centre[s]).collect();
    let scale: Vec<f64> = independent.iter().map(|&s| scale[s]).collect();
    let p = basis_len(kept.len());
    if n_paths < p {
        return Err(Error::RankDeficient { step, detail: format!("{n_paths} paths for {p} basis functions") });
    }
    let mut design = DMatrix::zeros(n_paths, p);
    let mut row = Vec::with_capacity(p);
    let mut standardized = vec![0.0; kept.len()];
    for (i, r) in rows.iter().enumerate() {
        for (s, ((&k, c), sd)) in standardized.iter_mut().zip(kept.iter().zip(&centre).zip(&scale)) {
            *s = (r[k] - c) / sd;
        }
        row.clear();
        push_basis(&standardized, &mut row);
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    let mut gram = design.tr_mul(&design);
    let diag: Vec<f64> = gram.diagonal().iter().copied().collect();
    let norm: DVector<f64> = DVector::from_iterator(p, diag.iter().map(|d| 1.0 / d.sqrt()));
    let scaled = DMatrix::from_fn(p, p, |a, b| gram[(a, b)] * norm[a] * norm[b]);
    let eig = scaled.symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::RankDeficient { step, detail: format!("design condition number {condition:.3e}") });
    }
    let ridge = RIDGE * diag.iter().sum::<f64>() / p as f64;
    for j in 1..p {
        gram[(j, j)] += ridge;
    }
    let factor = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { step, detail: "normal equations not positive definite".into() })?;
    Ok(Projection { design, factor, condition, kept_features: kept.len() })
}

impl Projection {
    /// Fitted values of the response, in path order.
    pub fn project(&self, response: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(response);
        let coef = self.factor.solve(&self.design.tr_mul(&y));
        (&self.design * coef).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_examples() {
        assert_eq!(regression_basis(&[]), vec![1.0]);
        assert_eq!(regression_basis(&[3.0]), vec![1.0, 3.0, 9.0]);
        assert_eq!(regression_basis(&[2.0, 5.0]), vec![1.0, 2.0, 5.0, 4.0, 10.0, 25.0]);
    }

    #[test]
    fn constant_features_reduce_to_mean() {
        let data: Vec<[f64; 1]> = (0..10).map(|_| [0.0]).collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let proj = fit_projection(0, &rows).unwrap();
        assert_eq!(proj.kept_features, 0);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(proj.project(&y).iter().all(|v| (v - 4.5).abs() < 1e-14));
    }

    #[test]
    fn quadratic_response_is_reproduced() {
        let data: Vec<[f64; 2]> = (0..40).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let y: Vec<f64> = data.iter().map(|r| 1.0 + 2.0 * r[0] - r[1] * r[0] + 0.5 * r[1] * r[1]).collect();
        let fit = fit_projection(3, &rows).unwrap().project(&y);
        for (f, t) in fit.iter().zip(&y) {
            assert!((f - t).abs() < 1e-6, "{f} vs {t}");
        }
    }

    #[test]
    fn affine_duplicate_is_dropped() {
        let data: Vec<[f64; 2]> = (0..30).map(|i| [i as f64, 3.0 - 2.0 * i as f64]).collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        assert_eq!(fit_projection(7, &rows).unwrap().kept_features, 1);
    }

    #[test]
    fn degenerate_basis_is_rank_deficient() {
        let data: Vec<[f64; 1]> = (0..30).map(|i| [(i % 2) as f64]).collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        assert!(matches!(fit_projection(7, &rows), Err(Error::RankDeficient { step: 7, .. })));
    }

    #[test]
    fn too_few_paths_is_rank_deficient() {
        let data: Vec<[f64; 2]> = (0..4).map(|i| [i as f64, (i * i) as f64 + 0.5 * i as f64]).collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        assert!(matches!(fit_projection(2, &rows), Err(Error::RankDeficient { step: 2, .. })));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed in 0u64..1000) {
            let data: Vec<[f64; 1]> = (0..25).map(|i| [((i as u64 * 7919 + seed) % 97) as f64 / 97.0]).collect();
            let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
            let proj = fit_projection(0, &rows).unwrap();
            let y: Vec<f64> = (0..25).map(|i| ((i * 31 + seed as usize) % 13) as f64).collect();
            let once = proj.project(&y);
            let twice = proj.project(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }
    }
}
