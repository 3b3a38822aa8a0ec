use nalgebra::{DMatrix, SymmetricEigen};

use super::FeatureStats;
use crate::error::{Error, Result};

/// Diagonal loading added to both covariances when the unregularized
/// square root fails.
pub const FRECHET_EPS: f64 = 1e-6;

/// Results in `[-NEG_TOL, 0)` are rounding noise and clamp to zero.
const NEG_TOL: f64 = 1e-6;

fn matrix(s: &FeatureStats) -> DMatrix<f64> {
    let d = s.dim();
    let m = DMatrix::from_row_slice(d, d, &s.sigma);
    (&m + m.transpose()) * 0.5
}

/// PSD square root through the eigendecomposition; `None` when the matrix
/// is clearly indefinite or not finite.
fn psd_sqrt(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -1e-9 * scale {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Some((q * DMatrix::from_diagonal(&roots) * q.transpose(), min))
}

/// `Tr((Σ₁ Σ₂)^{1/2})` as `Tr((S Σ₂ S)^{1/2})` with `S = Σ₁^{1/2}`, which
/// keeps every decomposition symmetric.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let (root, _) = psd_sqrt(s1)?;
    let m = &root * s2 * &root;
    let m = (&m + m.transpose()) * 0.5;
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.min() < -1e-9 * scale {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Squared Wasserstein-2 distance between two Gaussians,
/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁ Σ₂)^{1/2})`.
///
/// The unregularized covariances are used when their square root is well
/// defined; otherwise both get `FRECHET_EPS · I` and the computation is
/// retried once.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.len() != a.dim() * a.dim() || b.sigma.len() != b.dim() * b.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let d = a.dim();
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let s1 = matrix(a);
    let s2 = matrix(b);
    let ts = trace_sqrt_product(&s1, &s2)
        .map(|t| (t, 0.0))
        .or_else(|| {
            let eye = DMatrix::<f64>::identity(d, d) * FRECHET_EPS;
            trace_sqrt_product(&(&s1 + &eye), &(&s2 + &eye)).map(|t| (t, FRECHET_EPS))
        });
    let Some((tr_sqrt, eps)) = ts else {
        let e1 = SymmetricEigen::new(s1.clone()).eigenvalues;
        let e2 = SymmetricEigen::new(s2.clone()).eigenvalues;
        return Err(Error::Numerical(format!(
            "covariance square root failed after regularization: eigenvalue ranges [{:.3e}, {:.3e}] and [{:.3e}, {:.3e}]",
            e1.min(),
            e1.max(),
            e2.min(),
            e2.max()
        )));
    };
    let dist = mean_term + s1.trace() + s2.trace() + 2.0 * eps * d as f64 - 2.0 * tr_sqrt;
    if !dist.is_finite() {
        return Err(Error::Numerical(format!("Fréchet distance is not finite ({dist})")));
    }
    if dist < 0.0 {
        if dist < -NEG_TOL {
            return Err(Error::Numerical(format!("Fréchet distance {dist:e} is negative beyond tolerance")));
        }
        return Ok(0.0);
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats::new(vec![mu], vec![var], 10).unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        assert!((frechet_distance(&one_d(0.0, 1.0), &one_d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&one_d(0.0, 4.0), &one_d(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&one_d(2.0, 3.0), &one_d(2.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn singular_covariances_are_fine() {
        let z = FeatureStats::new(vec![0.0, 0.0], vec![0.0; 4], 4).unwrap();
        let r1 = FeatureStats::new(vec![1.0, 0.0], vec![1.0, 1.0, 1.0, 1.0], 4).unwrap();
        assert_eq!(frechet_distance(&z, &z).unwrap(), 0.0);
        assert!((frechet_distance(&z, &r1).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn indefinite_input_is_regularized_or_rejected() {
        let bad = FeatureStats::new(vec![0.0, 0.0], vec![1.0, 3.0, 3.0, 1.0], 4).unwrap();
        assert!(matches!(frechet_distance(&bad, &bad), Err(Error::Numerical(_))));
        let mismatch = FeatureStats::new(vec![0.0], vec![1.0], 4).unwrap();
        assert!(matches!(frechet_distance(&bad, &mismatch), Err(Error::Shape(_))));
    }
}
