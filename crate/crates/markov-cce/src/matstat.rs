//! Dense symmetric linear algebra and the concentration toolkit.
//!
//! Covers four ingredients the learner and its tests rely on:
//!
//! * empirical covariance matrices `Σ̃ = (1/n) Σ φφᵀ` and their regularized
//!   inverses `Σ̂† = (Σ̃ + γI)⁻¹`;
//! * the magnitude-reduced estimator `Ẑ = Z − (Z)₋ + m̂`, which lifts an
//!   estimator's lower tail while preserving its mean;
//! * an adaptive Freedman-style martingale deviation bound evaluator;
//! * two-sided PSD concentration ("sandwich") checks between an empirical
//!   mean of PSD samples and its population counterpart.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Errors from the linear-algebra and concentration routines.
#[derive(Debug, Error)]
pub enum MatStatError {
    #[error("empty sample list")]
    EmptySamples,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },
    #[error("non-finite entry in input matrix")]
    NonFinite,
    #[error("positive-definite factorization failed (gamma={gamma})")]
    FactorizationFailed { gamma: f64 },
    #[error("length mismatch: {left} values vs {right} second moments")]
    LengthMismatch { left: usize, right: usize },
}

/// An empirical covariance together with its regularized inverse.
///
/// Holds `Σ̃ = (1/n) Σ φφᵀ`, the regularizer `γ > 0`, and
/// `Σ̂† = (Σ̃ + γI)⁻¹`. The inverse is symmetric PSD with eigenvalues in
/// `(0, 1/γ]`, so quadratic forms `‖v‖²_{Σ̂†}` of unit vectors never exceed
/// `1/γ`.
#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    /// Number of samples the covariance was averaged over.
    pub n: usize,
    /// Empirical second-moment matrix `Σ̃`.
    pub sigma_tilde: DMatrix<f64>,
    /// Ridge regularizer `γ`.
    pub gamma: f64,
    /// Regularized inverse `Σ̂† = (Σ̃ + γI)⁻¹`.
    pub sigma_dagger: DMatrix<f64>,
}

impl CovarianceEstimate {
    /// Build directly from samples: covariance then inverse.
    pub fn from_samples(
        samples: &[DVector<f64>],
        gamma: f64,
    ) -> Result<Self, MatStatError> {
        let sigma = empirical_covariance(samples)?;
        let mut est = regularized_inverse(&sigma, gamma)?;
        est.n = samples.len();
        Ok(est)
    }

    /// Quadratic form `vᵀ Σ̂† v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        (self.sigma_dagger.clone() * v).dot(v)
    }

    /// Matrix-vector product `Σ̂† v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.sigma_dagger * v
    }
}

/// Empirical second-moment matrix `(1/n) Σ φφᵀ` of the given samples.
///
/// The result is symmetric PSD by construction and its trace equals the mean
/// squared norm of the samples.
pub fn empirical_covariance(
    samples: &[DVector<f64>],
) -> Result<DMatrix<f64>, MatStatError> {
    let first = samples.first().ok_or(MatStatError::EmptySamples)?;
    let d = first.len();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        if s.len() != d {
            return Err(MatStatError::DimensionMismatch { expected: d, got: s.len() });
        }
        // acc += s sᵀ, lower triangle then mirrored once at the end.
        for i in 0..d {
            for j in 0..=i {
                acc[(i, j)] += s[i] * s[j];
            }
        }
    }
    let n = samples.len() as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = acc[(i, j)] / n;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    Ok(acc)
}

/// Regularized inverse `Σ̂† = (Σ̃ + γI)⁻¹` via Cholesky factorization.
///
/// One Newton refinement step (`X ← X + X(I − AX)`) tightens the residual,
/// which is then required to satisfy `‖Σ̂†(Σ̃+γI) − I‖_∞ < 1e-8`.
pub fn regularized_inverse(
    sigma_tilde: &DMatrix<f64>,
    gamma: f64,
) -> Result<CovarianceEstimate, MatStatError> {
    assert!(gamma > 0.0, "gamma must be positive");
    let d = sigma_tilde.nrows();
    if sigma_tilde.ncols() != d {
        return Err(MatStatError::DimensionMismatch { expected: d, got: sigma_tilde.ncols() });
    }
    if sigma_tilde.iter().any(|x| !x.is_finite()) {
        return Err(MatStatError::NonFinite);
    }
    let max_asym = (0..d)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (sigma_tilde[(i, j)] - sigma_tilde[(j, i)]).abs())
        .fold(0.0f64, f64::max);
    if max_asym > 1e-10 {
        return Err(MatStatError::NotSymmetric { max_asym });
    }

    let a = sigma_tilde + DMatrix::<f64>::identity(d, d) * gamma;
    let chol = a
        .clone()
        .cholesky()
        .ok_or(MatStatError::FactorizationFailed { gamma })?;
    let mut inv = chol.inverse();
    // Newton refinement: X ← X + X(I − AX).
    let residual = DMatrix::<f64>::identity(d, d) - &a * &inv;
    inv = &inv + &inv * residual;
    // Exact symmetrization (the algebra above is symmetric only up to rounding).
    inv = (&inv + inv.transpose()) * 0.5;

    let residual = DMatrix::<f64>::identity(d, d) - &inv * &a;
    let max_res = residual.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_res >= 1e-8 {
        return Err(MatStatError::FactorizationFailed { gamma });
    }
    Ok(CovarianceEstimate { n: 0, sigma_tilde: sigma_tilde.clone(), gamma, sigma_dagger: inv })
}

/// Magnitude-reduced estimator `Ẑ = Z − (Z)₋ + m̂`.
///
/// `m̂` is an estimate of `E[(Z)₋]` (the mean negative part, a nonpositive
/// number). The result is always `≥ m̂`; with the exact `m̂ = E[(Z)₋]` the
/// transformation preserves the mean and inflates the second moment by at
/// most a factor of 6.
pub fn magnitude_reduce(raw: f64, empirical_negative_mean: f64) -> f64 {
    raw - raw.min(0.0) + empirical_negative_mean
}

/// Evaluated martingale deviation bound.
///
/// `bound` is the two-sided adaptive form
/// `8√2·√(Σ E[X²|F] + Σ X²)·ln(C/δ)` with `C = 2√2·√(Σ E[X²|F] + Σ X²)`;
/// `bound_original` is the one-sided form
/// `3·√(Σ E[X²|F])·ln(C'/δ) + 2·max X·ln(C'/δ)` with
/// `C' = 2·max{1, √(Σ E[X²|F]), max X}`. Both are 0 when every input
/// vanishes (the martingale is a.s. zero).
#[derive(Clone, Debug)]
pub struct FreedmanBound {
    /// `Σ_k E[X_k² | F_{k−1}]`.
    pub sum_cond_second_moments: f64,
    /// `Σ_k X_k²`.
    pub sum_squares: f64,
    /// Confidence level δ.
    pub delta: f64,
    /// Two-sided adaptive bound.
    pub bound: f64,
    /// One-sided (variance + max-increment) bound.
    pub bound_original: f64,
}

/// Evaluate both Freedman-style deviation bounds for the increment sequence.
///
/// `values` are the realized increments `X_k`; `cond_second_moments` are the
/// conditional second moments `E[X_k²|F_{k−1}]` (nonnegative).
pub fn adaptive_freedman_bound(
    values: &[f64],
    cond_second_moments: &[f64],
    delta: f64,
) -> Result<FreedmanBound, MatStatError> {
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0,1)");
    if values.len() != cond_second_moments.len() {
        return Err(MatStatError::LengthMismatch {
            left: values.len(),
            right: cond_second_moments.len(),
        });
    }
    debug_assert!(cond_second_moments.iter().all(|&m| m >= 0.0));
    let sum_cond: f64 = cond_second_moments.iter().sum();
    let sum_sq: f64 = values.iter().map(|x| x * x).sum();

    let combined = sum_cond + sum_sq;
    let bound = if combined == 0.0 {
        0.0
    } else {
        let c = 2.0 * f64::sqrt(2.0) * combined.sqrt();
        8.0 * f64::sqrt(2.0) * combined.sqrt() * (c / delta).ln()
    };

    let max_x = values.iter().fold(0.0f64, |m, &x| m.max(x));
    let bound_original = if sum_cond == 0.0 && max_x == 0.0 {
        0.0
    } else {
        let c = 2.0 * 1.0f64.max(sum_cond.sqrt()).max(max_x);
        3.0 * sum_cond.sqrt() * (c / delta).ln() + 2.0 * max_x * (c / delta).ln()
    };

    Ok(FreedmanBound {
        sum_cond_second_moments: sum_cond,
        sum_squares: sum_sq,
        delta,
        bound,
        bound_original,
    })
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Two-sided PSD concentration check between an empirical mean of `n` i.i.d.
/// PSD samples (spectral norm ≤ `c`) and the population mean.
///
/// Returns `(upper, lower)`:
/// * `upper`: population ⪯ 2·empirical + 3c·(d/n)·ln(d/δ)·I,
/// * `lower`: empirical ⪯ (3/2)·population + 3c·(d/(2n))·ln(d/δ)·I,
///
/// each tested as "minimum eigenvalue of (RHS − LHS) ≥ −1e-9".
pub fn psd_sandwich_check(
    empirical: &DMatrix<f64>,
    population: &DMatrix<f64>,
    n: usize,
    c: f64,
    delta: f64,
) -> Result<(bool, bool), MatStatError> {
    let d = empirical.nrows();
    if population.nrows() != d || population.ncols() != d || empirical.ncols() != d {
        return Err(MatStatError::DimensionMismatch { expected: d, got: population.nrows() });
    }
    let dim = d as f64;
    let log_term = (dim / delta).ln();
    let eye = DMatrix::<f64>::identity(d, d);

    let slack_upper = 3.0 * c * (dim / n as f64) * log_term;
    let upper_gap = empirical * 2.0 + &eye * slack_upper - population;
    let upper = min_eigenvalue(&upper_gap) >= -1e-9;

    let slack_lower = 3.0 * c * (dim / (2.0 * n as f64)) * log_term;
    let lower_gap = population * 1.5 + &eye * slack_lower - empirical;
    let lower = min_eigenvalue(&lower_gap) >= -1e-9;

    Ok((upper, lower))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_of_two_basis_vectors_is_half_identity() {
        let samples = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ];
        let cov = empirical_covariance(&samples).unwrap();
        assert_eq!(cov, DMatrix::from_diagonal_element(2, 2, 0.5));
    }

    #[test]
    fn inverse_of_zero_matrix_is_scaled_identity() {
        let est = regularized_inverse(&DMatrix::zeros(3, 3), 2.0).unwrap();
        let diff = (&est.sigma_dagger - DMatrix::from_diagonal_element(3, 3, 0.5)).abs().max();
        assert!(diff < 1e-12);
    }

    #[test]
    fn magnitude_reduce_passes_through_nonnegative() {
        assert_eq!(magnitude_reduce(3.0, 0.0), 3.0);
        assert_eq!(magnitude_reduce(-1.0, -1.0), -1.0);
    }

    #[test]
    fn freedman_zero_inputs_give_zero_bound() {
        let b = adaptive_freedman_bound(&[0.0; 4], &[0.0; 4], 0.1).unwrap();
        assert_eq!(b.bound, 0.0);
        assert_eq!(b.bound_original, 0.0);
    }
}
