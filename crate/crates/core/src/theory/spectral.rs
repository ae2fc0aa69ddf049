use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::linalg::{self, Spectrum};

use super::OracleError;

/// Brute-force search over random, generally non-orthogonal, bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceCheck {
    pub trials: usize,
    /// Smallest projection error any random basis reached.
    pub best_error: f64,
    /// No random basis beat the orthogonal optimum.
    pub never_beats: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    /// `tail_sums[j] = Σ_{i > j} λ_i` (zero-based `j`).
    pub tail_sums: Vec<f64>,
    /// Error of projecting onto the best single direction.
    pub err_k1: f64,
    /// Error of projecting onto the best `k`-dimensional subspace.
    pub err_k_orth: f64,
    pub brute_force: Option<BruteForceCheck>,
    pub passes: bool,
}

/// `tr(Σ) − tr(P Σ)` for the orthogonal projector `P` onto the span of `basis`'s columns.
pub fn projection_error(covariance: &Tensor, basis: &Tensor) -> Result<f64, OracleError> {
    // P = B (BᵀB)⁻¹ Bᵀ, so tr(PΣ) = tr((BᵀB)⁻¹ BᵀΣB)
    let gram = linalg::matmul_tn(basis, basis)?;
    let sb = linalg::matmul(covariance, basis)?;
    let bsb = linalg::matmul_tn(basis, &sb)?;
    let l = linalg::cholesky(&gram)?;
    let solved = linalg::cholesky_solve(&l, &bsb)?;
    Ok(linalg::trace(covariance) - linalg::trace(&solved))
}

fn top_vectors(spectrum: &Spectrum, k: usize) -> Tensor {
    let n = spectrum.values.len();
    Tensor::from_fn(n, k, |i, j| spectrum.vectors.get(i, j))
}

/// Compares best rank-1 and rank-`k` projection errors, computed from the
/// eigenvectors, against the tail sums of the spectrum; for `D ≤ 6` also
/// checks that `trials` random bases never do better.
pub fn spectral_tail_bound(covariance: &Tensor, k: usize, trials: usize, seed: u64) -> Result<SpectralReport, OracleError> {
    let dim = covariance.rows();
    if k == 0 || k >= dim {
        return Err(OracleError::InvalidParameter {
            name: "k",
            reason: format!("need 1 <= k < D = {dim}, got {k}"),
        });
    }
    let spectrum = linalg::sym_eigen(covariance)?;
    let eigenvalues = spectrum.values.clone();
    let tail_sums: Vec<f64> = (0..dim).map(|j| eigenvalues[j + 1..].iter().sum()).collect();
    let err_k1 = projection_error(covariance, &top_vectors(&spectrum, 1))?;
    let err_k_orth = projection_error(covariance, &top_vectors(&spectrum, k))?;
    let scale = linalg::trace(covariance).abs().max(1.0);
    let tol = 1e-8 * scale;
    let mut passes = (err_k1 - tail_sums[0]).abs() <= tol && (err_k_orth - tail_sums[k - 1]).abs() <= tol;

    let brute_force = if dim <= 6 && trials > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = f64::INFINITY;
        for _ in 0..trials {
            let basis = Tensor::from_fn(dim, k, |_, _| rng.sample(StandardNormal));
            best = best.min(projection_error(covariance, &basis)?);
        }
        let never_beats = best >= err_k_orth - tol;
        passes &= never_beats;
        Some(BruteForceCheck {
            trials,
            best_error: best,
            never_beats,
        })
    } else {
        None
    };

    Ok(SpectralReport {
        k,
        eigenvalues,
        tail_sums,
        err_k1,
        err_k_orth,
        brute_force,
        passes,
    })
}

/// `Q diag(λ) Qᵀ` for a random orthogonal `Q`.
pub fn covariance_with_spectrum(eigenvalues: &[f64], rng: &mut impl Rng) -> Tensor {
    let n = eigenvalues.len();
    let q = linalg::random_orthogonal(n, rng);
    Tensor::from_fn(n, n, |i, j| (0..n).map(|p| q.get(i, p) * eigenvalues[p] * q.get(j, p)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn examples() {
        let diag = |v: &[f64]| Tensor::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 });
        let r = spectral_tail_bound(&diag(&[4.0, 3.0, 2.0, 1.0]), 2, 100, 0).unwrap();
        assert!(r.passes);
        assert!((r.err_k1 - 6.0).abs() < 1e-12 && (r.err_k_orth - 3.0).abs() < 1e-12);

        let r = spectral_tail_bound(&Tensor::eye(4), 2, 100, 0).unwrap();
        assert!(r.passes && (r.err_k_orth - 2.0).abs() < 1e-12);

        let u = [0.5, -0.5, 0.5, 0.5];
        let rank1 = Tensor::from_fn(4, 4, |i, j| 3.0 * u[i] * u[j]);
        let r = spectral_tail_bound(&rank1, 1, 0, 0).unwrap();
        assert!(r.passes && r.err_k1.abs() < 1e-12);
    }

    #[test]
    fn invalid_k() {
        assert!(spectral_tail_bound(&Tensor::eye(3), 0, 0, 0).is_err());
        assert!(spectral_tail_bound(&Tensor::eye(3), 3, 0, 0).is_err());
    }

    #[test]
    fn rotated_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lambdas = [5.0, 2.5, 1.0, 0.5, 0.1];
        let cov = covariance_with_spectrum(&lambdas, &mut rng);
        let r = spectral_tail_bound(&cov, 3, 500, 1).unwrap();
        assert!(r.passes, "{r:?}");
        assert!((r.err_k_orth - 0.6).abs() < 1e-9);
        assert!((r.err_k1 - 4.1).abs() < 1e-9);
        assert!(r.brute_force.unwrap().best_error > 0.6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn errors_do_not_depend_on_the_basis(seed in any::<u64>(), dim in 3usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(dim, dim + 1, |_, _| rng.sample(StandardNormal));
            let cov = linalg::matmul_nt(&a, &a).unwrap();
            let k = rng.random_range(1..dim);
            let q = linalg::random_orthogonal(dim, &mut rng);
            let rotated = linalg::matmul_nt(&linalg::matmul(&q, &cov).unwrap(), &q).unwrap();
            let r1 = spectral_tail_bound(&cov, k, 50, seed).unwrap();
            let r2 = spectral_tail_bound(&rotated, k, 50, seed).unwrap();
            prop_assert!(r1.passes && r2.passes);
            prop_assert!((r1.err_k_orth - r2.err_k_orth).abs() < 1e-8);
            prop_assert!((r1.err_k1 - r2.err_k1).abs() < 1e-8);
        }
    }
}
