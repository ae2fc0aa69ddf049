use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::linalg;
use crate::losses::GramMatrix;

use super::OracleError;

/// Linear readout of `k` unit-norm tokens held as the columns of `f` (`d × k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProbe {
    pub f: Tensor,
    pub y: Vec<f64>,
    pub sigma: f64,
}

impl SensitivityProbe {
    /// Normalizes each column of `f`.
    pub fn new(f: Tensor, y: Vec<f64>, sigma: f64) -> Result<Self, OracleError> {
        let (d, k) = f.dims("sensitivity_probe")?;
        if y.len() != k {
            return Err(OracleError::InvalidParameter {
                name: "y",
                reason: format!("expected {k} entries, got {}", y.len()),
            });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(OracleError::InvalidParameter {
                name: "sigma",
                reason: format!("must be positive, got {sigma}"),
            });
        }
        let mut data = f.into_data();
        for j in 0..k {
            let norm = (0..d).map(|i| data[i * k + j].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(OracleError::RankDeficient { lambda_min: 0.0 });
            }
            for i in 0..d {
                data[i * k + j] /= norm;
            }
        }
        Ok(Self {
            f: Tensor::matrix(d, k, data)?,
            y,
            sigma,
        })
    }

    pub fn gram(&self) -> Result<GramMatrix, OracleError> {
        Ok(GramMatrix::from_matrix(linalg::matmul_tn(&self.f, &self.f)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSensitivityReport {
    pub w: Vec<f64>,
    pub lambda_min: f64,
    /// `σ² ‖w‖²`
    pub analytic: f64,
    /// `σ² yᵀ G⁻¹ y`
    pub quadratic_form: f64,
    /// Sample variance of `wᵀη` with `η ~ N(0, σ² I)`.
    pub empirical: f64,
    pub rel_error: f64,
    /// `‖Fᵀw − y‖`
    pub residual: f64,
    pub n_draws: usize,
    pub passes: bool,
}

fn checked_factor(g: &GramMatrix) -> Result<(Tensor, f64), OracleError> {
    let spectrum = linalg::sym_eigen(g.as_tensor())?;
    let lambda_min = spectrum.min();
    if lambda_min <= 1e-12 * spectrum.max().abs().max(1.0) {
        return Err(OracleError::RankDeficient { lambda_min });
    }
    let l = linalg::cholesky(g.as_tensor()).map_err(|_| OracleError::RankDeficient { lambda_min })?;
    Ok((l, lambda_min))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum-norm readout `w = F G⁻¹ y` and its sensitivity to additive
/// Gaussian noise, computed analytically and by Monte Carlo.
pub fn noise_sensitivity_probe(probe: &SensitivityProbe, n_draws: usize, seed: u64) -> Result<NoiseSensitivityReport, OracleError> {
    if n_draws < 2 {
        return Err(OracleError::InvalidParameter {
            name: "n_draws",
            reason: format!("need at least 2, got {n_draws}"),
        });
    }
    let (d, k) = probe.f.dims("noise_sensitivity_probe")?;
    let gram = probe.gram()?;
    let (l, lambda_min) = checked_factor(&gram)?;
    let y = Tensor::matrix(k, 1, probe.y.clone())?;
    let coeffs = linalg::cholesky_solve(&l, &y)?;
    let w = linalg::matmul(&probe.f, &coeffs)?.into_data();

    let s2 = probe.sigma * probe.sigma;
    let analytic = s2 * dot(&w, &w);
    let quadratic_form = s2 * dot(&probe.y, coeffs.data());
    let fw = linalg::matmul_tn(&probe.f, &Tensor::matrix(d, 1, w.clone())?)?;
    let residual = fw.data().iter().zip(&probe.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for n in 1..=n_draws {
        let x: f64 = w.iter().map(|wi| wi * probe.sigma * rng.sample::<f64, _>(StandardNormal)).sum();
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let empirical = m2 / (n_draws - 1) as f64;
    let rel_error = (empirical - analytic).abs() / analytic;
    let passes = rel_error < 0.02
        && (analytic - quadratic_form).abs() <= 1e-10 * analytic.max(1.0)
        && residual < 1e-8;
    Ok(NoiseSensitivityReport {
        w,
        lambda_min,
        analytic,
        quadratic_form,
        empirical,
        rel_error,
        residual,
        n_draws,
        passes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseReport {
    pub sigma: f64,
    pub lambda_min: f64,
    /// `σ² / λ_min(G)`
    pub bound: f64,
    /// Sensitivity at the eigenvector of `λ_min`.
    pub extremal: f64,
    /// Largest sensitivity over the random targets.
    pub random_max: f64,
    /// Largest over the random targets and the extremal one.
    pub empirical_max: f64,
    pub n_random: usize,
    pub passes: bool,
}

/// Searches unit targets `y` for the largest `σ² yᵀG⁻¹y`, analytically via the
/// smallest eigenpair of `G` and stochastically over `n_random` directions.
pub fn worst_case_sensitivity(gram: &GramMatrix, sigma: f64, n_random: usize, seed: u64) -> Result<WorstCaseReport, OracleError> {
    let k = gram.size();
    let spectrum = linalg::sym_eigen(gram.as_tensor())?;
    let (l, lambda_min) = checked_factor(gram)?;
    let s2 = sigma * sigma;
    let bound = s2 / lambda_min;
    let sensitivity = |y: &[f64]| -> Result<f64, OracleError> {
        let solved = linalg::cholesky_solve(&l, &Tensor::matrix(k, 1, y.to_vec())?)?;
        Ok(s2 * dot(y, solved.data()))
    };
    let extremal = sensitivity(&spectrum.vector(k - 1))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_max = f64::NEG_INFINITY;
    for _ in 0..n_random {
        let mut y: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&y, &y).sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
        random_max = random_max.max(sensitivity(&y)?);
    }
    let empirical_max = random_max.max(extremal);
    let tol = 1e-9 * bound.max(1.0);
    let passes = (extremal - bound).abs() <= tol && empirical_max >= bound - tol && empirical_max <= bound + tol;
    Ok(WorstCaseReport {
        sigma,
        lambda_min,
        bound,
        extremal,
        random_max,
        empirical_max,
        n_random,
        passes,
    })
}
