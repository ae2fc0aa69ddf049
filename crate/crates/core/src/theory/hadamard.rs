use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::losses::gaussian_total_correlation;

use super::OracleError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardReport {
    pub tc: f64,
    pub max_off_diagonal: f64,
    pub is_diagonal: bool,
    pub passes: bool,
}

/// Checks that the Gaussian total correlation is non-negative and vanishes
/// exactly for diagonal covariances.
///
/// `canary` negates the computed value, a deliberately broken variant used to
/// confirm that the harness can fail.
pub fn verify_hadamard(covariance: &Tensor, canary: bool) -> Result<HadamardReport, OracleError> {
    let raw = gaussian_total_correlation(covariance)?;
    let tc = if canary { -raw } else { raw };
    let n = covariance.rows();
    let mut max_off: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                max_off = max_off.max(covariance.get(i, j).abs());
            }
        }
    }
    let is_diagonal = max_off < 1e-8;
    let passes = tc >= -1e-12 && ((tc < 1e-10) == is_diagonal);
    Ok(HadamardReport {
        tc,
        max_off_diagonal: max_off,
        is_diagonal,
        passes,
    })
}
