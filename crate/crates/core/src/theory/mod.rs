//! Executable numerical oracles for the properties the diversity objective
//! relies on. Every oracle is deterministic given its seed and reports all
//! intermediate quantities next to a pass/fail verdict.

mod descent;
mod hadamard;
mod sample_complexity;
mod sensitivity;
mod spectral;

pub use descent::{orthogonality_descent, DescentConfig, DescentReport, DescentStep};
pub use hadamard::{verify_hadamard, HadamardReport};
pub use sample_complexity::{
    sample_complexity_experiment, CurvePoint, SampleComplexityConfig, SampleComplexityReport, SeedOutcome,
};
pub use sensitivity::{
    noise_sensitivity_probe, worst_case_sensitivity, NoiseSensitivityReport, SensitivityProbe, WorstCaseReport,
};
pub use spectral::{covariance_with_spectrum, projection_error, spectral_tail_bound, BruteForceCheck, SpectralReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::losses::GramMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("token matrix is rank deficient (smallest Gram eigenvalue {lambda_min:e})")]
    RankDeficient { lambda_min: f64 },
    #[error("failed to serialize report: {0}")]
    Serialize(String),
}

/// Machine-readable outcome of one oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub parameters: Value,
    pub passes: bool,
    pub report: Value,
}

impl Verdict {
    fn new(name: &str, parameters: Value, passes: bool, report: &impl Serialize) -> Result<Self, OracleError> {
        Ok(Self {
            name: name.to_string(),
            parameters,
            passes,
            report: serde_json::to_value(report).map_err(|e| OracleError::Serialize(e.to_string()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryBundle {
    pub seed: u64,
    pub canary: bool,
    pub verdicts: Vec<Verdict>,
    pub all_pass: bool,
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = Tensor::from_fn(n, n + 2, |_, _| rng.sample(StandardNormal));
    crate::linalg::matmul_nt(&a, &a).expect("square product")
}

/// Diagonal, correlated, near-singular and random covariances.
pub fn hadamard_suite(seed: u64, canary: bool) -> Result<Vec<HadamardReport>, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let equi = |n: usize, rho: f64| Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho });
    let mut cases = vec![
        Tensor::from_fn(3, 3, |i, j| if i == j { [3.0, 1.0, 7.0][i] } else { 0.0 }),
        equi(2, 0.5),
        equi(3, 0.999),
    ];
    for n in 2..8 {
        cases.push(random_spd(n, &mut rng));
    }
    cases.iter().map(|c| verify_hadamard(c, canary)).collect()
}

/// Random spectra on random orthonormal bases, `D` between 3 and 8.
pub fn spectral_suite(n_cases: usize, trials: usize, seed: u64) -> Result<Vec<SpectralReport>, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_cases)
        .map(|_| {
            let dim = rng.random_range(3..=8);
            let k = rng.random_range(1..dim);
            let mut lambdas: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 5.0).collect();
            if rng.random_bool(0.25) {
                lambdas[dim - 1] = 0.0;
            }
            let cov = covariance_with_spectrum(&lambdas, &mut rng);
            spectral_tail_bound(&cov, k, trials, rng.random())
        })
        .collect()
}

/// Every oracle at its reference configuration. `canary` swaps in a broken
/// total-correlation sign so the suite is seen to fail.
pub fn run_all(seed: u64, canary: bool) -> Result<TheoryBundle, OracleError> {
    let mut verdicts = Vec::new();

    let hadamard = hadamard_suite(seed, canary)?;
    verdicts.push(Verdict::new(
        "hadamard",
        json!({ "cases": hadamard.len(), "canary": canary }),
        hadamard.iter().all(|r| r.passes),
        &hadamard,
    )?);

    let spectral = spectral_suite(100, 200, seed)?;
    verdicts.push(Verdict::new(
        "spectral_tail_bound",
        json!({ "cases": 100, "brute_force_trials": 200 }),
        spectral.iter().all(|r| r.passes),
        &spectral,
    )?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::from_fn(32, 8, |_, _| rng.sample(StandardNormal));
    let y: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
    let probe = SensitivityProbe::new(f, y, 0.5)?;
    let noise = noise_sensitivity_probe(&probe, 100_000, seed)?;
    verdicts.push(Verdict::new(
        "noise_sensitivity",
        json!({ "d": 32, "k": 8, "sigma": 0.5, "n_draws": 100_000 }),
        noise.passes,
        &noise,
    )?);

    let sigma = 0.5;
    let mut worst = vec![worst_case_sensitivity(&probe.gram()?, sigma, 10_000, seed)?];
    let rho = 0.5;
    let pair = GramMatrix::from_matrix(Tensor::from_fn(2, 2, |i, j| if i == j { 1.0 } else { rho }))?;
    worst.push(worst_case_sensitivity(&pair, sigma, 10_000, seed)?);
    let identity = worst_case_sensitivity(&GramMatrix::from_matrix(Tensor::eye(8))?, sigma, 10_000, seed)?;
    let identity_exact = identity.extremal == sigma * sigma && identity.bound == sigma * sigma;
    worst.push(identity);
    verdicts.push(Verdict::new(
        "worst_case_sensitivity",
        json!({ "sigma": sigma, "n_random": 10_000, "cases": ["random_d32_k8", "pair_rho_0.5", "identity_k8"] }),
        worst.iter().all(|r| r.passes) && identity_exact,
        &worst,
    )?);

    let descent_cfg = DescentConfig { seed, ..Default::default() };
    let descent = orthogonality_descent(&descent_cfg)?;
    verdicts.push(Verdict::new(
        "orthogonality_descent",
        serde_json::to_value(&descent_cfg).map_err(|e| OracleError::Serialize(e.to_string()))?,
        descent.passes,
        &descent,
    )?);

    let sc_cfg = SampleComplexityConfig { seed, ..Default::default() };
    let sc = sample_complexity_experiment(&sc_cfg)?;
    verdicts.push(Verdict::new(
        "sample_complexity",
        serde_json::to_value(&sc_cfg).map_err(|e| OracleError::Serialize(e.to_string()))?,
        sc.passes,
        &sc,
    )?);

    let all_pass = verdicts.iter().all(|v| v.passes);
    Ok(TheoryBundle {
        seed,
        canary,
        verdicts,
        all_pass,
    })
}
