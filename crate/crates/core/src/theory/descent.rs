use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::linalg;
use crate::losses::{gaussian_total_correlation, tcr_diversity_loss, GramMatrix};

use super::OracleError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub k: usize,
    pub d: usize,
    pub steps: usize,
    pub step_size: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Start from tokens with exactly this pairwise cosine instead of random ones.
    pub initial_coherence: Option<f64>,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d: 128,
            steps: 2000,
            step_size: 0.01,
            epsilon: 0.5,
            seed: 0,
            initial_coherence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentStep {
    pub step: usize,
    pub loss: f64,
    pub coherence: f64,
    pub tc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub config: DescentConfig,
    /// Entry 0 is the initial state.
    pub trajectory: Vec<DescentStep>,
    pub final_coherence: f64,
    /// Largest single-step increase of the total correlation.
    pub max_tc_increase: f64,
    pub passes: bool,
}

fn normalize_rows(t: &mut Tensor) {
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
}

fn initial_tokens(cfg: &DescentConfig) -> Result<Tensor, OracleError> {
    let (k, d) = (cfg.k, cfg.d);
    match cfg.initial_coherence {
        Some(c) => {
            // rows of the Cholesky factor of (1−c)I + c11ᵀ have pairwise cosine c
            let target = Tensor::from_fn(k, k, |i, j| if i == j { 1.0 } else { c });
            let l = linalg::cholesky(&target)?;
            Ok(Tensor::from_fn(k, d, |i, j| if j < k { l.get(i, j) } else { 0.0 }))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut t = Tensor::from_fn(k, d, |_, _| rng.sample(StandardNormal));
            normalize_rows(&mut t);
            Ok(t)
        }
    }
}

fn state(tokens: &Tensor, epsilon: f64, step: usize) -> Result<DescentStep, OracleError> {
    let gram = GramMatrix::from_tokens(tokens)?;
    let mut g = Graph::new();
    let f = g.constant(tokens.clone());
    let loss = tcr_diversity_loss(&mut g, f, epsilon)?;
    Ok(DescentStep {
        step,
        loss: g.value(loss).item(),
        coherence: gram.max_coherence(),
        tc: gaussian_total_correlation(gram.as_tensor())?,
    })
}

/// Gradient descent on the diversity loss with tokens renormalized to unit
/// length after every step, tracking coherence and the Gaussian total
/// correlation of the token Gram matrix.
pub fn orthogonality_descent(cfg: &DescentConfig) -> Result<DescentReport, OracleError> {
    if cfg.k == 0 || cfg.k > cfg.d {
        return Err(OracleError::InvalidParameter {
            name: "k",
            reason: format!("need 1 <= k <= d = {}, got {}", cfg.d, cfg.k),
        });
    }
    if !(cfg.step_size > 0.0 && cfg.epsilon > 0.0) {
        return Err(OracleError::InvalidParameter {
            name: "step_size",
            reason: "step size and epsilon must be positive".into(),
        });
    }
    let mut tokens = initial_tokens(cfg)?;
    let mut trajectory = vec![state(&tokens, cfg.epsilon, 0)?];
    for step in 1..=cfg.steps {
        let mut g = Graph::new();
        let f = g.leaf(tokens.clone().with_grad());
        let loss = tcr_diversity_loss(&mut g, f, cfg.epsilon)?;
        let grads = g.backward(loss)?;
        let grad = grads.get(f).expect("token gradient");
        for (x, dx) in tokens.data_mut().iter_mut().zip(grad.data()) {
            *x -= cfg.step_size * dx;
        }
        normalize_rows(&mut tokens);
        tokens.set_requires_grad(false);
        trajectory.push(state(&tokens, cfg.epsilon, step)?);
    }
    let final_coherence = trajectory.last().map(|s| s.coherence).unwrap_or(0.0);
    let max_tc_increase = trajectory
        .windows(2)
        .map(|w| w[1].tc - w[0].tc)
        .fold(0.0, f64::max);
    let passes = final_coherence < 0.05 && max_tc_increase <= 1e-6;
    Ok(DescentReport {
        config: cfg.clone(),
        trajectory,
        final_coherence,
        max_tc_increase,
        passes,
    })
}
