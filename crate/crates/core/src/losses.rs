//! Masked reconstruction, Total Coding Rate diversity, and the Gaussian Total
//! Correlation used to relate them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Result, Tensor, TensorError, Var};
use crate::linalg;

/// How the diversity term groups tokens within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TcrPooling {
    /// Each sample's `k` tokens form one Gram matrix; losses are averaged.
    #[default]
    PerSample,
    /// All `B·k` tokens of a batch form a single Gram matrix.
    BatchPooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub mask_ratio: f64,
    pub tcr_pooling: TcrPooling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epsilon: 0.5,
            mask_ratio: 0.6,
            tcr_pooling: TcrPooling::PerSample,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(format!("epsilon must be finite and > 0, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }
}

/// `k × k` matrix of pairwise token inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Tensor);

impl GramMatrix {
    /// From tokens stored one per row (`k × d`).
    pub fn from_tokens(tokens: &Tensor) -> Result<Self> {
        let g = linalg::matmul_nt(tokens, tokens)?;
        Ok(Self(linalg::symmetrize(&g)?))
    }

    pub fn from_matrix(g: Tensor) -> Result<Self> {
        Ok(Self(linalg::symmetrize(&g)?))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    /// max_{i≠j} |G_ij| / sqrt(G_ii G_jj); zero for a single token.
    pub fn max_coherence(&self) -> f64 {
        let k = self.size();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                let denom = (self.0.get(i, i) * self.0.get(j, j)).sqrt();
                if denom > 0.0 {
                    worst = worst.max(self.0.get(i, j).abs() / denom);
                }
            }
        }
        worst
    }
}

/// Mean squared error over the masked patches only.
pub fn reconstruction_loss(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    if g.value(target).numel() == 0 {
        return Err(TensorError::Empty { op: "reconstruction_loss" });
    }
    g.mse_loss(predicted, target)
}

/// Gain `d / (k ε²)` applied to the token Gram matrix.
pub fn coding_rate_gain(k: usize, d: usize, epsilon: f64) -> f64 {
    d as f64 / (k as f64 * epsilon * epsilon)
}

/// `−½ log det(I_k + d/(kε²) · F Fᵀ)` for tokens `F` stored one per row.
///
/// Equal to the `d × d` form `−½ log det(I_d + d/(kε²) · Fᵀ F)` by
/// `det(I + AB) = det(I + BA)`; the `k × k` form is factorized because `k ≪ d`.
pub fn tcr_diversity_loss(g: &mut Graph, tokens: Var, epsilon: f64) -> Result<Var> {
    let (k, d) = g.value(tokens).dims("tcr_diversity_loss")?;
    let gram = g.matmul_nt(tokens, tokens)?;
    let scaled = g.scale(gram, coding_rate_gain(k, d, epsilon))?;
    let eye = g.constant(Tensor::eye(k));
    let m = g.add(scaled, eye)?;
    let ld = g.logdet_psd(m)?;
    g.scale(ld, -0.5)
}

/// Plain-value `k × k` form of [`tcr_diversity_loss`].
pub fn tcr_value(tokens: &Tensor, epsilon: f64) -> Result<f64> {
    let (k, d) = tokens.dims("tcr_value")?;
    let mut m = linalg::matmul_nt(tokens, tokens)?;
    let gain = coding_rate_gain(k, d, epsilon);
    for (i, x) in m.data_mut().iter_mut().enumerate() {
        *x *= gain;
        if i / k == i % k {
            *x += 1.0;
        }
    }
    Ok(-0.5 * linalg::logdet_spd(&m)?)
}

/// The `d × d` form, `−½ log det(I_d + d/(kε²) · Fᵀ F)`.
pub fn tcr_value_feature_space(tokens: &Tensor, epsilon: f64) -> Result<f64> {
    let (k, d) = tokens.dims("tcr_value_feature_space")?;
    let mut m = linalg::matmul_tn(tokens, tokens)?;
    let gain = coding_rate_gain(k, d, epsilon);
    for (i, x) in m.data_mut().iter_mut().enumerate() {
        *x *= gain;
        if i / d == i % d {
            *x += 1.0;
        }
    }
    Ok(-0.5 * linalg::logdet_spd(&m)?)
}

/// `rec + λ · div`
pub fn total_loss(g: &mut Graph, rec: Var, div: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        // keep the graph free of a zero-weighted branch
        let zero = g.scale(div, 0.0)?;
        return g.add(rec, zero);
    }
    let weighted = g.scale(div, lambda)?;
    g.add(rec, weighted)
}

/// `½ (Σ log Σ_ii − log det Σ)` for a symmetric positive-definite covariance.
pub fn gaussian_total_correlation(covariance: &Tensor) -> Result<f64> {
    let sym = linalg::symmetrize(covariance)?;
    let logdet = linalg::logdet_spd(&sym)?;
    let n = sym.rows();
    let diag: f64 = (0..n).map(|i| sym.get(i, i).ln()).sum();
    Ok(0.5 * (diag - logdet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::full(&[2, 3], 1.0));
        let p = g.constant(Tensor::full(&[2, 3], 1.0));
        let l = reconstruction_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let l = reconstruction_loss(&mut g, z, t).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn reconstruction_gradient_is_two_residual_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = Tensor::from_fn(3, 4, |_, _| rng.sample(StandardNormal)).with_grad();
        let target = Tensor::from_fn(3, 4, |_, _| rng.sample(StandardNormal));
        let mut g = Graph::new();
        let (p, t) = (g.leaf(pred.clone()), g.constant(target.clone()));
        let l = reconstruction_loss(&mut g, p, t).unwrap();
        let grads = g.backward(l).unwrap();
        for ((gv, pv), tv) in grads.get(p).unwrap().data().iter().zip(pred.data()).zip(target.data()) {
            assert!((gv - 2.0 * (pv - tv) / 12.0).abs() < 1e-15);
        }
        let err = grad_check(
            |g, v| {
                let t = g.constant(target.clone());
                reconstruction_loss(g, v[0], t)
            },
            &[pred],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn tcr_of_zero_tokens_is_zero() {
        assert_eq!(tcr_value(&Tensor::zeros(&[3, 5]), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn tcr_orthonormal_and_duplicate_tokens() {
        let ortho = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let dup = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let l_ortho = tcr_value(&ortho, 1.0).unwrap();
        let l_dup = tcr_value(&dup, 1.0).unwrap();
        assert!((l_ortho - (-(3f64.ln()))).abs() < 1e-12);
        assert!((l_dup - (-0.5 * 5f64.ln())).abs() < 1e-12);
        assert!(l_dup > l_ortho);

        let mut g = Graph::new();
        let v = g.constant(ortho);
        let l = tcr_diversity_loss(&mut g, v, 1.0).unwrap();
        assert!((g.value(l).item() - l_ortho).abs() < 1e-15);
    }

    #[test]
    fn tcr_grad_check_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::from_fn(4, 8, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let err = grad_check(|g, v| tcr_diversity_loss(g, v[0], 0.5), &[f], 1e-5).unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let rec = g.constant(Tensor::scalar(0.5));
        let div = g.constant(Tensor::scalar(-1.0));
        let t = total_loss(&mut g, rec, div, 1e-4).unwrap();
        assert!((g.value(t).item() - 0.4999).abs() < 1e-15);
        let t = total_loss(&mut g, rec, div, 0.0).unwrap();
        assert_eq!(g.value(t).item(), 0.5);
    }

    #[test]
    fn total_correlation_examples() {
        let diag = Tensor::matrix(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 7.0]).unwrap();
        assert!(gaussian_total_correlation(&diag).unwrap().abs() < 1e-15);
        let half = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        assert!((gaussian_total_correlation(&half).unwrap() - (-0.5 * 0.75f64.ln())).abs() < 1e-12);
        let rho = 0.9;
        let eq = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { rho });
        let det: f64 = (1.0 - rho) * (1.0 - rho) * (1.0 + 2.0 * rho);
        assert!((gaussian_total_correlation(&eq).unwrap() - (-0.5 * det.ln())).abs() < 1e-12);
        assert!((gaussian_total_correlation(&eq).unwrap() - 1.787_775_4).abs() < 1e-6);
    }

    #[test]
    fn total_correlation_rejects_non_pd() {
        let bad = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            gaussian_total_correlation(&bad),
            Err(TensorError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn gram_coherence() {
        let f = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let g = GramMatrix::from_tokens(&f).unwrap();
        assert!((g.max_coherence() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(GramMatrix::from_tokens(&Tensor::full(&[1, 3], 2.0)).unwrap().max_coherence(), 0.0);
    }

    #[test]
    fn objective_config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let bad = ObjectiveConfig { epsilon: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ObjectiveConfig { lambda: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ObjectiveConfig { mask_ratio: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn random_pd(n: usize, seed: u64) -> Tensor {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Tensor::from_fn(n, n + 2, |_, _| rng.sample(StandardNormal));
            let mut a = linalg::matmul_nt(&b, &b).unwrap();
            for i in 0..n {
                a.data_mut()[i * n + i] += 1e-3;
            }
            a
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn total_correlation_nonnegative_and_zero_on_diagonal(n in 2usize..7, seed in any::<u64>()) {
                let a = random_pd(n, seed);
                prop_assert!(gaussian_total_correlation(&a).unwrap() >= -1e-12);
                let diag = Tensor::from_fn(n, n, |i, j| if i == j { a.get(i, i) } else { 0.0 });
                prop_assert!(gaussian_total_correlation(&diag).unwrap().abs() < 1e-10);
            }

            #[test]
            fn token_and_feature_space_forms_agree(k in 1usize..6, d in 1usize..10, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = Tensor::from_fn(k, d, |_, _| rng.sample(StandardNormal));
                let a = tcr_value(&f, 0.5).unwrap();
                let b = tcr_value_feature_space(&f, 0.5).unwrap();
                prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
            }
        }
    }
}
