use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::linalg;

use super::OracleError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexityConfig {
    /// Latent dimension.
    pub k: usize,
    /// Number of latents the label depends on.
    pub s: usize,
    /// Ascending training-set sizes.
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    pub n_test: usize,
    pub target_accuracy: f64,
    pub folds: usize,
    pub n_lambdas: usize,
    pub max_iterations: usize,
    /// Replace the random rotation of the entangled condition by the identity.
    pub identity_rotation: bool,
    pub seed: u64,
}

impl Default for SampleComplexityConfig {
    fn default() -> Self {
        Self {
            k: 64,
            s: 2,
            n_grid: vec![16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024],
            seeds: 10,
            n_test: 2000,
            target_accuracy: 0.9,
            folds: 5,
            n_lambdas: 10,
            max_iterations: 300,
            identity_rotation: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub lambda: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub support: Vec<usize>,
    /// Curves stop at the first size that reaches the target.
    pub disentangled: Vec<CurvePoint>,
    pub entangled: Vec<CurvePoint>,
    pub n_dis: Option<usize>,
    pub n_ent: Option<usize>,
    /// Disentangled reached the target with fewer samples; a size that never
    /// reaches it counts as infinite.
    pub disentangled_wins: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexityReport {
    pub config: SampleComplexityConfig,
    pub outcomes: Vec<SeedOutcome>,
    /// Mean over the seeds that reached the target.
    pub mean_n_dis: Option<f64>,
    pub mean_n_ent: Option<f64>,
    pub unreached_dis: usize,
    pub unreached_ent: usize,
    pub wins: usize,
    pub passes: bool,
}

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [f64],
    rows: Vec<usize>,
    k: usize,
}

impl Problem<'_> {
    fn row(&self, r: usize) -> &[f64] {
        let i = self.rows[r];
        &self.x[i * self.k..(i + 1) * self.k]
    }

    fn label(&self, r: usize) -> f64 {
        self.y[self.rows[r]]
    }

    fn n(&self) -> usize {
        self.rows.len()
    }

    /// Gradient of the mean logistic loss.
    fn gradient(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        let n = self.n() as f64;
        for r in 0..self.n() {
            let xr = self.row(r);
            let yr = self.label(r);
            let margin = yr * dot(xr, w);
            let coef = -yr / (1.0 + margin.exp()) / n;
            for (g, x) in out.iter_mut().zip(xr) {
                *g += coef * x;
            }
        }
    }

    /// Upper bound on the Lipschitz constant of the gradient, `σ_max(X)² / 4n`.
    fn lipschitz(&self) -> f64 {
        let mut v = vec![1.0 / (self.k as f64).sqrt(); self.k];
        let mut top = 0.0;
        for _ in 0..50 {
            let mut next = vec![0.0; self.k];
            for r in 0..self.n() {
                let xr = self.row(r);
                let p = dot(xr, &v);
                for (nx, x) in next.iter_mut().zip(xr) {
                    *nx += p * x;
                }
            }
            top = dot(&next, &next).sqrt();
            if top == 0.0 {
                return 1.0;
            }
            next.iter_mut().for_each(|x| *x /= top);
            v = next;
        }
        // margin for the power iteration's underestimate
        1.05 * top / (4.0 * self.n() as f64)
    }

    fn lambda_max(&self) -> f64 {
        let mut g = vec![0.0; self.k];
        self.gradient(&vec![0.0; self.k], &mut g);
        g.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// L1-penalized logistic regression by FISTA, warm-started from `w`.
    fn fit(&self, lambda: f64, lipschitz: f64, w: &mut [f64], max_iterations: usize) {
        let step = 1.0 / lipschitz;
        let mut z = w.to_vec();
        let mut prev = w.to_vec();
        let mut grad = vec![0.0; self.k];
        let mut t: f64 = 1.0;
        for _ in 0..max_iterations {
            self.gradient(&z, &mut grad);
            let mut change: f64 = 0.0;
            for j in 0..self.k {
                let u = z[j] - step * grad[j];
                w[j] = u.signum() * (u.abs() - step * lambda).max(0.0);
                change = change.max((w[j] - prev[j]).abs());
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            for j in 0..self.k {
                z[j] = w[j] + (t - 1.0) / t_next * (w[j] - prev[j]);
            }
            prev.copy_from_slice(w);
            t = t_next;
            if change < 1e-6 {
                break;
            }
        }
    }

    fn accuracy(&self, w: &[f64]) -> f64 {
        let hits = (0..self.n()).filter(|&r| dot(self.row(r), w) * self.label(r) > 0.0).count();
        hits as f64 / self.n() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lambda_path(lambda_max: f64, n: usize) -> Vec<f64> {
    let lo = (1e-3f64).ln();
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            lambda_max * (t * lo).exp()
        })
        .collect()
}

/// Cross-validated L1 logistic regression on the first `n` training rows;
/// returns the chosen penalty and held-out accuracy.
fn learn(x: &[f64], y: &[f64], n: usize, n_test: usize, cfg: &SampleComplexityConfig, rng: &mut ChaCha8Rng) -> CurvePoint {
    let k = cfg.k;
    let all = Problem { x, y, rows: (0..n).collect(), k };
    let path = lambda_path(all.lambda_max(), cfg.n_lambdas);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let folds = cfg.folds.min(n);
    let mut scores = vec![0.0; path.len()];
    for fold in 0..folds {
        let pick = |held: bool| -> Vec<usize> {
            order.iter().enumerate().filter(|(i, _)| (i % folds == fold) == held).map(|(_, &r)| r).collect()
        };
        let train = Problem { x, y, rows: pick(false), k };
        let val = Problem { x, y, rows: pick(true), k };
        let lip = train.lipschitz();
        let mut w = vec![0.0; k];
        for (score, &lambda) in scores.iter_mut().zip(&path) {
            train.fit(lambda, lip, &mut w, cfg.max_iterations);
            *score += val.accuracy(&w);
        }
    }
    // ties go to the stronger penalty
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }

    let lip = all.lipschitz();
    let mut w = vec![0.0; k];
    for &lambda in &path[..=best] {
        all.fit(lambda, lip, &mut w, cfg.max_iterations);
    }
    let test = Problem {
        x,
        y,
        rows: (x.len() / k - n_test..x.len() / k).collect(),
        k,
    };
    CurvePoint {
        n,
        lambda: path[best],
        accuracy: test.accuracy(&w),
    }
}

fn curve(x: &[f64], y: &[f64], cfg: &SampleComplexityConfig, seed: u64) -> (Vec<CurvePoint>, Option<usize>) {
    let mut points = Vec::new();
    for (i, &n) in cfg.n_grid.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let point = learn(x, y, n, cfg.n_test, cfg, &mut rng);
        let reached = point.accuracy >= cfg.target_accuracy;
        points.push(point);
        if reached {
            return (points, Some(n));
        }
    }
    (points, None)
}

fn run_seed(cfg: &SampleComplexityConfig, seed: u64) -> Result<SeedOutcome, OracleError> {
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support: Vec<usize> = (0..k).collect();
    support.shuffle(&mut rng);
    support.truncate(cfg.s);
    support.sort_unstable();
    let mut beta = vec![0.0; k];
    for &j in &support {
        beta[j] = rng.sample(StandardNormal);
    }
    let rotation = if cfg.identity_rotation {
        Tensor::eye(k)
    } else {
        linalg::random_orthogonal(k, &mut rng)
    };

    let n_total = cfg.n_grid.last().copied().unwrap_or(0) + cfg.n_test;
    let latents = Tensor::from_fn(n_total, k, |_, _| rng.sample(StandardNormal));
    let y: Vec<f64> = (0..n_total)
        .map(|i| if dot(latents.row(i), &beta) >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    // each observation is R z
    let entangled = linalg::matmul_nt(&latents, &rotation)?;

    let fit_seed = rng.random::<u64>();
    let (disentangled, n_dis) = curve(latents.data(), &y, cfg, fit_seed);
    let (entangled, n_ent) = curve(entangled.data(), &y, cfg, fit_seed);
    let disentangled_wins = match (n_dis, n_ent) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    };
    Ok(SeedOutcome {
        seed,
        support,
        disentangled,
        entangled,
        n_dis,
        n_ent,
        disentangled_wins,
    })
}

fn mean_reached(values: impl Iterator<Item = Option<usize>>) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    let mut missing = 0;
    for v in values {
        match v {
            Some(n) => {
                sum += n as f64;
                count += 1;
            }
            None => missing += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

/// Compares how many labels an L1-regularized linear classifier needs on
/// sparse-labelled latents against the same latents after a random rotation.
pub fn sample_complexity_experiment(cfg: &SampleComplexityConfig) -> Result<SampleComplexityReport, OracleError> {
    if cfg.s == 0 || cfg.s > cfg.k {
        return Err(OracleError::InvalidParameter {
            name: "s",
            reason: format!("need 1 <= s <= k = {}, got {}", cfg.k, cfg.s),
        });
    }
    if cfg.n_grid.is_empty() || cfg.n_grid.windows(2).any(|w| w[0] >= w[1]) || cfg.n_grid[0] < cfg.folds.max(2) {
        return Err(OracleError::InvalidParameter {
            name: "n_grid",
            reason: "must be strictly ascending and start at no fewer samples than folds".into(),
        });
    }
    if cfg.seeds == 0 || cfg.n_test == 0 || cfg.folds < 2 || cfg.n_lambdas == 0 {
        return Err(OracleError::InvalidParameter {
            name: "seeds",
            reason: "seeds, n_test and n_lambdas must be positive and folds at least 2".into(),
        });
    }
    let outcomes = (0..cfg.seeds as u64)
        .map(|i| run_seed(cfg, cfg.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let (mean_n_dis, unreached_dis) = mean_reached(outcomes.iter().map(|o| o.n_dis));
    let (mean_n_ent, unreached_ent) = mean_reached(outcomes.iter().map(|o| o.n_ent));
    let wins = outcomes.iter().filter(|o| o.disentangled_wins).count();
    let passes = wins * 10 >= cfg.seeds * 8;
    Ok(SampleComplexityReport {
        config: cfg.clone(),
        outcomes,
        mean_n_dis,
        mean_n_ent,
        unreached_dis,
        unreached_ent,
        wins,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SampleComplexityConfig {
        SampleComplexityConfig {
            k: 16,
            s: 2,
            n_grid: vec![16, 32, 64, 128, 256],
            seeds: 3,
            n_test: 500,
            ..Default::default()
        }
    }

    #[test]
    fn identity_rotation_makes_conditions_identical() {
        let r = sample_complexity_experiment(&SampleComplexityConfig {
            identity_rotation: true,
            ..small()
        })
        .unwrap();
        for o in &r.outcomes {
            assert_eq!(o.disentangled, o.entangled);
            assert_eq!(o.n_dis, o.n_ent);
            assert!(!o.disentangled_wins);
        }
        assert!(!r.passes);
    }

    #[test]
    fn sparse_truth_favours_the_disentangled_basis() {
        let r = sample_complexity_experiment(&small()).unwrap();
        assert!(r.wins >= 2, "{:?}", r.outcomes.iter().map(|o| (o.n_dis, o.n_ent)).collect::<Vec<_>>());
        assert_eq!(r, sample_complexity_experiment(&small()).unwrap());
    }

    #[test]
    fn dense_truth_runs() {
        let r = sample_complexity_experiment(&SampleComplexityConfig { s: 16, ..small() }).unwrap();
        assert_eq!(r.outcomes.len(), 3);
        assert!(r.outcomes.iter().all(|o| o.support.len() == 16));
    }

    #[test]
    fn rejects_bad_grids() {
        let bad = SampleComplexityConfig {
            n_grid: vec![32, 16],
            ..small()
        };
        assert!(sample_complexity_experiment(&bad).is_err());
        assert!(sample_complexity_experiment(&SampleComplexityConfig { s: 0, ..small() }).is_err());
    }
}
