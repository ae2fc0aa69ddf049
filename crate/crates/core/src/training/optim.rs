use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::model::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter named in `grads`; others are untouched.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::default();
        params.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.apply(&mut params, &single("w", Tensor::vector(vec![3.0, -0.01, 0.0]).unwrap()));
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - (-1.9)).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::default();
        params.insert("x", Tensor::vector(vec![5.0, -3.0]).unwrap());
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let x = params.get("x").unwrap().data().to_vec();
            let g = Tensor::vector(vec![2.0 * (x[0] - 1.0), 8.0 * (x[1] + 2.0)]).unwrap();
            adam.apply(&mut params, &single("x", g));
        }
        let x = params.get("x").unwrap().data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut grads = BTreeMap::from([
            ("a".to_string(), Tensor::vector(vec![3.0]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![4.0]).unwrap()),
        ]);
        assert_eq!(clip_global_norm(&mut grads, 10.0), 5.0);
        assert_eq!(grads["a"].data(), &[3.0]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-15);
        assert!((grads["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}
