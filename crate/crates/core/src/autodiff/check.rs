use super::graph::{Graph, Var};
use super::tensor::{Result, Tensor, TensorError};

/// Maximum over every input entry of `|analytic − numeric| / max(1, |analytic|)`,
/// where `numeric` is a central difference with the given step.
///
/// `build` receives a fresh graph plus one leaf per input and must return a
/// scalar variable.
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NotScalar { shape: v.shape().to_vec() });
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
