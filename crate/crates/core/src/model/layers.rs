use crate::autodiff::{Axis, Graph, Var};

use super::params::Bound;
use super::ModelError;

pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

pub(crate) fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var, ModelError> {
    let gain = p.var(&format!("{prefix}.g"))?;
    let bias = p.var(&format!("{prefix}.b"))?;
    let y = g.layer_norm(x, eps)?;
    let y = g.mul_row(y, gain)?;
    Ok(g.add_row(y, bias)?)
}

/// Multi-head attention of `queries` (m × d) over `context` (n × d).
///
/// Each head's m × n weight matrix is pushed onto `weights` when given.
pub(crate) fn attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    queries: Var,
    context: Var,
    n_heads: usize,
    mut weights: Option<&mut Vec<Var>>,
) -> Result<Var, ModelError> {
    let q = linear(g, p, &format!("{prefix}.q"), queries)?;
    let k = linear(g, p, &format!("{prefix}.k"), context)?;
    let v = linear(g, p, &format!("{prefix}.v"), context)?;
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, Axis::Cols, h * dh, dh)?,
                g.slice(k, Axis::Cols, h * dh, dh)?,
                g.slice(v, Axis::Cols, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax_rows(scores)?;
        if let Some(w) = weights.as_deref_mut() {
            w.push(a);
        }
        heads.push(g.matmul(a, vh)?);
    }
    let joined = if n_heads == 1 { heads[0] } else { g.concat(&heads, Axis::Cols)? };
    linear(g, p, &format!("{prefix}.o"), joined)
}

/// Pre-norm feed-forward residual branch: `fc2(gelu(fc1(norm(x))))`.
pub(crate) fn feed_forward(g: &mut Graph, p: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var, ModelError> {
    let h = norm(g, p, &format!("{prefix}.ln"), x, eps)?;
    let h = linear(g, p, &format!("{prefix}.fc1"), h)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{prefix}.fc2"), h)
}
