//! Dense symmetric linear algebra on [`Tensor`] matrices: Cholesky factorization,
//! log-determinants, inverses, and a cyclic Jacobi eigensolver.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::kernels::{dot, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc};
use crate::autodiff::{Result, Tensor, TensorError};

fn square(a: &Tensor, op: &'static str) -> Result<usize> {
    let (r, c) = a.dims(op)?;
    if r != c {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![r],
            rhs: vec![c],
        });
    }
    Ok(r)
}

/// (A + Aᵀ) / 2
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "symmetrize")?;
    let d = a.data();
    Ok(Tensor::from_fn(n, n, |i, j| 0.5 * (d[i * n + j] + d[j * n + i])))
}

/// Lower-triangular factor `L` with `A = L Lᵀ`. Reads only the lower triangle.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "cholesky")?;
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = src[j * n + j];
        for p in 0..j {
            diag -= l[j * n + p] * l[j * n + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(TensorError::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let s = src[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / ljj;
        }
    }
    Tensor::matrix(n, n, l)
}

/// `2 Σ log L_ii` for a Cholesky factor.
pub fn logdet_from_factor(l: &Tensor) -> f64 {
    let n = l.rows();
    (0..n).map(|i| l.data()[i * n + i].ln()).sum::<f64>() * 2.0
}

/// log det of a symmetric positive-definite matrix (input is symmetrized first).
pub fn logdet_spd(a: &Tensor) -> Result<f64> {
    Ok(logdet_from_factor(&cholesky(&symmetrize(a)?)?))
}

/// Solves `L Lᵀ x = b` for each column of `b`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    let (br, bc) = b.dims("cholesky_solve")?;
    if br != n {
        return Err(TensorError::ShapeMismatch {
            op: "cholesky_solve",
            lhs: l.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ld = l.data();
    let mut x = b.data().to_vec();
    for col in 0..bc {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i * bc + col];
            for p in 0..i {
                s -= ld[i * n + p] * x[p * bc + col];
            }
            x[i * bc + col] = s / ld[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * bc + col];
            for p in i + 1..n {
                s -= ld[p * n + i] * x[p * bc + col];
            }
            x[i * bc + col] = s / ld[i * n + i];
        }
    }
    Tensor::matrix(n, bc, x)
}

/// Inverse of a symmetric positive-definite matrix, returned exactly symmetric.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let l = cholesky(&symmetrize(a)?)?;
    let inv = cholesky_solve(&l, &Tensor::eye(l.rows()))?;
    symmetrize(&inv)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims("matmul")?;
    let (k2, n) = b.dims("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn_acc(&mut out, a.data(), b.data(), m, k, n);
    Tensor::matrix(m, n, out)
}

/// A · Bᵀ
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims("matmul_nt")?;
    let (n, k2) = b.dims("matmul_nt")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nt_acc(&mut out, a.data(), b.data(), m, k, n);
    Tensor::matrix(m, n, out)
}

/// Aᵀ · B
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims("matmul_tn")?;
    let (k2, n) = b.dims("matmul_tn")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_tn_acc(&mut out, a.data(), b.data(), m, k, n);
    Tensor::matrix(m, n, out)
}

pub fn trace(a: &Tensor) -> f64 {
    let n = a.rows().min(a.cols());
    (0..n).map(|i| a.get(i, i)).sum()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Tensor,
}

impl Spectrum {
    /// Σ λ_j v_j v_jᵀ
    pub fn reconstruct(&self) -> Tensor {
        let n = self.values.len();
        let v = self.vectors.data();
        Tensor::from_fn(n, n, |i, j| {
            (0..n).map(|p| self.values[p] * v[i * n + p] * v[j * n + p]).sum()
        })
    }

    pub fn min(&self) -> f64 {
        *self.values.last().expect("non-empty spectrum")
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|i| self.vectors.data()[i * n + j]).collect()
    }
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn sym_eigen(a: &Tensor) -> Result<Spectrum> {
    let n = square(a, "sym_eigen")?;
    let mut m = symmetrize(a)?.into_data();
    let mut v = Tensor::eye(n).into_data();
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y * n + y].total_cmp(&m[x * n + x]));
    let values = order.iter().map(|&j| m[j * n + j]).collect();
    let vectors = Tensor::from_fn(n, n, |i, j| v[i * n + order[j]]);
    Ok(Spectrum { values, vectors })
}

/// Haar-distributed orthogonal matrix via Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // two passes of modified Gram-Schmidt for orthogonality to machine precision
        for _ in 0..2 {
            for u in &cols {
                let proj = dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Tensor::from_fn(n, n, |i, j| cols[j][i])
}
