//! Row-major dense helpers for the small event-sized matrices carried in
//! natural-parameter and moment blocks.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative diagonal jitter used on the single factorization retry.
pub const JITTER: f64 = 1e-10;

/// Cholesky factor of a symmetric positive definite matrix.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl SpdFactor {
    /// Factor `a` (row-major, `d x d`). Retries once with `JITTER * trace / d`
    /// added to the diagonal before giving up.
    pub fn new(a: &[f64], d: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), d * d);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite matrix entry".into()));
        }
        let m = symmetrized(a, d);
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(Self { chol, dim: d });
        }
        let trace: f64 = (0..d).map(|i| m[(i, i)]).sum();
        if trace > 0.0 {
            let mut jittered = m;
            let eps = JITTER * trace / d as f64;
            for i in 0..d {
                jittered[(i, i)] += eps;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                return Ok(Self { chol, dim: d });
            }
        }
        Err(Error::Numerical(format!("{d}x{d} matrix is not positive definite")))
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..self.dim).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Inverse as a row-major buffer.
    pub fn inverse(&self) -> Vec<f64> {
        to_row_major(&self.chol.inverse())
    }

    /// Lower-triangular factor as a row-major buffer.
    pub fn lower(&self) -> Vec<f64> {
        to_row_major(&self.chol.l())
    }
}

fn symmetrized(a: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| 0.5 * (a[i * d + j] + a[j * d + i]))
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `out = a * x` for square `a`.
pub fn mat_vec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// tr(A B) for row-major square `a`, `b`.
pub fn trace_prod(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += a[i * d + j] * b[j * d + i];
        }
    }
    acc
}

/// x' A x.
pub fn quad_form(a: &[f64], x: &[f64], d: usize) -> f64 {
    (0..d).map(|i| x[i] * dot(&a[i * d..(i + 1) * d], x)).sum()
}

pub fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

/// `out = x y^T`.
pub fn outer(x: &[f64], y: &[f64], out: &mut [f64]) {
    let d = y.len();
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter().enumerate() {
            out[i * d + j] = xi * yj;
        }
    }
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_inverse_and_logdet() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let f = SpdFactor::new(&a, 2).unwrap();
        assert!((f.log_det() - 8f64.ln()).abs() < 1e-14);
        let inv = f.inverse();
        let want = [3.0 / 8.0, -2.0 / 8.0, -2.0 / 8.0, 4.0 / 8.0];
        for (x, y) in inv.iter().zip(want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_psd_recovers_with_jitter() {
        // Rank-one PSD matrix: plain Cholesky fails, jitter repairs it.
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(SpdFactor::new(&a, 2).is_ok());
    }

    #[test]
    fn indefinite_is_numerical_error() {
        let a = [1.0, 0.0, 0.0, -1.0];
        assert!(matches!(SpdFactor::new(&a, 2), Err(Error::Numerical(_))));
        let nan = [f64::NAN, 0.0, 0.0, 1.0];
        assert!(SpdFactor::new(&nan, 2).is_err());
    }

    #[test]
    fn trace_of_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        // AB = [[19,22],[43,50]]
        assert_eq!(trace_prod(&a, &b, 2), 69.0);
    }
}
