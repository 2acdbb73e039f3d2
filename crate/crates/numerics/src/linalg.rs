//! Symmetric positive definite solves via LDLᵀ (square-root-free Cholesky).
//!
//! Inverses are never formed explicitly; every `A⁻¹B` in the editors goes
//! through [`Cholesky::solve`].

use crate::error::{dim_err, NumericsError, Result};
use crate::tensor::Tensor;

/// Square-root-free factorization `A = L·D·Lᵀ` with unit lower-triangular
/// `L` and positive diagonal `D`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `a`. Only the lower triangle is read.
    pub fn factor(a: &Tensor) -> Result<Self> {
        let (n, c) = a.dims2()?;
        if n != c {
            return Err(dim_err("cholesky", format!("matrix is {n}x{c}, not square")));
        }
        let src = a.data();
        let mut l = vec![0.0; n * n];
        let mut d = vec![0.0; n];
        for j in 0..n {
            let mut dj = src[j * n + j];
            for k in 0..j {
                dj -= l[j * n + k] * l[j * n + k] * d[k];
            }
            if dj <= 0.0 || !dj.is_finite() {
                return Err(NumericsError::NotPositiveDefinite { pivot: j, value: dj });
            }
            d[j] = dj;
            l[j * n + j] = 1.0;
            for i in (j + 1)..n {
                let mut s = src[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k] * d[k];
                }
                l[i * n + j] = s / dj;
            }
        }
        Ok(Self { n, lower: l, diag: d })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Pivots of `D`.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Solves `A x = b` in place for one right-hand side.
    pub fn solve_vec_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let l = &self.lower;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s;
        }
        for i in 0..n {
            b[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s;
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(dim_err(
                "cholesky solve",
                format!("rhs has {} rows, system has {}", b.len(), self.n),
            ));
        }
        let mut x = b.to_vec();
        self.solve_vec_in_place(&mut x);
        Ok(x)
    }

    /// Solves `A X = B` for an `n × m` right-hand side.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let (rows, m) = b.dims2()?;
        if rows != self.n {
            return Err(dim_err(
                "cholesky solve",
                format!("rhs has {rows} rows, system has {}", self.n),
            ));
        }
        let mut out = Tensor::zeros(&[rows, m]);
        let mut col = vec![0.0; rows];
        for j in 0..m {
            for i in 0..rows {
                col[i] = b.at(i, j);
            }
            self.solve_vec_in_place(&mut col);
            for i in 0..rows {
                out.set(i, j, col[i]);
            }
        }
        Ok(out)
    }
}

/// Returns `X` with `A·X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Cholesky::factor(a)?.solve(b)
}

/// Max absolute deviation from symmetry, scaled by the largest entry.
pub fn asymmetry(a: &Tensor) -> f64 {
    let n = a.rows();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    worst / scale
}
