//! Dense Cholesky factorization and triangular solves.
//!
//! Covariances in this crate are small (d in the tens), so everything is a
//! straightforward row-major loop over `ndarray` storage. No explicit matrix
//! inverse is ever formed: quadratic forms go through a forward solve
//! against the lower factor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix. Only the lower triangle of `a` is read.
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "cholesky: matrix must be square",
                expected: n,
                actual: a.ncols(),
            });
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * y[k];
            }
            y[i] = s / self.lower[[i, i]];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        let mut x = y.to_owned();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[[k, i]] * x[k];
            }
            x[i] = s / self.lower[[i, i]];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let y = self.solve_lower(b);
        self.solve_upper(y.view())
    }

    /// `vᵀ A⁻¹ v`, computed as `‖L⁻¹ v‖²`.
    pub fn quad_form(&self, v: ArrayView1<'_, f64>) -> f64 {
        let y = self.solve_lower(v);
        y.dot(&y)
    }

    /// `ln det A = 2 Σ ln L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.lower.dot(&self.lower.t())
    }
}

/// Replaces `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

pub fn frobenius_norm(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn trace(a: ArrayView2<'_, f64>) -> f64 {
    a.diag().sum()
}

/// Factorizes `a`, adding a growing multiple of the identity on failure.
///
/// The first retry adds `1e-6 · trace(a)/d · I` (or `1e-6 · I` when the trace
/// vanishes) and each further retry doubles it, for at most 8 retries.
/// Returns the factor together with the matrix that was actually factored.
pub fn factor_with_jitter(a: &Array2<f64>) -> Result<(Cholesky, Array2<f64>)> {
    const MAX_ATTEMPTS: usize = 8;
    let first_err = match Cholesky::factor(a.view()) {
        Ok(c) => return Ok((c, a.clone())),
        Err(e) => e,
    };
    let d = a.nrows();
    let mean_diag = trace(a.view()) / d as f64;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut eps = 1e-6 * scale;
    for _ in 0..MAX_ATTEMPTS {
        let mut jittered = a.clone();
        for i in 0..d {
            jittered[[i, i]] += eps;
        }
        if let Ok(c) = Cholesky::factor(jittered.view()) {
            return Ok((c, jittered));
        }
        eps *= 2.0;
    }
    Err(first_err)
}
