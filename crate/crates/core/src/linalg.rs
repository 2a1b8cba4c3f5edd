//! Dense Cholesky factorisation and triangular solves.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    pub l: Array2<f64>,
    pub jitter: f64,
}

/// In-place-free Cholesky of a symmetric matrix; `None` if not positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Cholesky with diagonal jitter escalation. `ladder` values are multiplied by
/// `scale` (typically the kernel amplitude) before being added.
pub fn cholesky_with_jitter(a: &Array2<f64>, ladder: &[f64], scale: f64) -> Result<Cholesky> {
    if let Some(l) = cholesky(a) {
        return Ok(Cholesky { l, jitter: 0.0 });
    }
    for &j in ladder {
        let jitter = j * scale;
        let mut b = a.clone();
        b.diag_mut().mapv_inplace(|d| d + jitter);
        if let Some(l) = cholesky(&b) {
            return Ok(Cholesky { l, jitter });
        }
    }
    Err(Error::IllConditioned { max_jitter: ladder.last().copied().unwrap_or(0.0) * scale })
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_transposed(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

impl Cholesky {
    /// `(L Lᵀ)⁻¹ b`.
    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        solve_upper_transposed(&self.l, &solve_lower(&self.l, b))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.ln()).sum::<f64>()
    }
}
