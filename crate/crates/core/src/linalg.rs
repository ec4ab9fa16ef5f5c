//! Dense linear-algebra helpers shared by the kernel, bound and predictive code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{LvaeError, Result};

/// First jitter tried when a factorization fails, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of a symmetric positive definite matrix, possibly jittered.
#[derive(Clone, Debug)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Factor {
    /// Factorizes `m`, escalating a diagonal jitter from `1e-8` to `1e-4` times
    /// the mean diagonal (×10 per attempt) when the plain factorization fails.
    pub fn new(m: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        let mut owned = m.clone();
        Self::new_in_place(&mut owned, what)
    }

    /// Same as [`Factor::new`], but leaves `m` holding the jittered matrix that
    /// was actually factorized.
    pub fn new_in_place(m: &mut DMatrix<f64>, what: &'static str) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(LvaeError::Shape(format!(
                "{what}: expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(LvaeError::NonFinite(what.to_string()));
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            if chol_is_sound(&chol) {
                return Ok(Factor { chol, jitter: 0.0 });
            }
        }
        let n = m.nrows().max(1);
        let mean_diag = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut rel = JITTER_START;
        let mut applied = 0.0;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * base;
            for i in 0..m.nrows() {
                m[(i, i)] += jitter - applied;
            }
            applied = jitter;
            if let Some(chol) = Cholesky::new(m.clone()) {
                if chol_is_sound(&chol) {
                    log::debug!("{what}: factorized with jitter {jitter:e}");
                    return Ok(Factor { chol, jitter });
                }
            }
            rel *= 10.0;
        }
        Err(LvaeError::NotPositiveDefinite {
            what,
            jitter: applied,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

fn chol_is_sound(chol: &Cholesky<f64, Dyn>) -> bool {
    chol.l_dirty()
        .diagonal()
        .iter()
        .all(|d| d.is_finite() && *d > 0.0)
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Frobenius inner product `Σᵢⱼ AᵢⱼBᵢⱼ`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_plain_and_logdet() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = Factor::new(&m, "test").unwrap();
        assert_eq!(f.jitter(), 0.0);
        assert!((f.logdet() - 8.0f64.ln()).abs() < 1e-12);
        let inv = f.inverse();
        let id = &m * &inv;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let mut m = DMatrix::from_element(3, 3, 1.0);
        let f = Factor::new_in_place(&mut m, "ones").unwrap();
        assert!(f.jitter() >= 1e-8 && f.jitter() <= 1e-4);
        assert!((m[(0, 0)] - 1.0 - f.jitter()).abs() < 1e-15);
    }

    #[test]
    fn indefinite_matrix_fails_after_max_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match Factor::new(&m, "indefinite") {
            Err(LvaeError::NotPositiveDefinite { jitter, .. }) => {
                assert!((jitter - 1e-4).abs() < 1e-10)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trace_helpers() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        assert!((trace_of_product(&a, &b) - (&a * &b).trace()).abs() < 1e-12);
        assert!((frobenius_dot(&a, &a) - a.norm_squared()).abs() < 1e-12);
    }
}
