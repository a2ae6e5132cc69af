//! Small dense linear-algebra helpers shared by the model and the oracles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CgpdsError, Result};

/// Relative jitter added to every Gram matrix before factorization.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// A symmetric positive-definite matrix together with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct Factored {
    /// The matrix including jitter.
    pub matrix: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
    /// Relative jitter (`jitter / scale`).
    pub rel_jitter: f64,
}

impl Factored {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        log_det_lower(&self.chol.l())
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Adds `1e-8 * scale` to the diagonal and factorizes, escalating the jitter by
/// decades up to `1e-4 * scale` if the factorization fails.
pub fn factor_with_jitter(k: &DMatrix<f64>, scale: f64, label: &str) -> Result<Factored> {
    let mut rel = BASE_JITTER;
    loop {
        let jitter = rel * scale;
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            if chol.l().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Factored {
                    matrix: m,
                    chol,
                    jitter,
                    rel_jitter: rel,
                });
            }
        }
        if rel >= MAX_JITTER {
            return Err(CgpdsError::Conditioning {
                kernel: label.to_string(),
                jitter,
            });
        }
        rel *= 10.0;
    }
}

/// `log|L Lᵀ|` from a lower-triangular factor.
pub fn log_det_lower(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Frobenius inner product `Σ_ij a_ij b_ij`.
pub fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Zeroes the strict upper triangle.
pub fn lower_triangle(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        for j in (i + 1)..out.ncols() {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Symmetrizes `m` in place as `(m + mᵀ) / 2`.
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

/// Converts nested row vectors into a matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != c) {
        return Err(CgpdsError::shape("ragged rows"));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Squared Euclidean distances between all row pairs, upper triangle only.
pub fn pairwise_distances(points: &DMatrix<f64>) -> Vec<f64> {
    let n = points.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((points.row(i) - points.row(j)).norm());
        }
    }
    out
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_escalates_on_singular_matrix() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let f = factor_with_jitter(&k, 1.0, "test").unwrap();
        assert!(f.rel_jitter >= BASE_JITTER);
        let rebuilt = f.l() * f.l().transpose();
        assert!((rebuilt - &f.matrix).amax() < 1e-12);
    }

    #[test]
    fn negative_definite_matrix_fails() {
        let k = -DMatrix::<f64>::identity(2, 2);
        assert!(matches!(
            factor_with_jitter(&k, 1.0, "neg"),
            Err(CgpdsError::Conditioning { .. })
        ));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
