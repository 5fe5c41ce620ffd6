//! Small dense linear-algebra helpers: spectral functions of symmetric
//! matrices, a block-tridiagonal solver and Gauss-Legendre rules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Applies `f` to the spectrum of a symmetric matrix: `Q f(L) Q^T`.
pub fn sym_func(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut fl = DMatrix::zeros(d, d);
    for i in 0..d {
        fl[(i, i)] = f(eig.eigenvalues[i]);
    }
    &eig.eigenvectors * fl * eig.eigenvectors.transpose()
}

/// Square root of a symmetric positive-definite matrix.
pub fn spd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_func(a, f64::sqrt)
}

/// Eigenvalue range (min, max) of a symmetric matrix.
pub fn sym_eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = a.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Symmetrizes a nearly symmetric matrix in place: `(A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let at = a.transpose();
    *a += at;
    *a *= 0.5;
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
pub struct SymEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

pub fn sym_eigen(a: &DMatrix<f64>) -> SymEigen {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut vectors = DMatrix::zeros(d, d);
    let mut values = DVector::zeros(d);
    for (k, &i) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[i];
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    SymEigen { vectors, values }
}

/// Block-tridiagonal system with square blocks of uniform size.
///
/// Row `i` reads `lower[i-1] x_{i-1} + diag[i] x_i + upper[i] x_{i+1} = rhs_i`
/// with `lower` and `upper` one block shorter than `diag`.
pub struct BlockTridiag {
    pub lower: Vec<DMatrix<f64>>,
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiag {
    /// Solves the system for a block right-hand side, consuming the blocks.
    /// Each `rhs[i]` may have any number of columns (shared across rows).
    pub fn solve(mut self, mut rhs: Vec<DMatrix<f64>>) -> Result<Vec<DMatrix<f64>>> {
        let n = self.diag.len();
        assert_eq!(rhs.len(), n, "rhs rows must match diagonal blocks");
        assert_eq!(self.lower.len() + 1, n.max(1));
        assert_eq!(self.upper.len() + 1, n.max(1));

        // Forward elimination: diag[i] <- W_i factor, upper[i] <- W_i^{-1} upper[i].
        for i in 0..n {
            if i > 0 {
                let (head, tail) = rhs.split_at_mut(i);
                tail[0] -= &self.lower[i - 1] * &head[i - 1];
                let coupled = &self.lower[i - 1] * &self.upper[i - 1];
                self.diag[i] -= coupled;
            }
            let lu = self.diag[i].clone().lu();
            if i + 1 < n {
                let solved = lu.solve(&self.upper[i]).ok_or_else(|| Error::DegenerateHessian {
                    detail: format!("singular pivot block at row {i} of block-tridiagonal solve"),
                })?;
                self.upper[i] = solved;
            }
            let solved = lu.solve(&rhs[i]).ok_or_else(|| Error::DegenerateHessian {
                detail: format!("singular pivot block at row {i} of block-tridiagonal solve"),
            })?;
            rhs[i] = solved;
        }

        // Back substitution.
        for i in (0..n.saturating_sub(1)).rev() {
            let (head, tail) = rhs.split_at_mut(i + 1);
            let update = &self.upper[i] * &tail[0];
            head[i] -= update;
        }
        Ok(rhs)
    }
}

/// Gauss-Legendre nodes and weights on `[a, b]`.
///
/// Nodes are found by Newton iteration on the Legendre polynomial with the
/// usual Chebyshev-based initial guesses; exact for polynomials of degree
/// `2 n - 1`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Initial guess for the i-th root of P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    // Map [-1, 1] to [a, b].
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    for i in 0..n {
        nodes[i] = mid + half * nodes[i];
        weights[i] *= half;
    }
    (nodes, weights)
}

/// Legendre polynomial `P_n(x)` and its derivative via the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
