//! Small dense linear-algebra and quadrature helpers shared by the models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FdaError, Result};

/// Trapezoidal weights for a strictly increasing grid; they sum to `hi - lo`.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    if n < 2 {
        return vec![1.0; n];
    }
    for j in 0..n - 1 {
        let h = grid[j + 1] - grid[j];
        w[j] += h / 2.0;
        w[j + 1] += h / 2.0;
    }
    w
}

/// Trapezoidal integral of `values` sampled on `grid`.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    trapezoid_weights(grid)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}

/// Evenly spaced grid with `n` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Log-spaced grid with `n` points from `lo` to `hi` (both positive).
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n)
        .into_iter()
        .map(f64::exp)
        .collect()
}

const GRID_TOL: f64 = 1e-9;

/// Linear interpolation of `values` on `grid` at `x`. Points outside the grid
/// range (beyond a small tolerance) are an error.
pub fn interpolate(grid: &[f64], values: &[f64], x: f64) -> Result<f64> {
    let n = grid.len();
    if n == 0 {
        return Err(FdaError::InvalidArgument("empty interpolation grid".into()));
    }
    let (lo, hi) = (grid[0], grid[n - 1]);
    let tol = GRID_TOL * (1.0 + (hi - lo).abs());
    if x.is_nan() || x < lo - tol || x > hi + tol {
        return Err(FdaError::Domain { value: x, lo, hi });
    }
    if n == 1 {
        return Ok(values[0]);
    }
    let pos = grid.partition_point(|&g| g <= x);
    if pos == 0 {
        return Ok(values[0]);
    }
    if pos >= n {
        return Ok(values[n - 1]);
    }
    let j = pos - 1;
    if (x - grid[j]).abs() <= tol {
        return Ok(values[j]);
    }
    let w = (x - grid[j]) / (grid[j + 1] - grid[j]);
    Ok(values[j] * (1.0 - w) + values[j + 1] * w)
}

/// Index of the grid point nearest to `x`.
pub fn nearest_index(grid: &[f64], x: f64) -> usize {
    let pos = grid.partition_point(|&g| g < x);
    if pos == 0 {
        0
    } else if pos >= grid.len() {
        grid.len() - 1
    } else if (x - grid[pos - 1]) <= (grid[pos] - x) {
        pos - 1
    } else {
        pos
    }
}

/// Type-7 (linear interpolation) empirical quantile of an ascending slice.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with denominator `n - 1`.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Cholesky factor of a Jacobi-equilibrated symmetric positive definite matrix.
///
/// `A = S⁻¹ (S A S) S⁻¹` with `S = diag(1/sqrt(A_ii))`, so badly scaled
/// columns (raw step counts next to indicators) do not spoil the factorization.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let scale = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let d = a[(i, i)];
                if d > 0.0 && d.is_finite() {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            }),
        );
        let mut scaled = a.clone();
        for j in 0..n {
            for i in 0..n {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        match Cholesky::new(scaled.clone()) {
            Some(chol) => Ok(SpdFactor { chol, scale }),
            None => {
                let eig = scaled.symmetric_eigen();
                let max = eig.eigenvalues.max();
                let min = eig.eigenvalues.min();
                Err(FdaError::Numerical(format!(
                    "penalized normal equations are singular (dimension {n}, \
                     equilibrated eigenvalue range [{min:.3e}, {max:.3e}], condition number {:.3e})",
                    if min > 0.0 { max / min } else { f64::INFINITY }
                )))
            }
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for j in 0..rhs.ncols() {
            for i in 0..rhs.nrows() {
                rhs[(i, j)] *= self.scale[i];
            }
        }
        let mut x = self.chol.solve(&rhs);
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                x[(i, j)] *= self.scale[i];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = b.component_mul(&self.scale);
        self.chol.solve(&rhs).component_mul(&self.scale)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.scale.len();
        self.solve(&DMatrix::identity(n, n))
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let mut s = 0.0;
        for i in 0..self.scale.len() {
            s += 2.0 * l[(i, i)].ln() - 2.0 * self.scale[i].ln();
        }
        s
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
pub fn sorted_sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Pseudo-log-determinant of a symmetric PSD matrix: sum of logs of
/// eigenvalues above `rel_tol * max`.
pub fn log_pdet(m: &DMatrix<f64>, rel_tol: f64) -> f64 {
    let (vals, _) = sorted_sym_eigen(m);
    let max = vals.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0.0;
    }
    vals.iter()
        .filter(|&&v| v > rel_tol * max)
        .map(|v| v.ln())
        .sum()
}
