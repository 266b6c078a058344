//! B-spline bases, difference penalties and tensor-product evaluation.
//!
//! A [`BasisSystem`] is a B-spline basis on `[domain_lo, domain_hi]` with
//! equally spaced knots that continue past the domain ends (the P-spline
//! construction). Evaluation uses the triangular
//! Cox-de Boor scheme restricted to the `degree + 1` functions that are
//! non-zero on a knot span, so a row of the design matrix costs
//! `O(degree^2)` regardless of `num_basis`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};

/// Default number of marginal basis functions for the 24-week intervention period.
pub const DEFAULT_NUM_BASIS_INTERVENTION: usize = 20;
/// Default number of marginal basis functions for the 12-week follow-up period.
pub const DEFAULT_NUM_BASIS_FOLLOW_UP: usize = 7;

/// Serialized form of a basis: `{domain: [lo, hi], num_basis, degree, penalty_order}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisSpec {
    pub domain: [f64; 2],
    pub num_basis: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

fn default_degree() -> usize {
    3
}

fn default_penalty_order() -> usize {
    2
}

/// B-spline basis on equally spaced knots extended beyond the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct BasisSystem {
    domain_lo: f64,
    domain_hi: f64,
    num_basis: usize,
    degree: usize,
    penalty_order: usize,
    knots: Vec<f64>,
}

impl TryFrom<BasisSpec> for BasisSystem {
    type Error = FdaError;

    fn try_from(spec: BasisSpec) -> Result<Self> {
        BasisSystem::new(
            spec.domain[0],
            spec.domain[1],
            spec.num_basis,
            spec.degree,
            spec.penalty_order,
        )
    }
}

impl From<BasisSystem> for BasisSpec {
    fn from(b: BasisSystem) -> Self {
        BasisSpec {
            domain: [b.domain_lo, b.domain_hi],
            num_basis: b.num_basis,
            degree: b.degree,
            penalty_order: b.penalty_order,
        }
    }
}

impl BasisSystem {
    pub fn new(
        domain_lo: f64,
        domain_hi: f64,
        num_basis: usize,
        degree: usize,
        penalty_order: usize,
    ) -> Result<Self> {
        if !(domain_lo.is_finite() && domain_hi.is_finite()) || domain_lo >= domain_hi {
            return Err(FdaError::InvalidArgument(format!(
                "basis domain [{domain_lo}, {domain_hi}] must be finite with lo < hi"
            )));
        }
        if num_basis < degree + 1 {
            return Err(FdaError::InvalidArgument(format!(
                "num_basis ({num_basis}) must be at least degree + 1 ({})",
                degree + 1
            )));
        }
        if penalty_order == 0 || penalty_order >= num_basis {
            return Err(FdaError::InvalidArgument(format!(
                "penalty order ({penalty_order}) must be positive and below num_basis ({num_basis})"
            )));
        }
        // Equally spaced knots continued past both ends of the domain, so a
        // coefficient sequence linear in its index is a linear function of t.
        let interior = num_basis - degree - 1;
        let spans = (interior + 1) as f64;
        let h = (domain_hi - domain_lo) / spans;
        let knots: Vec<f64> = (-(degree as i64)..=(interior + 1 + degree) as i64)
            .map(|j| {
                if j == 0 {
                    domain_lo
                } else if j == interior as i64 + 1 {
                    domain_hi
                } else {
                    domain_lo + h * j as f64
                }
            })
            .collect();
        Ok(BasisSystem {
            domain_lo,
            domain_hi,
            num_basis,
            degree,
            penalty_order,
            knots,
        })
    }

    /// Cubic basis with second-order penalty.
    pub fn cubic(domain_lo: f64, domain_hi: f64, num_basis: usize) -> Result<Self> {
        Self::new(domain_lo, domain_hi, num_basis, 3, 2)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn penalty_order(&self) -> usize {
        self.penalty_order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spec(&self) -> BasisSpec {
        self.clone().into()
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if t.is_nan() || t < self.domain_lo || t > self.domain_hi {
            return Err(FdaError::Domain {
                value: t,
                lo: self.domain_lo,
                hi: self.domain_hi,
            });
        }
        Ok(())
    }

    /// Index of the knot span containing `t`; the right endpoint belongs to the last span.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.num_basis - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[p..=last+1] is strictly increasing
        let slice = &self.knots[p..=last + 1];
        let pos = slice.partition_point(|&k| k <= t);
        p + pos - 1
    }

    /// Non-zero basis values at `t`: returns the index of the first non-zero
    /// function and the `degree + 1` values starting there.
    pub fn evaluate_local(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        self.check_domain(t)?;
        let p = self.degree;
        let mu = self.span(t);
        let k = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - k[mu + 1 - j];
            right[j] = k[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = n[r] / denom;
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((mu - p, n))
    }

    /// Dense basis row at `t`.
    pub fn evaluate_point(&self, t: f64) -> Result<Vec<f64>> {
        let (first, vals) = self.evaluate_local(t)?;
        let mut row = vec![0.0; self.num_basis];
        row[first..first + vals.len()].copy_from_slice(&vals);
        Ok(row)
    }

    /// Design matrix with row `r` holding `B_l(t_r)`.
    pub fn evaluate(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(t.len(), self.num_basis);
        for (r, &tr) in t.iter().enumerate() {
            let (first, vals) = self.evaluate_local(tr)?;
            for (j, v) in vals.into_iter().enumerate() {
                out[(r, first + j)] = v;
            }
        }
        Ok(out)
    }

    /// Difference penalty of this basis' configured order.
    pub fn penalty(&self) -> PenaltyMatrix {
        difference_penalty(self.num_basis, self.penalty_order)
            .expect("order < num_basis is a construction invariant")
    }

    /// Evaluates `sum_l coef[l] * B_l(t)` at each point.
    pub fn evaluate_function(&self, coef: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        if coef.len() != self.num_basis {
            return Err(FdaError::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                self.num_basis,
                coef.len()
            )));
        }
        t.iter()
            .map(|&x| {
                let (first, vals) = self.evaluate_local(x)?;
                Ok(vals
                    .iter()
                    .zip(&coef[first..])
                    .map(|(b, c)| b * c)
                    .sum())
            })
            .collect()
    }
}

/// Convenience wrapper matching the free-function form of basis evaluation.
pub fn evaluate_basis(basis: &BasisSystem, t: &[f64]) -> Result<DMatrix<f64>> {
    basis.evaluate(t)
}

/// Difference operator `D` with `(dim - order)` rows; `D b` holds the
/// `order`-th forward differences of `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    dim: usize,
    order: usize,
    d: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// `DᵀD`, the quadratic form of the penalty.
    pub fn gram(&self) -> DMatrix<f64> {
        self.d.transpose() * &self.d
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for r in 0..self.d.nrows() {
            let row: Vec<String> = (0..self.dim).map(|c| format!("{}", self.d[(r, c)])).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Builds the `order`-th difference matrix for `num_basis` coefficients.
///
/// Row `i` holds `(-1)^(order - j) * C(order, j)` at column `i + j`, so first
/// differences read `[-1, 1]` and second differences `[1, -2, 1]`.
pub fn difference_penalty(num_basis: usize, order: usize) -> Result<PenaltyMatrix> {
    if order == 0 || order >= num_basis {
        return Err(FdaError::InvalidArgument(format!(
            "difference order ({order}) must be positive and below num_basis ({num_basis})"
        )));
    }
    let coeffs: Vec<f64> = (0..=order)
        .map(|j| {
            let sign = if (order - j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * binomial(order, j)
        })
        .collect();
    let rows = num_basis - order;
    let mut d = DMatrix::zeros(rows, num_basis);
    for i in 0..rows {
        for (j, c) in coeffs.iter().enumerate() {
            d[(i, i + j)] = *c;
        }
    }
    Ok(PenaltyMatrix {
        dim: num_basis,
        order,
        d,
    })
}

/// Tensor-product basis vector at `(t, u)`, flattened row-major so entry
/// `k1 * K2 + k2` holds `B_k1(t) * B_k2(u)`.
pub fn tensor_basis(basis_t: &BasisSystem, basis_u: &BasisSystem, t: f64, u: f64) -> Result<Vec<f64>> {
    let bt = basis_t.evaluate_point(t)?;
    let bu = basis_u.evaluate_point(u)?;
    Ok(kron_vec(&bt, &bu))
}

/// Row-major outer product `a ⊗ b` flattened.
pub fn kron_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|&y| x * y));
    }
    out
}

/// Kronecker product of two dense matrices.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Plain recursive Cox-de Boor with the 0/0 = 0 convention; the right
    /// endpoint is assigned to the last non-degenerate span.
    fn de_boor_oracle(knots: &[f64], i: usize, p: usize, t: f64, hi: f64) -> f64 {
        if p == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            let inside = if t == hi { a < b && b == hi } else { a <= t && t < b };
            return if inside { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * de_boor_oracle(knots, i, p - 1, t, hi);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * de_boor_oracle(knots, i + 1, p - 1, t, hi);
        }
        v
    }

    #[test]
    fn degree_zero_is_an_indicator() {
        let b = BasisSystem::new(0.0, 1.0, 2, 0, 1).unwrap();
        let row = b.evaluate_point(0.25).unwrap();
        assert_eq!(row, vec![1.0, 0.0]);
        assert_eq!(b.evaluate_point(1.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn matches_recursive_oracle() {
        let b = BasisSystem::cubic(0.0, 1.0, 10).unwrap();
        let t: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let m = b.evaluate(&t).unwrap();
        for (r, &tr) in t.iter().enumerate() {
            for l in 0..10 {
                let o = de_boor_oracle(b.knots(), l, 3, tr, 1.0);
                assert_abs_diff_eq!(m[(r, l)], o, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn knot_count_and_domain_error() {
        let b = BasisSystem::cubic(1.0, 24.0, 20).unwrap();
        assert_eq!(b.knots().len(), 20 + 3 + 1);
        assert!(b.knots().windows(2).all(|w| w[0] <= w[1]));
        let inner = &b.knots()[4..b.knots().len() - 4];
        assert!(inner.iter().all(|&k| k > 1.0 && k < 24.0));
        match b.evaluate(&[0.5]) {
            Err(FdaError::Domain { value, .. }) => assert_eq!(value, 0.5),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn difference_matrices() {
        let d = difference_penalty(4, 2).unwrap();
        let expect = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
        assert_eq!(d.matrix(), &expect);
        let d1 = difference_penalty(3, 1).unwrap();
        let expect1 = DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]);
        assert_eq!(d1.matrix(), &expect1);
        for order in 1..6 {
            let d = difference_penalty(9, order).unwrap();
            let ones = nalgebra::DVector::from_element(9, 1.0);
            assert!((d.matrix() * ones).amax() < 1e-12);
        }
        assert!(matches!(
            difference_penalty(3, 3),
            Err(FdaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn penalty_null_space_dimension() {
        for order in 1..4 {
            let g = difference_penalty(10, order).unwrap().gram();
            let eig = g.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-12));
            let small = eig.eigenvalues.iter().filter(|&&v| v < 1e-10).count();
            assert_eq!(small, order);
        }
    }

    #[test]
    fn tensor_degree_zero_single_one() {
        let bt = BasisSystem::new(0.0, 1.0, 3, 0, 1).unwrap();
        let bu = BasisSystem::new(0.0, 2.0, 4, 0, 1).unwrap();
        let v = tensor_basis(&bt, &bu, 0.5, 1.7).unwrap();
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 11);
        assert_eq!(v[4 + 3], 1.0);
    }

    #[test]
    fn tensor_matches_marginal_oracle() {
        use rand::{Rng, SeedableRng};
        let bt = BasisSystem::cubic(1.0, 24.0, 8).unwrap();
        let bu = BasisSystem::cubic(25.0, 36.0, 6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = rng.random_range(1.0..=24.0);
            let u = rng.random_range(25.0..=36.0);
            let v = tensor_basis(&bt, &bu, t, u).unwrap();
            let mut sum = 0.0;
            for k1 in 0..8 {
                for k2 in 0..6 {
                    let o = de_boor_oracle(bt.knots(), k1, 3, t, 24.0)
                        * de_boor_oracle(bu.knots(), k2, 3, u, 36.0);
                    assert_abs_diff_eq!(v[k1 * 6 + k2], o, epsilon = 1e-12);
                    sum += v[k1 * 6 + k2];
                }
            }
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_coefficients_give_linear_function() {
        let b = BasisSystem::cubic(1.0, 24.0, 20).unwrap();
        let coef: Vec<f64> = (0..20).map(|l| 0.5 - 0.25 * l as f64).collect();
        let t: Vec<f64> = (0..47).map(|i| 1.0 + 0.5 * i as f64).collect();
        let f = b.evaluate_function(&coef, &t).unwrap();
        let slope = (f[1] - f[0]) / (t[1] - t[0]);
        for (fi, ti) in f.iter().zip(&t) {
            assert_abs_diff_eq!(*fi, f[0] + slope * (ti - t[0]), epsilon = 1e-12);
        }
    }

    #[test]
    fn json_round_trip() {
        let b = BasisSystem::new(25.0, 36.0, 7, 3, 2).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"domain":[25.0,36.0],"num_basis":7,"degree":3,"penalty_order":2}"#);
        let back: BasisSystem = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BasisSystem>(r#"{"domain":[1,0],"num_basis":7}"#).is_err());
    }

    #[test]
    fn penalty_csv() {
        let mut buf = Vec::new();
        difference_penalty(3, 1).unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "-1,1,0\n0,-1,1\n");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_of_unity_and_local_support(
                degree in 0usize..5,
                extra in 0usize..12,
                frac in 0.0f64..=1.0,
            ) {
                let nb = degree + 1 + extra;
                let order = 1.min(nb - 1).max(1);
                prop_assume!(order < nb);
                let b = BasisSystem::new(-2.0, 3.0, nb, degree, order).unwrap();
                let t = -2.0 + 5.0 * frac;
                let row = b.evaluate_point(t).unwrap();
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let k = b.knots();
                for (l, &v) in row.iter().enumerate() {
                    if t < k[l] || t > k[l + degree + 1] {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}
