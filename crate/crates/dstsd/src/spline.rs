//! Spatial anomaly basis: cubic B-spline columns over the cable (clamped
//! uniform knots) with an identity fallback, plus the small dense Cholesky
//! solver used for least-squares projections onto the basis.

use crate::{Error, Result};

/// (p x m) anomaly basis with a cached Cholesky factor of B^T B.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    pub p: usize,
    pub m: usize,
    /// Row-major p x m.
    pub matrix: Vec<f64>,
    /// Lower Cholesky factor of B^T B, row-major m x m.
    chol: Vec<f64>,
    identity: bool,
}

const DEGREE: usize = 3;

/// Cox-de Boor evaluation of B-spline j of degree k on `knots` at x. The
/// final knot is treated as included in the last non-empty interval so that
/// the partition of unity holds at the right endpoint.
fn cox_de_boor(knots: &[f64], j: usize, k: usize, x: f64) -> f64 {
    if k == 0 {
        let last = *knots.last().unwrap();
        let in_half_open = knots[j] <= x && x < knots[j + 1];
        let at_end = x >= last && knots[j] < knots[j + 1] && knots[j + 1] >= last;
        return if in_half_open || at_end { 1.0 } else { 0.0 };
    }
    let mut acc = 0.0;
    let d1 = knots[j + k] - knots[j];
    if d1 > 0.0 {
        acc += (x - knots[j]) / d1 * cox_de_boor(knots, j, k - 1, x);
    }
    let d2 = knots[j + k + 1] - knots[j + 1];
    if d2 > 0.0 {
        acc += (knots[j + k + 1] - x) / d2 * cox_de_boor(knots, j + 1, k - 1, x);
    }
    acc
}

/// Clamped knot vector: 4 repeats at each end, m-4 interior knots uniform
/// over (0, p-1).
fn clamped_knots(p: usize, m: usize) -> Vec<f64> {
    let hi = (p - 1) as f64;
    let n_interior = m - DEGREE - 1;
    let mut knots = vec![0.0; DEGREE + 1];
    for i in 1..=n_interior {
        knots.push(hi * i as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
    knots
}

/// In-place dense Cholesky of a symmetric positive definite row-major
/// matrix; returns the lower factor.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical(
                        "basis Gram matrix is not positive definite".into(),
                    ));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve L L^T x = b for the lower factor L.
pub fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

impl SplineBasis {
    /// Cubic B-spline columns on clamped uniform knots over [0, p-1],
    /// evaluated at the integer cells.
    pub fn new(p: usize, m: usize) -> Result<Self> {
        if m < 4 || m > p {
            return Err(Error::InvalidArgument(format!(
                "spline basis needs 4 <= m <= p, got m={m}, p={p}"
            )));
        }
        let knots = clamped_knots(p, m);
        let mut matrix = vec![0.0; p * m];
        for s in 0..p {
            for j in 0..m {
                matrix[s * m + j] = cox_de_boor(&knots, j, DEGREE, s as f64);
            }
        }
        Self::from_matrix(p, m, matrix, false)
    }

    /// Identity basis B_a = I.
    pub fn identity(p: usize) -> Self {
        let mut matrix = vec![0.0; p * p];
        for s in 0..p {
            matrix[s * p + s] = 1.0;
        }
        let chol = matrix.clone();
        SplineBasis {
            p,
            m: p,
            matrix,
            chol,
            identity: true,
        }
    }

    /// Default knot pitch of 5 cells (m = p/5), clamped into the valid range.
    pub fn default_for(p: usize) -> Result<Self> {
        let m = (p / 5).clamp(4, p);
        SplineBasis::new(p, m)
    }

    /// Arbitrary full-column-rank basis from explicit columns (row-major
    /// p x m); used for oracle tests with random bases.
    pub fn from_columns(p: usize, m: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != p * m {
            return Err(Error::ShapeMismatch(format!(
                "basis storage {} != {} x {}",
                matrix.len(),
                p,
                m
            )));
        }
        Self::from_matrix(p, m, matrix, false)
    }

    fn from_matrix(p: usize, m: usize, matrix: Vec<f64>, identity: bool) -> Result<Self> {
        let mut gram = vec![0.0; m * m];
        for s in 0..p {
            let row = &matrix[s * m..(s + 1) * m];
            for i in 0..m {
                for j in 0..m {
                    gram[i * m + j] += row[i] * row[j];
                }
            }
        }
        let chol = cholesky(&gram, m)?;
        Ok(SplineBasis {
            p,
            m,
            matrix,
            chol,
            identity,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// B theta.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(theta.len(), self.m);
        if self.identity {
            return theta.to_vec();
        }
        (0..self.p)
            .map(|s| {
                self.matrix[s * self.m..(s + 1) * self.m]
                    .iter()
                    .zip(theta)
                    .map(|(b, t)| b * t)
                    .sum()
            })
            .collect()
    }

    /// B^T r.
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        debug_assert_eq!(r.len(), self.p);
        if self.identity {
            return r.to_vec();
        }
        let mut out = vec![0.0; self.m];
        for (s, &rs) in r.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(&self.matrix[s * self.m..(s + 1) * self.m]) {
                *o += rs * b;
            }
        }
        out
    }

    /// Largest eigenvalue of B^T B by power iteration; bounds the gradient
    /// Lipschitz constant of quadratic losses in the coefficients.
    pub fn gram_lambda_max(&self) -> f64 {
        if self.identity {
            return 1.0;
        }
        let m = self.m;
        let mut v = vec![1.0 / (m as f64).sqrt(); m];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let bv = self.apply(&v);
            let mut w = self.apply_transpose(&bv);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for x in &mut w {
                *x /= norm;
            }
            lambda = norm;
            v = w;
        }
        lambda
    }

    /// Least-squares coefficients argmin_theta ||r - B theta||^2.
    pub fn project(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.p {
            return Err(Error::ShapeMismatch(format!(
                "project: residual length {} vs basis rows {}",
                r.len(),
                self.p
            )));
        }
        if self.identity {
            return Ok(r.to_vec());
        }
        Ok(chol_solve(&self.chol, self.m, &self.apply_transpose(r)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_fallback() {
        let b = SplineBasis::identity(5);
        assert!(b.is_identity());
        let theta = [1.0, -2.0, 0.0, 3.0, 0.5];
        assert_eq!(b.apply(&theta), theta.to_vec());
        assert_eq!(b.project(&theta).unwrap(), theta.to_vec());
    }

    #[test]
    fn partition_of_unity() {
        let b = SplineBasis::new(100, 20).unwrap();
        for s in 0..100 {
            let row_sum: f64 = b.matrix[s * 20..(s + 1) * 20].iter().sum();
            assert!(
                (row_sum - 1.0).abs() < 1e-9,
                "row {s} sums to {row_sum}"
            );
        }
    }

    #[test]
    fn columns_nonnegative_with_mass() {
        let b = SplineBasis::new(60, 12).unwrap();
        for j in 0..12 {
            let col: Vec<f64> = (0..60).map(|s| b.matrix[s * 12 + j]).collect();
            assert!(col.iter().all(|&v| v >= -1e-15));
            assert!(col.iter().sum::<f64>() > 0.0, "column {j} has no mass");
        }
    }

    #[test]
    fn rejects_out_of_range_m() {
        assert!(SplineBasis::new(10, 3).is_err());
        assert!(SplineBasis::new(10, 11).is_err());
    }

    /// Independent oracle: on a single clamped cubic segment the first
    /// basis function is (1 - u)^3 and the Bernstein polynomials follow.
    #[test]
    fn clamped_segment_matches_bernstein() {
        // m = 4 means no interior knots: the basis is exactly the cubic
        // Bernstein polynomials over [0, p-1].
        let p = 11;
        let b = SplineBasis::new(p, 4).unwrap();
        for s in 0..p {
            let u = s as f64 / (p - 1) as f64;
            let bern = [
                (1.0 - u).powi(3),
                3.0 * u * (1.0 - u) * (1.0 - u),
                3.0 * u * u * (1.0 - u),
                u * u * u,
            ];
            for j in 0..4 {
                assert!(
                    (b.matrix[s * 4 + j] - bern[j]).abs() < 1e-12,
                    "cell {s} column {j}"
                );
            }
        }
    }

    #[test]
    fn projection_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = SplineBasis::new(40, 9).unwrap();
        let r: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta = b.project(&r).unwrap();
        // optimality: B^T (r - B theta) = 0
        let fit = b.apply(&theta);
        let resid: Vec<f64> = r.iter().zip(&fit).map(|(a, c)| a - c).collect();
        let grad = b.apply_transpose(&resid);
        assert!(grad.iter().all(|g| g.abs() < 1e-9));
        // exact recovery of something already in the span
        let theta0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = b.apply(&theta0);
        let back = b.project(&y).unwrap();
        for (a, c) in theta0.iter().zip(&back) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_solver_oracle() {
        // A = L0 L0^T with a known lower factor
        let l0 = [2.0, 0.0, 0.0, 1.0, 3.0, 0.0, -1.0, 0.5, 1.5];
        let n = 3;
        let mut a = vec![0.0; 9];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    a[i * n + j] += l0[i * n + k] * l0[j * n + k];
                }
            }
        }
        let l = cholesky(&a, n).unwrap();
        for (got, want) in l.iter().zip(&l0) {
            assert!((got - want).abs() < 1e-12);
        }
        let x_true = [1.0, -2.0, 0.5];
        let mut b = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                b[i] += a[i * n + j] * x_true[j];
            }
        }
        let x = chol_solve(&l, n, &b);
        for (got, want) in x.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3 and -1
        assert!(cholesky(&a, 2).is_err());
    }
}
