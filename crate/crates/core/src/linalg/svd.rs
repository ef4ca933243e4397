//! Thin singular value decomposition by one-sided Jacobi rotations.
//!
//! The working matrix is orthogonalized column pair by column pair
//! (Hestenes' method, implicitly diagonalizing `GᵀG`). When all column
//! pairs are orthogonal the column norms are the singular values, the
//! normalized columns are `U`, and the accumulated rotations are `V`.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{invalid, Error, Result};

/// Maximum number of full sweeps over all column pairs.
pub const MAX_SWEEPS: usize = 30;

/// Relative orthogonality threshold for a column pair, `|⟨w_i,w_j⟩| ≤ tol·‖w_i‖‖w_j‖`.
const PAIR_TOL: f64 = 1e-12;

/// σ is treated as zero when `σ ≤ ZERO_REL · σ_1`.
pub const ZERO_REL: f64 = 1e-12;
/// Absolute zero floor used when every singular value vanishes.
pub const ZERO_ABS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// n×q, orthonormal columns.
    pub u: Matrix,
    /// Length q, descending, nonnegative.
    pub sigma: Vec<f64>,
    /// m×q, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(σ) · Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v).expect("factor shapes conform")
    }
}

/// Threshold below which a singular value counts as zero, given the largest one.
pub fn zero_threshold(sigma_max: f64) -> f64 {
    if sigma_max > 0.0 {
        ZERO_REL * sigma_max
    } else {
        ZERO_ABS
    }
}

pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if m.is_empty() {
        return Err(invalid("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(invalid(format!(
            "svd input {}x{} contains non-finite entries",
            m.rows(),
            m.cols()
        )));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        let mut f = SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut f);
        Ok(f)
    }
}

/// Requires rows ≥ cols.
fn jacobi_tall(m: &Matrix) -> Result<SvdFactors> {
    let (n, q) = m.shape();
    // Column-major working copies.
    let mut w: Vec<Vec<f64>> = (0..q).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = q < 2;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let (a, b, c) = pair_stats(&w[i], &w[j]);
                if c == 0.0 || c.abs() <= PAIR_TOL * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * c);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(&mut w, i, j, cs, sn);
                rotate(&mut v, i, j, cs, sn);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "svd of {}x{} matrix did not converge within {MAX_SWEEPS} sweeps",
            m.rows(),
            m.cols()
        )));
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let tol = zero_threshold(sigma[0]);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut pending = Vec::new();
    for (pos, &k) in order.iter().enumerate() {
        if sigma[pos] > tol {
            u_cols.push(w[k].iter().map(|x| x / sigma[pos]).collect());
        } else {
            u_cols.push(vec![0.0; n]);
            pending.push(pos);
        }
    }
    complete_basis(&mut u_cols, &pending);

    let u = Matrix::from_fn(n, q, |r, c| u_cols[c][r]);
    let vm = Matrix::from_fn(q, q, |r, c| v[order[c]][r]);
    let mut f = SvdFactors { u, sigma, v: vm };
    fix_signs(&mut f);
    Ok(f)
}

#[inline]
fn pair_stats(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for (p, q) in x.iter().zip(y) {
        a += p * p;
        b += q * q;
        c += p * q;
    }
    (a, b, c)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, cs: f64, sn: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (p, q) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let x = *p;
        let y = *q;
        *p = cs * x - sn * y;
        *q = sn * x + cs * y;
    }
}

/// Fills the `pending` columns with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let n = cols[0].len();
    let mut done: Vec<usize> = (0..cols.len()).filter(|k| !pending.contains(k)).collect();
    let mut candidate = 0;
    for &p in pending {
        loop {
            assert!(candidate < n, "basis completion ran out of candidates");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for &k in &done {
                    let proj: f64 = e.iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                    for (x, y) in e.iter_mut().zip(&cols[k]) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[p] = e.into_iter().map(|x| x / norm).collect();
                done.push(p);
                break;
            }
        }
    }
}

/// Makes the first non-negligible entry of each U column nonnegative.
fn fix_signs(f: &mut SvdFactors) {
    for c in 0..f.u.cols() {
        let lead = (0..f.u.rows())
            .map(|r| f.u[(r, c)])
            .find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for r in 0..f.u.rows() {
                f.u[(r, c)] = -f.u[(r, c)];
            }
            for r in 0..f.v.rows() {
                f.v[(r, c)] = -f.v[(r, c)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_gram_deviation(m: &Matrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_its_own_factorization() {
        let f = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(f.u, Matrix::identity(3));
        assert_eq!(f.v, Matrix::identity(3));
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let f = svd(&Matrix::diag(&[1.0, -5.0, 2.0])).unwrap();
        assert_eq!(f.sigma, vec![5.0, 2.0, 1.0]);
        let rec = f.reconstruct();
        assert!(rec.sub(&Matrix::diag(&[1.0, -5.0, 2.0])).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn golden_ratio_pair() {
        let g = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let f = svd(&g).unwrap();
        let s5 = 5f64.sqrt();
        let expect = [((3.0 + s5) / 2.0).sqrt(), ((3.0 - s5) / 2.0).sqrt()];
        assert!((f.sigma[0] - expect[0]).abs() < 1e-14);
        assert!((f.sigma[1] - expect[1]).abs() < 1e-14);
        assert!((f.sigma[0] - 1.618).abs() < 1e-3 && (f.sigma[1] - 0.618).abs() < 1e-3);
    }

    #[test]
    fn wide_and_rank_deficient() {
        // rank 1, 2x4
        let g = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]]).unwrap();
        let f = svd(&g).unwrap();
        assert_eq!(f.u.shape(), (2, 2));
        assert_eq!(f.v.shape(), (4, 2));
        assert!(f.sigma[1] <= 1e-12 * f.sigma[0]);
        assert!(max_gram_deviation(&f.u) < 1e-12);
        assert!(max_gram_deviation(&f.v) < 1e-12);
        assert!(f.reconstruct().sub(&g).unwrap().frobenius_norm() < 1e-12 * g.frobenius_norm());
    }

    #[test]
    fn zero_matrix_gets_orthonormal_factors() {
        let f = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(f.sigma, vec![0.0; 3]);
        assert!(max_gram_deviation(&f.u) < 1e-15);
        assert!(max_gram_deviation(&f.v) < 1e-15);
    }

    #[test]
    fn sign_convention_is_applied() {
        let g = Matrix::from_rows(&[vec![-2.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let f = svd(&g).unwrap();
        for c in 0..2 {
            let lead = f.u.col(c).into_iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(lead > 0.0);
        }
        assert!(f.reconstruct().sub(&g).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(Error::InvalidInput(_))));
        let nan = Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(svd(&nan), Err(Error::InvalidInput(_))));
        let inf = Matrix::from_rows(&[vec![f64::INFINITY]]).unwrap();
        assert!(matches!(svd(&inf), Err(Error::InvalidInput(_))));
    }
}
