use serde::{Deserialize, Serialize};

use super::svd::{zero_threshold, SvdFactors};
use super::Matrix;
use crate::error::{invalid, Result};

/// Orthonormality tolerance for projection factors.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub r: usize,
    /// Cumulative explained variance `e_r` (0 when r = 0).
    pub explained: f64,
    pub gamma: f64,
}

/// Cumulative explained variance `e_k = Σ_{j≤k} σ_j² / Σ σ_i²` for k = 1..=q.
///
/// Empty when every σ is zero.
pub fn explained_variance(sigma: &[f64]) -> Vec<f64> {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Vec::new();
    }
    let mut acc = 0.0;
    sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect()
}

/// Smallest k whose explained variance reaches `gamma`.
///
/// `gamma = 1` keeps exactly the singular values above the zero tolerance,
/// and an all-zero spectrum selects nothing.
pub fn select_rank(sigma: &[f64], gamma: f64) -> Result<RankSelection> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    for (i, &s) in sigma.iter().enumerate() {
        if !s.is_finite() || s < 0.0 {
            return Err(invalid(format!("sigma[{i}] = {s} is not a nonnegative finite value")));
        }
        if i > 0 && s > sigma[i - 1] {
            return Err(invalid(format!("sigma not descending at index {i}")));
        }
    }
    let e = explained_variance(sigma);
    if e.is_empty() {
        return Ok(RankSelection { r: 0, explained: 0.0, gamma });
    }
    let r = if gamma == 1.0 {
        let tol = zero_threshold(sigma[0]);
        sigma.iter().take_while(|&&s| s > tol).count()
    } else if gamma == 0.0 {
        0
    } else {
        e.iter().position(|&ek| ek >= gamma).map_or(e.len(), |k| k + 1)
    };
    let explained = if r == 0 { 0.0 } else { e[r - 1] };
    Ok(RankSelection { r, explained, gamma })
}

/// Leading `r` singular triplets.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let q = f.sigma.len();
    if r > q {
        return Err(invalid(format!("truncation rank {r} exceeds {q}")));
    }
    Ok((f.u.leading_cols(r), f.sigma[..r].to_vec(), f.v.leading_cols(r)))
}

pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frobenius_inner")?;
    Ok(super::matrix::dot(a.as_slice(), b.as_slice()))
}

/// Removes from `g` its component along `a`: `g − (⟨g,a⟩/‖a‖²)·a`.
///
/// A zero `a` leaves `g` unchanged.
pub fn perp_project(g: &Matrix, a: &Matrix) -> Result<Matrix> {
    let ga = frobenius_inner(g, a)?;
    let aa = frobenius_inner(a, a)?;
    if aa == 0.0 {
        log::warn!("degenerate base: zero weight matrix, gradient left unprojected");
        return Ok(g.clone());
    }
    let mut out = g.clone();
    out.axpy(-ga / aa, a)?;
    Ok(out)
}

/// Orthogonal projection `A[AᵀXB]Bᵀ` onto `{A·M·Bᵀ : M ∈ ℝ^{r×r}}`.
pub fn subspace_project(x: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != x.rows() || b.rows() != x.cols() || a.cols() != b.cols() {
        return Err(invalid(format!(
            "subspace_project shapes: x {}x{}, a {}x{}, b {}x{}",
            x.rows(),
            x.cols(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    check_orthonormal(a, "a")?;
    check_orthonormal(b, "b")?;
    if a.cols() == 0 {
        return Ok(Matrix::zeros(x.rows(), x.cols()));
    }
    let core = a.t_matmul(x)?.matmul(b)?;
    a.matmul(&core)?.matmul_t(b)
}

pub fn check_orthonormal(m: &Matrix, name: &str) -> Result<()> {
    let dev = orthonormality_error(m);
    if dev > ORTHONORMAL_TOL {
        return Err(invalid(format!(
            "{name} columns not orthonormal (Gram deviation {dev:.3e})"
        )));
    }
    Ok(())
}

/// `max |MᵀM − I|`
pub fn orthonormality_error(m: &Matrix) -> f64 {
    let g = m.t_matmul(m).expect("same matrix");
    let mut dev: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((g[(i, j)] - target).abs());
        }
    }
    dev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rank_from_hand_computed_ratios() {
        let sel = select_rank(&[3.0, 2.0, 1.0], 0.9).unwrap();
        assert_eq!(sel.r, 2);
        assert!((sel.explained - 13.0 / 14.0).abs() < 1e-15);
        assert_eq!(select_rank(&[5.0, 0.0, 0.0], 0.5).unwrap().r, 1);
        assert_eq!(select_rank(&[3.0, 2.0, 1.0], 1.0).unwrap().r, 3);
        // e_1 = 9/14 exactly on the boundary
        assert_eq!(select_rank(&[3.0, 2.0, 1.0], 9.0 / 14.0).unwrap().r, 1);
    }

    #[test]
    fn rank_edges() {
        assert_eq!(select_rank(&[0.0, 0.0], 0.9).unwrap().r, 0);
        assert_eq!(select_rank(&[3.0, 2.0, 1.0], 0.0).unwrap().r, 0);
        assert_eq!(select_rank(&[], 0.5).unwrap().r, 0);
        // tiny tail below tolerance is dropped at gamma = 1
        assert_eq!(select_rank(&[1.0, 1e-14, 0.0], 1.0).unwrap().r, 1);
    }

    #[test]
    fn rank_rejects_invalid_sigma() {
        assert!(select_rank(&[1.0, 2.0], 0.5).is_err());
        assert!(select_rank(&[1.0, -0.5], 0.5).is_err());
        assert!(select_rank(&[f64::NAN], 0.5).is_err());
        assert!(select_rank(&[1.0], 1.5).is_err());
    }

    #[test]
    fn truncation() {
        let f = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        let (u, s, v) = truncate(&f, 3).unwrap();
        assert_eq!((u, s, v), (f.u.clone(), f.sigma.clone(), f.v.clone()));
        let (u, s, v) = truncate(&f, 1).unwrap();
        let rec = u.scale(s[0]).matmul_t(&v).unwrap();
        assert_eq!(rec, Matrix::diag(&[3.0, 0.0, 0.0]));
        let (u, s, v) = truncate(&f, 0).unwrap();
        assert_eq!((u.cols(), s.len(), v.cols()), (0, 0, 0));
        assert!(truncate(&f, 4).is_err());
    }

    #[test]
    fn inner_products() {
        let i2 = Matrix::identity(2);
        assert_eq!(frobenius_inner(&i2, &i2).unwrap(), 2.0);
        assert_eq!(frobenius_inner(&i2, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert_eq!(frobenius_inner(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &i2).unwrap(), 5.0);
        assert!(frobenius_inner(&i2, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn perpendicular_projection_cases() {
        let a = m(&[&[2.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(perp_project(&a, &a).unwrap(), Matrix::zeros(2, 2));
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let g = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(perp_project(&g, &a).unwrap(), g);
        let g = m(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(perp_project(&g, &a).unwrap(), m(&[&[0.0, 1.0], &[0.0, 0.0]]));
        // degenerate base leaves g alone
        assert_eq!(perp_project(&g, &Matrix::zeros(2, 2)).unwrap(), g);
    }

    #[test]
    fn subspace_projection_fixed_point_and_empty() {
        let f = svd(&m(&[&[4.0, 1.0, 0.0], &[1.0, 3.0, 1.0], &[0.0, 1.0, 2.0]])).unwrap();
        let (u, _, v) = truncate(&f, 2).unwrap();
        let inner = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let x = u.matmul(&inner).unwrap().matmul_t(&v).unwrap();
        let p = subspace_project(&x, &u, &v).unwrap();
        assert!(p.sub(&x).unwrap().max_abs() < 1e-14);

        let (u0, _, v0) = truncate(&f, 0).unwrap();
        assert_eq!(subspace_project(&x, &u0, &v0).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn subspace_projection_rejects_non_orthonormal() {
        let a = m(&[&[2.0], &[0.0]]);
        let b = m(&[&[1.0], &[0.0]]);
        assert!(subspace_project(&Matrix::identity(2), &a, &b).is_err());
    }
}
