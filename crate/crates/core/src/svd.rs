//! Rotational ("signed") singular value decomposition `M = P·diag(θ)·Qᵀ`
//! with `P, Q ∈ SO(d)`, computed by two-sided Jacobi sweeps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Mat;
use crate::scalar::Scalar;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SvdError {
    #[error("singular input: neg-first-ascending ordering needs det M < 0 and σ₁ > 0")]
    SingularInput,
    #[error("Jacobi iteration did not reach tolerance after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// Canonical ordering of the signed diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdOrdering {
    /// `θ = (−σ₁, σ₂, …, σ_d)` with `0 < σ₁ ≤ … ≤ σ_d`; needs `det M < 0`.
    NegFirstAscending,
    /// `|θ₁| ≥ … ≥ |θ_d|`, sign carried by the last entry.
    AbsDescending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotSvd<T, const D: usize> {
    pub p: Mat<T, D>,
    pub theta: [T; D],
    pub q: Mat<T, D>,
    pub ordering: SvdOrdering,
}

impl<T: Scalar, const D: usize> RotSvd<T, D> {
    pub fn reconstruct(&self) -> Mat<T, D> {
        self.p * Mat::diag(self.theta) * self.q.transpose()
    }

    /// Unsigned singular values in the stored order.
    pub fn singular_values(&self) -> [T; D] {
        self.theta.map(|t| t.abs())
    }
}

/// `(U, σ, V)` from [`jacobi_svd`].
pub type PlainSvd<T, const D: usize> = (Mat<T, D>, [T; D], Mat<T, D>);

/// Plain Jacobi SVD: returns `(U, σ, V)` with `M = U·diag(σ)·Vᵀ`, `σ ≥ 0`
/// unsorted, `U`, `V` orthogonal (determinant ±1).
pub fn jacobi_svd<T: Scalar, const D: usize>(m: &Mat<T, D>) -> Result<PlainSvd<T, D>, SvdError> {
    let mut a = *m;
    let mut u = Mat::<T, D>::identity();
    let mut v = Mat::<T, D>::identity();
    let norm = m.frobenius_norm();
    if norm == T::zero() {
        return Ok((u, [T::zero(); D], v));
    }
    let tol = T::tol(1e-14) * norm;
    let two = T::lit(2.0);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..D {
            for q in (p + 1)..D {
                let (w, x, y, z) = (a[(p, p)], a[(p, q)], a[(q, p)], a[(q, q)]);
                if x == T::zero() && y == T::zero() {
                    continue;
                }
                // Symmetrize the 2×2 block with G, then diagonalize with J.
                let phi = (y - x).atan2(w + z);
                let (s1, c1) = phi.sin_cos();
                let a11 = c1 * w + s1 * y;
                let b = c1 * x + s1 * z;
                let a22 = -s1 * x + c1 * z;
                let (c2, s2) = if b == T::zero() {
                    (T::one(), T::zero())
                } else {
                    let zeta = (a22 - a11) / (two * b);
                    let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                    let c = T::one() / (T::one() + t * t).sqrt();
                    (c, t * c)
                };
                // U2 = G·J, V2 = J with G = [[c1,-s1],[s1,c1]], J = [[c2,s2],[-s2,c2]].
                let u2 = [[c1 * c2 + s1 * s2, c1 * s2 - s1 * c2], [s1 * c2 - c1 * s2, s1 * s2 + c1 * c2]];
                let v2 = [[c2, s2], [-s2, c2]];
                for k in 0..D {
                    let (ap, aq) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = u2[0][0] * ap + u2[1][0] * aq;
                    a[(q, k)] = u2[0][1] * ap + u2[1][1] * aq;
                }
                for k in 0..D {
                    let (ap, aq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = ap * v2[0][0] + aq * v2[1][0];
                    a[(k, q)] = ap * v2[0][1] + aq * v2[1][1];
                }
                for k in 0..D {
                    let (up, uq) = (u[(k, p)], u[(k, q)]);
                    u[(k, p)] = up * u2[0][0] + uq * u2[1][0];
                    u[(k, q)] = up * u2[0][1] + uq * u2[1][1];
                    let (vp, vq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = vp * v2[0][0] + vq * v2[1][0];
                    v[(k, q)] = vp * v2[0][1] + vq * v2[1][1];
                }
            }
        }
    }
    if !converged && off_diagonal(&a) > tol {
        return Err(SvdError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut sigma = a.diagonal();
    for k in 0..D {
        if sigma[k] < T::zero() {
            sigma[k] = -sigma[k];
            let col = u.col(k).map(|x| -x);
            u.set_col(k, &col);
        }
    }
    Ok((u, sigma, v))
}

fn off_diagonal<T: Scalar, const D: usize>(a: &Mat<T, D>) -> T {
    let mut acc = T::zero();
    for i in 0..D {
        for j in 0..D {
            if i != j {
                acc = acc + a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Signed SVD with special-orthogonal factors in the requested canonical order.
///
/// Reflections are absorbed into the smallest-|θ| entry: `P` is fixed first,
/// then `Q` if it still has determinant −1.
pub fn signed_svd<T: Scalar, const D: usize>(m: &Mat<T, D>, ordering: SvdOrdering) -> Result<RotSvd<T, D>, SvdError> {
    if ordering == SvdOrdering::NegFirstAscending && !(m.determinant() < T::zero()) {
        return Err(SvdError::SingularInput);
    }
    let (u, sigma, v) = jacobi_svd(m)?;

    let mut order: Vec<usize> = (0..D).collect();
    match ordering {
        SvdOrdering::NegFirstAscending => {
            order.sort_by(|&i, &j| sigma[i].partial_cmp(&sigma[j]).unwrap().then(i.cmp(&j)))
        }
        SvdOrdering::AbsDescending => order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j))),
    }
    let mut p = Mat::<T, D>::zeros();
    let mut q = Mat::<T, D>::zeros();
    let mut theta = [T::zero(); D];
    for (dst, &src) in order.iter().enumerate() {
        p.set_col(dst, &u.col(src));
        q.set_col(dst, &v.col(src));
        theta[dst] = sigma[src];
    }

    let smallest = match ordering {
        SvdOrdering::NegFirstAscending => 0,
        SvdOrdering::AbsDescending => D - 1,
    };
    for factor in [&mut p, &mut q] {
        if factor.determinant() < T::zero() {
            let col = factor.col(smallest).map(|x| -x);
            factor.set_col(smallest, &col);
            theta[smallest] = -theta[smallest];
        }
    }

    if ordering == SvdOrdering::NegFirstAscending && !(theta[0] < T::zero()) {
        return Err(SvdError::SingularInput);
    }

    let out = RotSvd { p, theta, q, ordering };
    let scale = m.frobenius_norm();
    if (out.reconstruct() - *m).frobenius_norm() > T::tol(1e-10) * scale {
        return Err(SvdError::NoConvergence { sweeps: MAX_SWEEPS });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    type M2 = Mat<f64, 2>;
    type M3 = Mat<f64, 3>;

    fn assert_rotation<const D: usize>(m: &Mat<f64, D>) {
        assert!(m.is_special_orthogonal(1e-12), "{m:?} is not in SO(d)");
    }

    #[test]
    fn identity_abs_descending() {
        let s = signed_svd(&M3::identity(), SvdOrdering::AbsDescending).unwrap();
        assert_eq!(s.theta, [1.0; 3]);
        assert_eq!(s.p, M3::identity());
        assert_eq!(s.q, M3::identity());
    }

    #[test]
    fn canonical_diagonal_is_fixed_point() {
        let m = M3::diag([-1.0, 2.0, 3.0]);
        let s = signed_svd(&m, SvdOrdering::NegFirstAscending).unwrap();
        assert_eq!(s.theta, [-1.0, 2.0, 3.0]);
        assert!(s.p.max_abs_diff(&M3::identity()) < 1e-15);
        assert!(s.q.max_abs_diff(&M3::identity()) < 1e-15);
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn off_diagonal_negative_determinant() {
        // det = -2, MᵀM = diag(1, 4), so |θ| = (1, 2).
        let m = M2::from_rows([[0.0, 2.0], [1.0, 0.0]]);
        let s = signed_svd(&m, SvdOrdering::NegFirstAscending).unwrap();
        assert!((s.theta[0] + 1.0).abs() < 1e-14 && (s.theta[1] - 2.0).abs() < 1e-14, "{:?}", s.theta);
        assert_rotation(&s.p);
        assert_rotation(&s.q);
        assert!((s.reconstruct() - m).frobenius_norm() <= 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn neg_first_rejects_nonnegative_determinant() {
        // det [[0,-2],[1,0]] = +2
        let m = M2::from_rows([[0.0, -2.0], [1.0, 0.0]]);
        assert_eq!(signed_svd(&m, SvdOrdering::NegFirstAscending), Err(SvdError::SingularInput));
        assert_eq!(signed_svd(&M2::zeros(), SvdOrdering::NegFirstAscending), Err(SvdError::SingularInput));
        let singular = M2::from_rows([[1.0, 2.0], [2.0, 4.0]]);
        assert_eq!(signed_svd(&singular, SvdOrdering::NegFirstAscending), Err(SvdError::SingularInput));
    }

    #[test]
    fn both_reflections_cancel_in_abs_descending() {
        // -I in 2D has det +1; both raw factors may come out as reflections.
        let m = M2::from_rows([[-1.0, 0.0], [0.0, -1.0]]);
        let s = signed_svd(&m, SvdOrdering::AbsDescending).unwrap();
        assert_rotation(&s.p);
        assert_rotation(&s.q);
        assert!(s.theta.iter().product::<f64>() > 0.0);
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-14);
    }

    #[test]
    fn zero_matrix_decomposes_trivially() {
        let s = signed_svd(&Mat::<f64, 4>::zeros(), SvdOrdering::AbsDescending).unwrap();
        assert_eq!(s.theta, [0.0; 4]);
        assert_rotation(&s.p);
    }

    #[test]
    fn f32_decomposition_reconstructs() {
        let m = Mat::<f32, 3>::from_f64_rows([[1.0, 2.0, 0.5], [-0.3, 0.7, 2.0], [1.1, -1.0, 0.2]]);
        let s = signed_svd(&m, SvdOrdering::AbsDescending).unwrap();
        assert!((s.reconstruct() - m).frobenius_norm() < 1e-5 * m.frobenius_norm());
        assert!(s.p.is_special_orthogonal(1e-5));
    }
}
