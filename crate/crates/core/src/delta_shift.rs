//! Finite laminate that pushes an arbitrary matrix onto `{|det| ≥ δ^d}`.
//!
//! Every signed singular value with `|θ_k| < δ` is split symmetrically into
//! `θ_k ± 2δ`, which moves it out of `(−δ, δ)` on both sides.

use serde::Serialize;
use thiserror::Error;

use crate::laminate::{Laminate, LaminateError, NodeId};
use crate::matrix::Mat;
use crate::report::EstimateReport;
use crate::scalar::Scalar;
use crate::svd::{signed_svd, RotSvd, SvdError, SvdOrdering};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeltaError {
    #[error("delta must be positive and finite, got {0}")]
    NonpositiveDelta(f64),
    #[error("exponent p = {0} must be at least 1")]
    InvalidExponent(f64),
    #[error("build does not belong to the given matrix and delta")]
    MismatchedInputs,
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error(transparent)]
    Laminate(#[from] LaminateError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBuild<T, const D: usize> {
    pub laminate: Laminate<T, D>,
    pub svd: RotSvd<T, D>,
    /// Number of signed singular values with `|θ_k| ≥ δ`.
    pub l: usize,
    pub delta: T,
}

impl<T: Scalar, const D: usize> DeltaBuild<T, D> {
    pub fn atom_count(&self) -> usize {
        1 << (D - self.l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaSummary {
    pub l: usize,
    pub atom_count: usize,
    pub positive_det_atoms: usize,
}

pub fn build_delta_laminate<T: Scalar, const D: usize>(
    m0: &Mat<T, D>,
    delta: T,
) -> Result<DeltaBuild<T, D>, DeltaError> {
    if !(delta > T::zero() && delta.is_finite()) {
        return Err(DeltaError::NonpositiveDelta(delta.as_f64()));
    }
    let svd = signed_svd(m0, SvdOrdering::AbsDescending)?;
    let l = svd.theta.iter().take_while(|t| t.abs() >= delta).count();
    let mut lam = Laminate::dirac(*m0);
    let mut leaves: Vec<NodeId> = vec![Laminate::<T, D>::ROOT];
    let half = T::lit(0.5);
    let amp = T::lit(2.0) * delta;
    for k in l..D {
        let (a, b) = (svd.p.col(k), svd.q.col(k));
        let mut next = Vec::with_capacity(2 * leaves.len());
        for &leaf in &leaves {
            let (lo, hi) = lam.split_leaf(leaf, half, &a, &b, amp, -amp)?;
            next.push(lo);
            next.push(hi);
        }
        leaves = next;
    }
    Ok(DeltaBuild { laminate: lam, svd, l, delta })
}

/// Checks (i)–(v) of the δ-shift estimates.
pub fn verify_delta<T: Scalar, const D: usize>(
    build: &DeltaBuild<T, D>,
    m0: &Mat<T, D>,
    delta: T,
    p: f64,
) -> Result<EstimateReport, DeltaError> {
    if !(p >= 1.0) {
        return Err(DeltaError::InvalidExponent(p));
    }
    if build.laminate.root() != m0 || build.delta != delta {
        return Err(DeltaError::MismatchedInputs);
    }
    let lam = &build.laminate;
    let atoms = lam.atoms();
    let d = D as f64;
    let dl = delta.as_f64();
    let m0_norm = m0.frobenius_norm().as_f64();
    let c_p = (2.0 * d.sqrt()).powf(p);
    let slack = 1e-9;
    let mut rep = EstimateReport::default();

    let bary = (lam.barycenter() - *m0).frobenius_norm().as_f64();
    rep.upper("i_barycenter", bary, 1e-10 * (m0_norm + 2.0 * d.sqrt() * dl), 0.0, "|[nu] - M0|");

    let delta_d = delta.powi(D as i32);
    let eps = T::epsilon() * T::lit(64.0);
    let worst = atoms
        .iter()
        .map(|a| {
            let tol = T::tol(1e-9) * delta_d + eps * (T::one() + a.matrix.frobenius_norm()).powi(D as i32);
            (a.matrix.determinant().abs() + tol).as_f64()
        })
        .fold(f64::INFINITY, f64::min);
    rep.lower("ii_det_floor", worst, delta_d.as_f64(), "min |det A| + tol vs delta^d");
    let positive = atoms.iter().filter(|a| a.matrix.determinant() > T::zero()).count();
    if build.l < D {
        let want = 1usize << (D - build.l - 1);
        rep.push("ii_half_positive", positive as f64, want as f64, positive == want, "atoms with det > 0");
    } else {
        rep.push("ii_half_positive", positive as f64, 1.0, true, "no split: dirac exempt");
    }

    let raw = lam.p_moment(T::lit(p), None).as_f64();
    let raw_bound = 2f64.powf(p - 1.0) * (m0_norm.powf(p) + c_p * dl.powf(p));
    rep.upper("iii_raw_moment", raw, raw_bound, slack, "2^(p-1)(|M0|^p + C_p delta^p)");

    let centered = lam.p_moment(T::lit(p), Some(m0)).as_f64();
    rep.upper("iv_centered_moment", centered, c_p * dl.powf(p), slack, "(2 sqrt d)^p delta^p");

    if m0.determinant().abs() < delta_d {
        let cap = 3.0 * dl * (m0_norm + 2.0 * dl).powi(D as i32 - 1);
        let max_det = atoms.iter().map(|a| a.matrix.determinant().abs().as_f64()).fold(0.0, f64::max);
        rep.push("v_det_ceiling", max_det, cap, max_det < cap, "max |det A| < 3 delta (|M0| + 2 delta)^(d-1)");
    } else {
        rep.push("v_det_ceiling", f64::NAN, f64::NAN, true, "hypothesis |det M0| < delta^d not met");
    }
    Ok(rep)
}

pub fn summarize<T: Scalar, const D: usize>(build: &DeltaBuild<T, D>) -> DeltaSummary {
    DeltaSummary {
        l: build.l,
        atom_count: build.laminate.atoms().len(),
        positive_det_atoms: build.laminate.atoms().iter().filter(|a| a.matrix.determinant() > T::zero()).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type M2 = Mat<f64, 2>;

    #[test]
    fn zero_matrix_unit_delta() {
        let b = build_delta_laminate(&M2::zeros(), 1.0).unwrap();
        assert_eq!(b.l, 0);
        let atoms = b.laminate.atoms();
        assert_eq!(atoms.len(), 4);
        let mut dets: Vec<f64> = atoms.iter().map(|a| a.matrix.determinant()).collect();
        dets.sort_by(f64::total_cmp);
        assert_eq!(dets, vec![-4.0, -4.0, 4.0, 4.0]);
        for a in &atoms {
            assert_eq!(a.weight, 0.25);
            assert!(a.matrix.is_diagonal());
            assert!(a.matrix.diagonal().iter().all(|x| x.abs() == 2.0));
        }
        let rep = verify_delta(&b, &M2::zeros(), 1.0, 2.0).unwrap();
        assert!(rep.all_pass(), "{}", rep.to_csv());
        let iv = rep.get("iv_centered_moment").unwrap();
        assert!((iv.measured - 8.0).abs() < 1e-12 && (iv.bound - 8.0).abs() < 1e-12 && iv.pass);
        let v = rep.get("v_det_ceiling").unwrap();
        assert_eq!((v.measured, v.bound), (4.0, 6.0));
    }

    #[test]
    fn large_singular_values_give_dirac() {
        let m0 = M2::diag([5.0, 5.0]);
        let b = build_delta_laminate(&m0, 1.0).unwrap();
        assert_eq!(b.l, 2);
        assert_eq!(b.laminate, Laminate::dirac(m0));
        assert!(verify_delta(&b, &m0, 1.0, 1.5).unwrap().all_pass());
    }

    #[test]
    fn one_small_singular_value() {
        let m0 = M2::diag([5.0, 0.1]);
        let b = build_delta_laminate(&m0, 1.0).unwrap();
        assert_eq!(b.l, 1);
        let atoms = b.laminate.atoms();
        assert_eq!(atoms.len(), 2);
        let mut dets: Vec<f64> = atoms.iter().map(|a| a.matrix.determinant()).collect();
        dets.sort_by(f64::total_cmp);
        assert!((dets[0] + 9.5).abs() < 1e-12 && (dets[1] - 10.5).abs() < 1e-12);
        assert!(verify_delta(&b, &m0, 1.0, 2.0).unwrap().all_pass());
    }

    #[test]
    fn threshold_counts_as_large() {
        let b = build_delta_laminate(&M2::diag([2.0, 1.0]), 1.0).unwrap();
        assert_eq!(b.l, 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(build_delta_laminate(&M2::zeros(), 0.0).unwrap_err(), DeltaError::NonpositiveDelta(0.0));
        assert!(build_delta_laminate(&M2::zeros(), f64::NAN).is_err());
        let b = build_delta_laminate(&M2::zeros(), 1.0).unwrap();
        assert_eq!(verify_delta(&b, &M2::zeros(), 0.5, 2.0).unwrap_err(), DeltaError::MismatchedInputs);
    }
}
