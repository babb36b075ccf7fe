//! Recursive two-step rank-one splitting that moves the mass of a
//! negative-determinant matrix onto the zero-determinant set.
//!
//! Each level takes every bad (det < 0) leaf `N = P·diag(−σ₁, σ₂, …)·Qᵀ` and
//! splits it into four quarter-weight atoms `N ± γ(Pe₁)⊗(Qe₂) ± γ(Pe₂)⊗(Qe₁)`
//! with `γ = √(σ₁σ₂)`. The two mixed-sign atoms have zero determinant; the
//! other two have twice the determinant of `N` and are split again.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::laminate::{det_sign, AtomLabel, Laminate, LaminateError, NodeId};
use crate::matrix::Mat;
use crate::report::EstimateReport;
use crate::scalar::{pairwise_sum, Scalar};
use crate::svd::{signed_svd, SvdError, SvdOrdering};

/// Below this |det| the singular-value product is at the floating point floor.
pub const DET_FLOOR: f64 = 1e-280;
pub const MAX_LEVELS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZeroDetError {
    #[error("matrix is not in canonical form diag(−σ₁, σ₂ ≤ … ≤ σ_d) with 0 < σ₁ ≤ σ₂")]
    BadForm,
    #[error("det M0 = {0:e} is not negative")]
    NotNegativeDet(f64),
    #[error("level count must be in 1..={MAX_LEVELS}, got {0}")]
    InvalidLevels(usize),
    #[error("exponent p = {p} must satisfy 1 ≤ p < d = {d}")]
    InvalidExponent { p: f64, d: usize },
    #[error("build does not belong to the given matrix")]
    MismatchedInputs,
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error(transparent)]
    Laminate(#[from] LaminateError),
}

/// Exponent-dependent constants of the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeomParams {
    pub p: f64,
    pub d: usize,
    /// `2^{p/d − 1}`
    pub r: f64,
    pub j_max: usize,
}

impl GeomParams {
    pub fn new(p: f64, d: usize, j_max: usize) -> Self {
        let r = if p == d as f64 { 1.0 } else { 2f64.powf(p / d as f64 - 1.0) };
        Self { p, d, r, j_max }
    }

    /// `[√2/(2^{1/d}−1)]^p · [1/(1−r) + r^j]`; infinite when `p ≥ d`.
    pub fn c_geom(&self) -> f64 {
        if self.r >= 1.0 {
            return f64::INFINITY;
        }
        let k = std::f64::consts::SQRT_2 / (2f64.powf(1.0 / self.d as f64) - 1.0);
        k.powf(self.p) * (1.0 / (1.0 - self.r) + self.r.powi(self.j_max as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelRecord {
    pub level: usize,
    pub good_atom_count: usize,
    pub bad_atom_count: usize,
    pub bad_det_min: f64,
    pub bad_det_max: f64,
    pub max_step_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroDetBuild<T, const D: usize> {
    pub laminate: Laminate<T, D>,
    pub per_level: Vec<LevelRecord>,
    /// Requested level count.
    pub levels: usize,
    /// Set when recursion stopped early at the determinant floor.
    pub truncated: bool,
}

impl<T: Scalar, const D: usize> ZeroDetBuild<T, D> {
    pub fn completed_levels(&self) -> usize {
        self.per_level.len()
    }
}

fn is_canonical<T: Scalar, const D: usize>(m: &Mat<T, D>) -> bool {
    if D < 2 || !m.is_diagonal() {
        return false;
    }
    let d = m.diagonal();
    d[0] < T::zero() && -d[0] <= d[1] && (1..D).all(|k| d[k] > T::zero()) && (2..D).all(|k| d[k - 1] <= d[k])
}

/// Splits `diag(−σ₁, σ₂, …)` into two zero-determinant matrices with mean `M0`.
/// The pair differs in two diagonal entries, so it is not rank-one connected.
pub fn naive_split<T: Scalar, const D: usize>(m0: &Mat<T, D>) -> Result<(Mat<T, D>, Mat<T, D>), ZeroDetError> {
    if !is_canonical(m0) {
        return Err(ZeroDetError::BadForm);
    }
    let two = T::lit(2.0);
    let mut m1 = *m0;
    let mut m2 = *m0;
    m1[(0, 0)] = T::zero();
    m1[(1, 1)] = two * m0[(1, 1)];
    m2[(0, 0)] = two * m0[(0, 0)];
    m2[(1, 1)] = T::zero();
    Ok((m1, m2))
}

/// One four-way split of a canonical diagonal matrix, in the order B1, G1, G2, B2.
pub fn decompose_step<T: Scalar, const D: usize>(
    d0: &Mat<T, D>,
) -> Result<[(T, Mat<T, D>, AtomLabel); 4], ZeroDetError> {
    if !is_canonical(d0) {
        return Err(ZeroDetError::BadForm);
    }
    let gamma = (-d0[(0, 0)] * d0[(1, 1)]).sqrt();
    let e1 = Mat::<T, D>::basis(0);
    let e2 = Mat::<T, D>::basis(1);
    let x = Mat::outer(&e1, &e2).scale(gamma);
    let y = Mat::outer(&e2, &e1).scale(gamma);
    let q = T::lit(0.25);
    Ok([
        (q, *d0 + x + y, AtomLabel::Bad),
        (q, *d0 + x - y, AtomLabel::Good),
        (q, *d0 - x + y, AtomLabel::Good),
        (q, *d0 - x - y, AtomLabel::Bad),
    ])
}

/// Builds `ν_j` by `j` levels of four-way splitting.
pub fn build_zero_det_laminate<T: Scalar, const D: usize>(
    m0: &Mat<T, D>,
    levels: usize,
) -> Result<ZeroDetBuild<T, D>, ZeroDetError> {
    if levels == 0 || levels > MAX_LEVELS {
        return Err(ZeroDetError::InvalidLevels(levels));
    }
    let det0 = m0.determinant();
    if !(det0 < T::zero()) {
        return Err(ZeroDetError::NotNegativeDet(det0.as_f64()));
    }
    let mut lam = Laminate::dirac(*m0);
    lam.set_label(Laminate::<T, D>::ROOT, AtomLabel::Bad)?;
    let mut bad: Vec<NodeId> = vec![Laminate::<T, D>::ROOT];
    let mut per_level = Vec::with_capacity(levels);
    let mut truncated = false;
    let half = T::lit(0.5);

    for level in 1..=levels {
        let mats: Vec<Mat<T, D>> = bad.iter().map(|&id| *lam.node(id).expect("bad leaf").matrix()).collect();
        if mats.iter().any(|m| m.determinant().abs() < T::lit(DET_FLOOR)) {
            truncated = true;
            break;
        }
        let svds =
            mats.par_iter().map(|m| signed_svd(m, SvdOrdering::NegFirstAscending)).collect::<Result<Vec<_>, _>>()?;

        let mut next = Vec::with_capacity(2 * bad.len());
        let mut max_step = T::zero();
        for ((&leaf, svd), parent) in bad.iter().zip(&svds).zip(&mats) {
            let gamma = (-svd.theta[0] * svd.theta[1]).sqrt();
            let (pe1, pe2) = (svd.p.col(0), svd.p.col(1));
            let (qe1, qe2) = (svd.q.col(0), svd.q.col(1));
            let (plus, minus) = lam.split_leaf(leaf, half, &pe1, &qe2, gamma, -gamma)?;
            let (b1, g1) = lam.split_leaf(plus, half, &pe2, &qe1, gamma, -gamma)?;
            let (g2, b2) = lam.split_leaf(minus, half, &pe2, &qe1, gamma, -gamma)?;
            for (id, label) in
                [(b1, AtomLabel::Bad), (g1, AtomLabel::Good), (g2, AtomLabel::Good), (b2, AtomLabel::Bad)]
            {
                lam.set_label(id, label)?;
                let step = (*lam.node(id).expect("new leaf").matrix() - *parent).frobenius_norm();
                max_step = max_step.max(step);
            }
            next.push(b1);
            next.push(b2);
        }
        let dets: Vec<f64> =
            next.iter().map(|&id| lam.node(id).expect("bad leaf").matrix().determinant().abs().as_f64()).collect();
        per_level.push(LevelRecord {
            level,
            good_atom_count: next.len(),
            bad_atom_count: next.len(),
            bad_det_min: dets.iter().copied().fold(f64::INFINITY, f64::min),
            bad_det_max: dets.iter().copied().fold(0.0, f64::max),
            max_step_distance: max_step.as_f64(),
        });
        bad = next;
    }
    Ok(ZeroDetBuild { laminate: lam, per_level, levels, truncated })
}

/// Checks (a)–(e) of the construction's estimates for exponent `1 ≤ p < d`.
pub fn verify_geometry<T: Scalar, const D: usize>(
    build: &ZeroDetBuild<T, D>,
    m0: &Mat<T, D>,
    p: f64,
) -> Result<EstimateReport, ZeroDetError> {
    if !(p >= 1.0 && p < D as f64) {
        return Err(ZeroDetError::InvalidExponent { p, d: D });
    }
    let lam = &build.laminate;
    if lam.root() != m0 {
        return Err(ZeroDetError::MismatchedInputs);
    }
    let j = build.completed_levels();
    let params = GeomParams::new(p, D, j);
    let c_geom = params.c_geom();
    let det_scale = m0.determinant().abs().as_f64().powf(p / D as f64);
    let m0_norm = m0.frobenius_norm().as_f64();
    let pt = T::lit(p);
    let atoms = lam.atoms();
    let slack = 1e-9;
    let mut rep = EstimateReport::default();

    let bary_res = (lam.barycenter() - *m0).frobenius_norm().as_f64();
    rep.upper("a_barycenter", bary_res, 1e-10 * m0_norm, 0.0, "|[nu_j] - M0|");

    let good_det = atoms
        .iter()
        .filter(|a| a.label == AtomLabel::Good)
        .map(|a| (a.matrix.determinant().abs() / (T::one() + a.matrix.frobenius_norm()).powi(D as i32)).as_f64())
        .fold(0.0, f64::max);
    rep.upper("b_good_det", good_det, 1e-9, 0.0, "max |det A|/(1+|A|)^d over good atoms");
    let bad_mass = lam.label_mass(AtomLabel::Bad).as_f64();
    let expected = 0.5f64.powi(j as i32);
    rep.push("b_bad_mass", bad_mass, expected, bad_mass == expected, format!("2^-{j}"));

    let centered = lam.p_moment(pt, Some(m0)).as_f64();
    rep.upper("c_centered_moment", centered, c_geom * det_scale, slack, "C_geom |det M0|^(p/d)");
    let raw = lam.p_moment(pt, None).as_f64();
    let raw_bound = 2f64.powf(p) * c_geom * det_scale + 2f64.powf(p) * m0_norm.powf(p);
    rep.upper("d_raw_moment", raw, raw_bound, slack, "2^p C_geom |det M0|^(p/d) + 2^p |M0|^p");

    let q = T::lit(p / D as f64);
    let neg: Vec<T> = atoms
        .iter()
        .filter(|a| det_sign(&a.matrix) == std::cmp::Ordering::Less)
        .map(|a| a.weight * a.matrix.determinant().abs().powf(q))
        .collect();
    let neg_moment = pairwise_sum(&neg).as_f64();
    let series: f64 = (1..=j).map(|i| params.r.powi(i as i32)).sum();
    rep.upper("e_neg_det_moment", neg_moment, det_scale * series, slack, "|det M0|^(p/d) sum_{i<=j} r^i");
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub p: f64,
    pub j: usize,
    pub moment_centered: f64,
    pub increment: f64,
    pub det_integral: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Centered p-moments of `ν_j` over a grid of exponents and levels.
///
/// For `p < d` each row checks the moment against `C_geom·|det M0|^{p/d}`.
/// For `p = d` the bound column is half the first increment and each row
/// checks that the increment stays above it.
pub fn rigidity_scan<T: Scalar, const D: usize>(
    m0: &Mat<T, D>,
    p_grid: &[f64],
    j_grid: &[usize],
) -> Result<Vec<ScanRow>, ZeroDetError> {
    let det0 = m0.determinant();
    if !(det0 < T::zero()) {
        return Err(ZeroDetError::NotNegativeDet(det0.as_f64()));
    }
    for &p in p_grid {
        if !(p >= 1.0 && p <= D as f64) {
            return Err(ZeroDetError::InvalidExponent { p, d: D });
        }
    }
    let mut js: Vec<usize> = j_grid.to_vec();
    js.sort_unstable();
    js.dedup();
    let Some(&j_top) = js.last() else { return Ok(Vec::new()) };
    let builds = (1..=j_top).into_par_iter().map(|j| build_zero_det_laminate(m0, j)).collect::<Result<Vec<_>, _>>()?;
    let det_scale = det0.abs().as_f64();

    let mut rows = Vec::new();
    for &p in p_grid {
        let pt = T::lit(p);
        let moments: Vec<f64> =
            std::iter::once(0.0).chain(builds.iter().map(|b| b.laminate.p_moment(pt, Some(m0)).as_f64())).collect();
        let mut first_inc = None;
        for &j in &js {
            let inc = moments[j] - moments[j - 1];
            let det_integral = builds[j - 1].laminate.energy(&crate::laminate::Integrand::Det).as_f64();
            let (bound, pass) = if p < D as f64 {
                let b = GeomParams::new(p, D, j).c_geom() * det_scale.powf(p / D as f64);
                (b, moments[j] <= b * (1.0 + 1e-9))
            } else {
                let first = *first_inc.get_or_insert(inc);
                (0.5 * first, inc >= 0.5 * first)
            };
            rows.push(ScanRow { p, j, moment_centered: moments[j], increment: inc, det_integral, bound, pass });
        }
    }
    Ok(rows)
}

pub fn scan_to_csv(rows: &[ScanRow]) -> String {
    let mut out = String::from("p,j,moment_centered,increment,det_integral,bound,pass\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{},{:?},{:?},{:?},{:?},{}\n",
            r.p, r.j, r.moment_centered, r.increment, r.det_integral, r.bound, r.pass
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laminate::Integrand;

    type M2 = Mat<f64, 2>;
    type M3 = Mat<f64, 3>;

    #[test]
    fn naive_split_example() {
        let (m1, m2) = naive_split(&M3::diag([-1.0, 2.0, 3.0])).unwrap();
        assert_eq!(m1, M3::diag([0.0, 4.0, 3.0]));
        assert_eq!(m2, M3::diag([-2.0, 0.0, 3.0]));
        assert_eq!(m1.determinant(), 0.0);
        assert_eq!(m2.determinant(), 0.0);
        assert_eq!(naive_split(&M3::diag([1.0, 2.0, 3.0])), Err(ZeroDetError::BadForm));
        assert_eq!(naive_split(&M3::diag([-1.0, 3.0, 2.0])), Err(ZeroDetError::BadForm));
    }

    #[test]
    fn decompose_reflection() {
        let atoms = decompose_step(&M2::diag([-1.0, 1.0])).unwrap();
        let expect = [
            [[-1.0, 1.0], [1.0, 1.0]],
            [[-1.0, 1.0], [-1.0, 1.0]],
            [[-1.0, -1.0], [1.0, 1.0]],
            [[-1.0, -1.0], [-1.0, 1.0]],
        ];
        let dets = [-2.0, 0.0, 0.0, -2.0];
        for (k, (w, m, _)) in atoms.iter().enumerate() {
            assert_eq!(*w, 0.25);
            assert_eq!(*m, M2::from_rows(expect[k]));
            assert_eq!(m.determinant(), dets[k]);
        }
    }

    #[test]
    fn decompose_three_dimensional() {
        let d0 = M3::diag([-1.0, 2.0, 3.0]);
        let atoms = decompose_step(&d0).unwrap();
        for (_, m, label) in atoms {
            assert!(((m - d0).frobenius_norm() - 2.0).abs() < 1e-14);
            match label {
                AtomLabel::Bad => assert!((m.determinant() + 12.0).abs() < 1e-12),
                _ => assert!(m.determinant().abs() < 1e-12),
            }
        }
    }

    #[test]
    fn level_one_matches_decompose_step() {
        let m0 = M2::diag([-1.0, 1.0]);
        let b = build_zero_det_laminate(&m0, 1).unwrap();
        let atoms = b.laminate.atoms();
        let step = decompose_step(&m0).unwrap();
        assert_eq!(atoms.len(), 4);
        for (a, (w, m, l)) in atoms.iter().zip(step) {
            assert_eq!(a.weight, w);
            assert!(a.matrix.max_abs_diff(&m) < 1e-15);
            assert_eq!(a.label, l);
        }
        assert_eq!(b.laminate.label_mass(AtomLabel::Bad), 0.5);
        assert!(b.laminate.validate_hm().pass);
    }

    #[test]
    fn level_three_reflection() {
        let m0 = M2::diag([-1.0, 1.0]);
        let b = build_zero_det_laminate(&m0, 3).unwrap();
        let stats = b.laminate.statistics(1.5, 1.0);
        assert_eq!(stats.mass_det_neg, 0.125);
        for a in b.laminate.atoms().iter().filter(|a| a.label == AtomLabel::Good) {
            assert!(a.matrix.determinant().abs() <= 1e-9 * (1.0 + a.matrix.frobenius_norm()).powi(2));
        }
        for (i, rec) in b.per_level.iter().enumerate() {
            let want = 2f64.powi(i as i32 + 1);
            assert!((rec.bad_det_min - want).abs() < 1e-9 * want && (rec.bad_det_max - want).abs() < 1e-9 * want);
        }
        assert!((b.laminate.energy(&Integrand::Det) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(build_zero_det_laminate(&M2::identity(), 2), Err(ZeroDetError::NotNegativeDet(_))));
        assert!(matches!(build_zero_det_laminate(&M2::diag([-1.0, 1.0]), 0), Err(ZeroDetError::InvalidLevels(0))));
    }

    #[test]
    fn geometry_report_reflection() {
        let m0 = M2::diag([-1.0, 1.0]);
        let b = build_zero_det_laminate(&m0, 6).unwrap();
        let rep = verify_geometry(&b, &m0, 1.5).unwrap();
        assert!(rep.all_pass(), "{}", rep.to_csv());
        assert!(verify_geometry(&b, &M2::diag([-1.0, 2.0]), 1.5) == Err(ZeroDetError::MismatchedInputs));
        assert!(matches!(verify_geometry(&b, &m0, 2.0), Err(ZeroDetError::InvalidExponent { .. })));
    }

    #[test]
    fn moment_scales_homogeneously() {
        let m0 = M2::from_rows([[0.3, 1.2], [0.9, -0.4]]);
        let b1 = build_zero_det_laminate(&m0, 5).unwrap();
        let b2 = build_zero_det_laminate(&m0.scale(2.0), 5).unwrap();
        let p = 1.5;
        let m1 = b1.laminate.p_moment(p, Some(&m0));
        let m2 = b2.laminate.p_moment(p, Some(&m0.scale(2.0)));
        assert!((m2 / m1 - 2f64.powf(p)).abs() < 1e-12);
    }

    #[test]
    fn critical_exponent_increments_are_constant() {
        let rows = rigidity_scan(&M2::diag([-1.0, 1.0]), &[2.0], &[1, 2, 3, 4, 5]).unwrap();
        for r in &rows {
            assert!((r.increment - 2.0).abs() < 1e-10, "{r:?}");
            assert!((r.det_integral + 1.0).abs() < 1e-12);
            assert!(r.pass);
        }
    }

    #[test]
    fn geom_params() {
        let g = GeomParams::new(1.5, 2, 6);
        assert!((g.r - 2f64.powf(-0.25)).abs() < 1e-16);
        assert!(g.r >= 2f64.powf(-0.5) && g.r < 1.0);
        assert_eq!(GeomParams::new(2.0, 2, 1).r, 1.0);
        assert!(GeomParams::new(2.0, 2, 1).c_geom().is_infinite());
    }
}
