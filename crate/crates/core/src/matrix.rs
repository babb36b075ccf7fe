//! Dense small square matrices with Frobenius norm and closed-form determinants.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::Scalar;
use crate::svd::{signed_svd, SvdOrdering};

/// Column vector of length `D`.
pub type Vector<T, const D: usize> = [T; D];

/// Dense `D×D` matrix stored row-major.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Mat<T, const D: usize> {
    rows: [[T; D]; D],
}

impl<T: Scalar, const D: usize> Default for Mat<T, D> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<T: Scalar, const D: usize> Mat<T, D> {
    pub fn from_rows(rows: [[T; D]; D]) -> Self {
        Self { rows }
    }

    /// Builds a matrix from `f64` rows, converting each entry.
    pub fn from_f64_rows(rows: [[f64; D]; D]) -> Self {
        Self { rows: rows.map(|r| r.map(T::lit)) }
    }

    pub fn zeros() -> Self {
        Self { rows: [[T::zero(); D]; D] }
    }

    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            m.rows[i][i] = T::one();
        }
        m
    }

    pub fn diag(d: [T; D]) -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            m.rows[i][i] = d[i];
        }
        m
    }

    /// Outer product `a ⊗ b = a bᵀ`.
    pub fn outer(a: &Vector<T, D>, b: &Vector<T, D>) -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            for j in 0..D {
                m.rows[i][j] = a[i] * b[j];
            }
        }
        m
    }

    /// Standard basis vector `e_k` (zero-based).
    pub fn basis(k: usize) -> Vector<T, D> {
        let mut v = [T::zero(); D];
        v[k] = T::one();
        v
    }

    pub fn rows(&self) -> &[[T; D]; D] {
        &self.rows
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
    }

    pub fn col(&self, k: usize) -> Vector<T, D> {
        let mut v = [T::zero(); D];
        for i in 0..D {
            v[i] = self.rows[i][k];
        }
        v
    }

    pub fn set_col(&mut self, k: usize, v: &Vector<T, D>) {
        for i in 0..D {
            self.rows[i][k] = v[i];
        }
    }

    pub fn diagonal(&self) -> [T; D] {
        let mut v = [T::zero(); D];
        for i in 0..D {
            v[i] = self.rows[i][i];
        }
        v
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            for j in 0..D {
                m.rows[j][i] = self.rows[i][j];
            }
        }
        m
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows.map(|r| r.map(|x| x * s)) }
    }

    pub fn mul_vec(&self, v: &Vector<T, D>) -> Vector<T, D> {
        let mut out = [T::zero(); D];
        for i in 0..D {
            let mut acc = T::zero();
            for j in 0..D {
                acc = acc + self.rows[i][j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|x| x.is_finite())
    }

    pub fn is_diagonal(&self) -> bool {
        (0..D).all(|i| (0..D).all(|j| i == j || self.rows[i][j] == T::zero()))
    }

    /// `‖M‖_F = (Σ m_ij²)^{1/2}`, computed with scaling to avoid overflow.
    pub fn frobenius_norm(&self) -> T {
        let scale = self.max_abs();
        if scale == T::zero() || !scale.is_finite() {
            return scale;
        }
        let mut acc = T::zero();
        for x in self.rows.iter().flatten() {
            let y = *x / scale;
            acc = acc + y * y;
        }
        scale * acc.sqrt()
    }

    /// `‖M‖_F^p`; the square is summed directly so integer cases stay exact.
    pub fn norm_pow(&self, p: T) -> T {
        if p == T::lit(2.0) {
            let sq: T = self.rows.iter().flatten().map(|x| *x * *x).sum();
            if sq.is_finite() {
                return sq;
            }
        }
        self.frobenius_norm().powf(p)
    }

    pub fn max_abs(&self) -> T {
        self.rows.iter().flatten().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Closed-form determinant for `D ≤ 4`; partial-pivot elimination above that.
    pub fn determinant(&self) -> T {
        let a = &self.rows;
        match D {
            0 => T::one(),
            1 => a[0][0],
            2 => det2(a[0][0], a[0][1], a[1][0], a[1][1]),
            3 => det3(a, [0, 1, 2], [0, 1, 2]),
            4 => {
                let mut acc = T::zero();
                for c in 0..4 {
                    let cols = minor_cols::<4>(c);
                    let m = det3(a, [1, 2, 3], cols);
                    let term = a[0][c] * m;
                    acc = if c % 2 == 0 { acc + term } else { acc - term };
                }
                acc
            }
            _ => self.determinant_elimination(),
        }
    }

    fn determinant_elimination(&self) -> T {
        let mut a = self.rows;
        let mut det = T::one();
        for k in 0..D {
            let pivot = (k..D).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap()).unwrap();
            if a[pivot][k] == T::zero() {
                return T::zero();
            }
            if pivot != k {
                a.swap(pivot, k);
                det = -det;
            }
            det = det * a[k][k];
            for i in (k + 1)..D {
                let f = a[i][k] / a[k][k];
                for j in k..D {
                    a[i][j] = a[i][j] - f * a[k][j];
                }
            }
        }
        det
    }

    /// Second-largest singular value; `≤ tol` certifies rank ≤ 1.
    pub fn rank_one_defect(&self) -> T {
        if D < 2 {
            return T::zero();
        }
        match signed_svd(self, SvdOrdering::AbsDescending) {
            Ok(svd) => svd.theta[1].abs(),
            Err(_) => T::infinity(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        (*self - *other).max_abs()
    }

    /// `QᵀQ = I` and `det Q = 1`, both within `tol`.
    pub fn is_special_orthogonal(&self, tol: T) -> bool {
        let qtq = self.transpose() * *self;
        qtq.max_abs_diff(&Self::identity()) <= tol && (self.determinant() - T::one()).abs() <= tol
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U, D> {
        Mat { rows: self.rows.map(|r| r.map(|x| U::lit(x.as_f64()))) }
    }
}

fn det2<T: Scalar>(a: T, b: T, c: T, d: T) -> T {
    a * d - b * c
}

fn det3<T: Scalar, const D: usize>(a: &[[T; D]; D], r: [usize; 3], c: [usize; 3]) -> T {
    let m = |i: usize, j: usize| a[r[i]][c[j]];
    m(0, 0) * det2(m(1, 1), m(1, 2), m(2, 1), m(2, 2)) - m(0, 1) * det2(m(1, 0), m(1, 2), m(2, 0), m(2, 2))
        + m(0, 2) * det2(m(1, 0), m(1, 1), m(2, 0), m(2, 1))
}

fn minor_cols<const N: usize>(skip: usize) -> [usize; 3] {
    let mut out = [0; 3];
    let mut k = 0;
    for c in 0..N {
        if c != skip {
            out[k] = c;
            k += 1;
        }
    }
    out
}

impl<T, const D: usize> Index<(usize, usize)> for Mat<T, D> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.rows[i][j]
    }
}

impl<T, const D: usize> IndexMut<(usize, usize)> for Mat<T, D> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.rows[i][j]
    }
}

impl<T: Scalar, const D: usize> Add for Mat<T, D> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl<T: Scalar, const D: usize> AddAssign for Mat<T, D> {
    fn add_assign(&mut self, rhs: Self) {
        for i in 0..D {
            for j in 0..D {
                self.rows[i][j] = self.rows[i][j] + rhs.rows[i][j];
            }
        }
    }
}

impl<T: Scalar, const D: usize> Sub for Mat<T, D> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        for i in 0..D {
            for j in 0..D {
                self.rows[i][j] = self.rows[i][j] - rhs.rows[i][j];
            }
        }
        self
    }
}

impl<T: Scalar, const D: usize> Neg for Mat<T, D> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

impl<T: Scalar, const D: usize> Mul for Mat<T, D> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            for j in 0..D {
                let mut acc = T::zero();
                for k in 0..D {
                    acc = acc + self.rows[i][k] * rhs.rows[k][j];
                }
                m.rows[i][j] = acc;
            }
        }
        m
    }
}

impl<T: Scalar, const D: usize> Mul<T> for Mat<T, D> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

// Matrices travel as JSON arrays of rows; serde_json prints f64 with the
// shortest round-trip representation.
impl<T: Scalar, const D: usize> Serialize for Mat<T, D> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_f64_rows().serialize(s)
    }
}

impl<'de, T: Scalar, const D: usize> Deserialize<'de> for Mat<T, D> {
    fn deserialize<De: Deserializer<'de>>(de: De) -> Result<Self, De::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        Mat::try_from_nested(&rows).map_err(De::Error::custom)
    }
}

impl<T: Scalar, const D: usize> Mat<T, D> {
    /// Parses nested rows, checking shape and finiteness.
    pub fn try_from_nested(rows: &[Vec<f64>]) -> Result<Self, String> {
        if rows.len() != D || rows.iter().any(|r| r.len() != D) {
            return Err(format!("expected a {D}x{D} matrix"));
        }
        let mut m = Self::zeros();
        for i in 0..D {
            for j in 0..D {
                let x = rows[i][j];
                if !x.is_finite() {
                    return Err(format!("entry ({i},{j}) is not finite"));
                }
                m.rows[i][j] = T::lit(x);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type M2 = Mat<f64, 2>;
    type M3 = Mat<f64, 3>;

    #[test]
    fn frobenius_examples() {
        assert!((M2::identity().frobenius_norm() - 2f64.sqrt()).abs() < 1e-15);
        assert!((M2::diag([-1.0, 1.0]).frobenius_norm() - 2f64.sqrt()).abs() < 1e-15);
        let m = M2::from_rows([[3.0, 4.0], [0.0, 0.0]]);
        assert_eq!(m.frobenius_norm(), 5.0);
    }

    #[test]
    fn determinant_examples() {
        assert_eq!(M3::identity().determinant(), 1.0);
        assert_eq!(M3::diag([-1.0, 2.0, 3.0]).determinant(), -6.0);
        assert_eq!(M2::from_rows([[-1.0, 1.0], [1.0, 1.0]]).determinant(), -2.0);
    }

    #[test]
    fn determinant_4x4_matches_elimination() {
        let m = Mat::<f64, 4>::from_rows([
            [2.0, -1.0, 0.5, 3.0],
            [0.0, 1.5, -2.0, 1.0],
            [4.0, 0.25, 1.0, -1.0],
            [-3.0, 2.0, 0.0, 0.5],
        ]);
        let a = m.determinant();
        let b = m.determinant_elimination();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        // permutation matrix with an odd cycle structure
        let p = Mat::<f64, 4>::from_rows([
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        assert_eq!(p.determinant(), -1.0);
    }

    #[test]
    fn rank_one_defect_examples() {
        let e1 = M2::basis(0);
        let e2 = M2::basis(1);
        assert!(M2::outer(&e1, &e2).rank_one_defect() < 1e-15);
        assert!((M2::identity().rank_one_defect() - 1.0).abs() < 1e-14);
        assert!((M3::diag([2.0, 4.0, 0.0]).rank_one_defect() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn json_round_trip_rejects_bad_shape() {
        let m = M2::from_rows([[0.1, -2.5], [1e-300, 3.0]]);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[0.1,-2.5],[1e-300,3.0]]");
        let back: M2 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<M2>("[[1,2,3],[4,5,6]]").is_err());
    }
}
