//! Piecewise-affine maps on the unit square whose gradients reproduce the
//! statistics of a planar laminate.
//!
//! A split `N = t·L + (1−t)·R` with `L − R = a⊗n` is realized as
//! `u(x) = N·x + c + a·g(x)` where, on each tooth `s₀ ≤ x·n ≤ s₀ + P`,
//!
//! ```text
//! g = min( (1−t)(x·n − s₀),  t(s₀ + P − x·n),  dist(x, e) for each cut edge e )
//! ```
//!
//! The first two terms give gradients `L` and `R`; the distance terms force
//! `g = 0` on the boundary of the enclosing piece, so the refinement matches
//! the parent map there. Pieces where a distance term is the minimum are
//! transition regions; they are kept as leaves and counted against the
//! histogram. Child splits recurse inside their `L`/`R` pieces with period
//! `ε·P`. The boundary of the unit square is never cut.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::laminate::{det_sign, Laminate, Node, NodeId};
use crate::matrix::Mat;
use crate::scalar::{pairwise_sum, Scalar};
use crate::svd::{signed_svd, SvdOrdering};

pub const MAX_DEPTH: usize = 3;
/// Guard against layouts too fine to store.
pub const MAX_PIECES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RealizationError {
    #[error("laminate depth {depth} exceeds the cap {cap} (at most {MAX_DEPTH})")]
    DepthExceeded { depth: usize, cap: usize },
    #[error("node {0} has identical children, so its interface normal is undefined")]
    NotUnitNormal(NodeId),
    #[error("node {0} is not a rank-one split")]
    IncompatibleSplit(NodeId),
    #[error("epsilon must lie in (0, 1/4), got {0}")]
    InvalidEpsilon(f64),
    #[error("periods must be at least 1")]
    InvalidPeriods,
    #[error("layout needs more than {MAX_PIECES} pieces")]
    TooManyPieces,
}

pub type Point<T> = [T; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Region carrying the gradient of this laminate leaf.
    Atom(NodeId),
    Transition,
}

/// Convex polygon (counter-clockwise) carrying `u(x) = A·x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece<T> {
    pub polygon: Vec<Point<T>>,
    pub gradient: Mat<T, 2>,
    pub offset: Point<T>,
    pub source: Source,
}

impl<T: Scalar> Piece<T> {
    pub fn eval(&self, x: &Point<T>) -> Point<T> {
        let v = self.gradient.mul_vec(x);
        [v[0] + self.offset[0], v[1] + self.offset[1]]
    }

    pub fn area(&self) -> T {
        polygon_area(&self.polygon)
    }

    fn contains(&self, x: &Point<T>, tol: T) -> bool {
        let n = self.polygon.len();
        (0..n).all(|i| {
            let (p, q) = (self.polygon[i], self.polygon[(i + 1) % n]);
            let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            cross(&p, &q, x) >= -tol * len
        })
    }

    fn bbox(&self) -> [T; 4] {
        let mut b = [T::infinity(), T::infinity(), T::neg_infinity(), T::neg_infinity()];
        for p in &self.polygon {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SawtoothMap<T> {
    pub pieces: Vec<Piece<T>>,
    pub depth: usize,
    pub epsilon: T,
    pub periods: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramEntry {
    pub fraction: f64,
    pub matrix: [[f64; 2]; 2],
    pub source: Source,
}

fn cross<T: Scalar>(p: &Point<T>, q: &Point<T>, x: &Point<T>) -> T {
    (q[0] - p[0]) * (x[1] - p[1]) - (q[1] - p[1]) * (x[0] - p[0])
}

fn polygon_area<T: Scalar>(poly: &[Point<T>]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let terms: Vec<T> = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .collect();
    pairwise_sum(&terms) * T::lit(0.5)
}

/// Keeps the part of a convex polygon where `g·x + h ≤ 0`.
fn clip<T: Scalar>(poly: &[Point<T>], g: Point<T>, h: T) -> Vec<Point<T>> {
    let f = |p: &Point<T>| g[0] * p[0] + g[1] * p[1] + h;
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let (fp, fq) = (f(&p), f(&q));
        if fp <= T::zero() {
            out.push(p);
        }
        if (fp < T::zero() && fq > T::zero()) || (fp > T::zero() && fq < T::zero()) {
            let s = fp / (fp - fq);
            out.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]);
        }
    }
    out
}

fn on_unit_square_boundary<T: Scalar>(p: &Point<T>, q: &Point<T>) -> bool {
    let tol = T::tol(1e-14);
    (0..2).any(|k| [T::zero(), T::one()].iter().any(|&side| (p[k] - side).abs() <= tol && (q[k] - side).abs() <= tol))
}

/// Affine scalar `grad·x + konst` together with what its region becomes.
#[derive(Clone, Copy)]
struct Term<T> {
    grad: Point<T>,
    konst: T,
    child: Option<NodeId>,
}

struct Builder<'a, T> {
    lam: &'a Laminate<T, 2>,
    epsilon: T,
    pieces: Vec<Piece<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn factor(&self, id: NodeId, left: NodeId, right: NodeId) -> Result<(Point<T>, Point<T>), RealizationError> {
        let l = self.lam.node(left).expect("child").matrix();
        let r = self.lam.node(right).expect("child").matrix();
        let jump = *l - *r;
        let svd = signed_svd(&jump, SvdOrdering::AbsDescending).map_err(|_| RealizationError::IncompatibleSplit(id))?;
        if svd.theta[0] == T::zero() {
            return Err(RealizationError::NotUnitNormal(id));
        }
        if svd.theta[1].abs() > T::tol(1e-9) * (T::one() + l.frobenius_norm() + r.frobenius_norm()) {
            return Err(RealizationError::IncompatibleSplit(id));
        }
        let a = svd.p.col(0).map(|x| x * svd.theta[0]);
        Ok((a, svd.q.col(0)))
    }

    fn realize(
        &mut self,
        id: NodeId,
        poly: Vec<Point<T>>,
        grad: Mat<T, 2>,
        offset: Point<T>,
        period: T,
        top: bool,
    ) -> Result<(), RealizationError> {
        let (t, left, right) = match self.lam.node(id).expect("node") {
            Node::Leaf { .. } => {
                if self.pieces.len() >= MAX_PIECES {
                    return Err(RealizationError::TooManyPieces);
                }
                self.pieces.push(Piece { polygon: poly, gradient: grad, offset, source: Source::Atom(id) });
                return Ok(());
            }
            Node::Split { t, left, right, .. } => (*t, *left, *right),
        };
        let (a, n) = self.factor(id, left, right)?;
        let one_minus = T::one() - t;

        let mut cuts = Vec::new();
        if !top {
            let m = poly.len();
            for i in 0..m {
                let (p, q) = (poly[i], poly[(i + 1) % m]);
                if on_unit_square_boundary(&p, &q) {
                    continue;
                }
                let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
                if len == T::zero() {
                    continue;
                }
                // Inward unit normal of a counter-clockwise edge.
                let nu = [-(q[1] - p[1]) / len, (q[0] - p[0]) / len];
                cuts.push(Term { grad: nu, konst: -(nu[0] * p[0] + nu[1] * p[1]), child: None });
            }
        }

        let s = |x: &Point<T>| x[0] * n[0] + x[1] * n[1];
        let s_min = poly.iter().map(s).fold(T::infinity(), T::min);
        let s_max = poly.iter().map(s).fold(T::neg_infinity(), T::max);
        let k0 = (s_min / period).floor().to_i64().expect("finite");
        let k1 = (s_max / period).ceil().to_i64().expect("finite");
        let tiny = T::epsilon() * T::epsilon();
        for k in k0..k1 {
            let s0 = T::lit(k as f64) * period;
            let strip = clip(&poly, [-n[0], -n[1]], s0);
            let strip = clip(&strip, n, -(s0 + period));
            if polygon_area(&strip) <= tiny {
                continue;
            }
            let mut terms = vec![
                Term { grad: [one_minus * n[0], one_minus * n[1]], konst: -one_minus * s0, child: Some(left) },
                Term { grad: [-t * n[0], -t * n[1]], konst: t * (s0 + period), child: Some(right) },
            ];
            terms.extend(cuts.iter().copied());
            for (i, ti) in terms.iter().enumerate() {
                let mut piece = strip.clone();
                for (j, tj) in terms.iter().enumerate() {
                    if i != j && piece.len() >= 3 {
                        piece = clip(&piece, [ti.grad[0] - tj.grad[0], ti.grad[1] - tj.grad[1]], ti.konst - tj.konst);
                    }
                }
                if polygon_area(&piece) <= tiny {
                    continue;
                }
                let g = grad + Mat::outer(&a, &ti.grad);
                let c = [offset[0] + a[0] * ti.konst, offset[1] + a[1] * ti.konst];
                match ti.child {
                    Some(child) => self.realize(child, piece, g, c, self.epsilon * period, false)?,
                    None => {
                        if self.pieces.len() >= MAX_PIECES {
                            return Err(RealizationError::TooManyPieces);
                        }
                        self.pieces.push(Piece { polygon: piece, gradient: g, offset: c, source: Source::Transition });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds the nested sawtooth map of a planar laminate.
pub fn realize_laminate<T: Scalar>(
    lam: &Laminate<T, 2>,
    depth_cap: usize,
    epsilon: T,
    periods: usize,
) -> Result<SawtoothMap<T>, RealizationError> {
    let depth = lam.depth();
    if depth_cap > MAX_DEPTH || depth > depth_cap {
        return Err(RealizationError::DepthExceeded { depth, cap: depth_cap });
    }
    if !(epsilon > T::zero() && epsilon < T::lit(0.25)) {
        return Err(RealizationError::InvalidEpsilon(epsilon.as_f64()));
    }
    if periods == 0 {
        return Err(RealizationError::InvalidPeriods);
    }
    let square = vec![[T::zero(), T::zero()], [T::one(), T::zero()], [T::one(), T::one()], [T::zero(), T::one()]];
    let mut b = Builder { lam, epsilon, pieces: Vec::new() };
    let period = T::one() / T::lit(periods as f64);
    b.realize(Laminate::<T, 2>::ROOT, square, *lam.root(), [T::zero(); 2], period, true)?;
    Ok(SawtoothMap { pieces: b.pieces, depth, epsilon, periods })
}

/// Uniform bucket grid over the unit square for point location.
struct Locator {
    size: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    fn new<T: Scalar>(pieces: &[Piece<T>]) -> Self {
        let size = ((pieces.len() as f64).sqrt() as usize).clamp(1, 1024);
        let mut buckets = vec![Vec::new(); size * size];
        let sz = T::lit(size as f64);
        let pad = T::tol(1e-12);
        let idx = |v: T| (((v * sz).floor()).to_i64().unwrap_or(0)).clamp(0, size as i64 - 1) as usize;
        for (i, p) in pieces.iter().enumerate() {
            let b = p.bbox();
            for gy in idx(b[1] - pad)..=idx(b[3] + pad) {
                for gx in idx(b[0] - pad)..=idx(b[2] + pad) {
                    buckets[gy * size + gx].push(i);
                }
            }
        }
        Self { size, buckets }
    }

    fn candidates<T: Scalar>(&self, x: &Point<T>) -> &[usize] {
        let sz = T::lit(self.size as f64);
        let idx = |v: T| (((v * sz).floor()).to_i64().unwrap_or(0)).clamp(0, self.size as i64 - 1) as usize;
        &self.buckets[idx(x[1]) * self.size + idx(x[0])]
    }
}

impl<T: Scalar> SawtoothMap<T> {
    /// Volume fraction per laminate leaf (in leaf order) followed by one entry
    /// per distinct transition gradient.
    pub fn gradient_histogram(&self, lam: &Laminate<T, 2>) -> Vec<HistogramEntry> {
        let mut per_leaf: HashMap<NodeId, Vec<T>> = HashMap::new();
        let mut transitions: Vec<(Mat<T, 2>, Vec<T>)> = Vec::new();
        for p in &self.pieces {
            match p.source {
                Source::Atom(id) => per_leaf.entry(id).or_default().push(p.area()),
                Source::Transition => match transitions.iter_mut().find(|(m, _)| *m == p.gradient) {
                    Some((_, v)) => v.push(p.area()),
                    None => transitions.push((p.gradient, vec![p.area()])),
                },
            }
        }
        let to_rows = |m: &Mat<T, 2>| {
            let r = m.to_f64_rows();
            [[r[0][0], r[0][1]], [r[1][0], r[1][1]]]
        };
        let mut out: Vec<HistogramEntry> = lam
            .atoms()
            .iter()
            .map(|a| HistogramEntry {
                fraction: per_leaf.get(&a.leaf).map_or(T::zero(), |v| pairwise_sum(v)).as_f64(),
                matrix: to_rows(&a.matrix),
                source: Source::Atom(a.leaf),
            })
            .collect();
        out.extend(transitions.iter().map(|(m, v)| HistogramEntry {
            fraction: pairwise_sum(v).as_f64(),
            matrix: to_rows(m),
            source: Source::Transition,
        }));
        out
    }

    /// Total-variation distance between the realized gradient distribution and the atoms.
    pub fn tv_distance(&self, lam: &Laminate<T, 2>) -> f64 {
        let hist = self.gradient_histogram(lam);
        let weights: HashMap<NodeId, f64> = lam.atoms().iter().map(|a| (a.leaf, a.weight.as_f64())).collect();
        let diffs: Vec<f64> = hist
            .iter()
            .map(|h| match h.source {
                Source::Atom(id) => (h.fraction - weights[&id]).abs(),
                Source::Transition => h.fraction,
            })
            .collect();
        0.5 * pairwise_sum(&diffs)
    }

    pub fn total_area(&self) -> T {
        let a: Vec<T> = self.pieces.iter().map(|p| p.area()).collect();
        pairwise_sum(&a)
    }

    /// Volume of the region where `det ∇u < 0`.
    pub fn negative_jacobian_fraction(&self) -> T {
        let a: Vec<T> = self
            .pieces
            .iter()
            .filter(|p| det_sign(&p.gradient) == std::cmp::Ordering::Less)
            .map(|p| p.area())
            .collect();
        pairwise_sum(&a)
    }

    /// Largest jump of the assembled map, probed at every vertex and edge
    /// midpoint of every piece against all other pieces containing the point.
    pub fn continuity_residual(&self) -> T {
        let loc = Locator::new(&self.pieces);
        let tol = T::tol(1e-12);
        let mut worst = T::zero();
        for (i, p) in self.pieces.iter().enumerate() {
            let m = p.polygon.len();
            for k in 0..m {
                let (a, b) = (p.polygon[k], p.polygon[(k + 1) % m]);
                let mid = [(a[0] + b[0]) * T::lit(0.5), (a[1] + b[1]) * T::lit(0.5)];
                for x in [a, mid] {
                    let ui = p.eval(&x);
                    for &j in loc.candidates(&x) {
                        if j != i && self.pieces[j].contains(&x, tol) {
                            let uj = self.pieces[j].eval(&x);
                            let d = ((ui[0] - uj[0]).powi(2) + (ui[1] - uj[1]).powi(2)).sqrt();
                            worst = worst.max(d);
                        }
                    }
                }
            }
        }
        worst
    }

    /// Index of a piece containing `x`, if any.
    pub fn locate(&self, x: &Point<T>) -> Option<usize> {
        let tol = T::tol(1e-12);
        self.pieces.iter().position(|p| p.contains(x, tol))
    }

    /// Samples `u` and `∇u` at the centers of an `m × m` grid.
    pub fn grid_csv(&self, m: usize) -> String {
        let loc = Locator::new(&self.pieces);
        let tol = T::tol(1e-12);
        let mut out = String::from("x,y,u1,u2,g11,g12,g21,g22\n");
        for iy in 0..m {
            for ix in 0..m {
                let x = [
                    (T::lit(ix as f64) + T::lit(0.5)) / T::lit(m as f64),
                    (T::lit(iy as f64) + T::lit(0.5)) / T::lit(m as f64),
                ];
                let Some(&j) = loc.candidates(&x).iter().find(|&&j| self.pieces[j].contains(&x, tol)) else {
                    continue;
                };
                let p = &self.pieces[j];
                let u = p.eval(&x);
                let g = p.gradient;
                out.push_str(&format!(
                    "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                    x[0].as_f64(),
                    x[1].as_f64(),
                    u[0].as_f64(),
                    u[1].as_f64(),
                    g[(0, 0)].as_f64(),
                    g[(0, 1)].as_f64(),
                    g[(1, 0)].as_f64(),
                    g[(1, 1)].as_f64()
                ));
            }
        }
        out
    }

    pub fn to_doc(&self) -> MapDoc {
        MapDoc {
            depth: self.depth,
            epsilon: self.epsilon.as_f64(),
            periods: self.periods,
            pieces: self
                .pieces
                .iter()
                .map(|p| PieceDoc {
                    polygon: p.polygon.iter().map(|v| [v[0].as_f64(), v[1].as_f64()]).collect(),
                    gradient: p.gradient.to_f64_rows(),
                    offset: [p.offset[0].as_f64(), p.offset[1].as_f64()],
                    source: p.source,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapDoc {
    pub depth: usize,
    pub epsilon: f64,
    pub periods: usize,
    pub pieces: Vec<PieceDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PieceDoc {
    pub polygon: Vec<[f64; 2]>,
    pub gradient: Vec<Vec<f64>>,
    pub offset: [f64; 2],
    pub source: Source,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laminate::LaminateTree;
    use crate::zero_det::build_zero_det_laminate;

    type M2 = Mat<f64, 2>;

    fn simple() -> Laminate<f64, 2> {
        let e1 = M2::basis(0);
        Laminate::dirac(M2::zeros()).rank_one_split(0, 0.5, &e1, &e1, 1.0, -1.0).unwrap()
    }

    #[test]
    fn dirac_is_affine() {
        let m = M2::from_rows([[1.0, 2.0], [-0.5, 3.0]]);
        let lam = Laminate::dirac(m);
        let map = realize_laminate(&lam, 1, 0.1, 4).unwrap();
        assert_eq!(map.pieces.len(), 1);
        assert_eq!(map.pieces[0].eval(&[0.5, 0.25]), [1.0, 0.5]);
        let h = map.gradient_histogram(&lam);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].fraction, 1.0);
    }

    #[test]
    fn simple_laminate_is_a_zigzag() {
        let lam = simple();
        let map = realize_laminate(&lam, 1, 0.1, 4).unwrap();
        assert_eq!(map.pieces.len(), 8);
        for p in &map.pieces {
            assert!(
                p.gradient.max_abs_diff(&M2::diag([1.0, 0.0])) < 1e-15
                    || p.gradient.max_abs_diff(&M2::diag([-1.0, 0.0])) < 1e-15
            );
            for v in &p.polygon {
                let u = p.eval(v);
                assert!(u[1].abs() < 1e-15);
                assert!(u[0].abs() <= 0.125 + 1e-15);
            }
        }
        let h = map.gradient_histogram(&lam);
        assert!(h.iter().all(|e| (e.fraction - 0.5).abs() < 1e-14));
        assert!(map.tv_distance(&lam) < 1e-14);
        assert!(map.continuity_residual() < 1e-14);
    }

    #[test]
    fn nested_reflection_laminate() {
        let lam = build_zero_det_laminate(&M2::diag([-1.0, 1.0]), 1).unwrap().laminate;
        for eps in [0.2, 0.1, 0.05] {
            let map = realize_laminate(&lam, 2, eps, 8).unwrap();
            assert!((map.total_area() - 1.0).abs() < 1e-12);
            let tv = map.tv_distance(&lam);
            assert!(tv <= 2.0 * eps * 2.0, "eps {eps}: tv {tv}");
            assert!(tv > 0.0);
            assert!(map.continuity_residual() <= 1e-12);
            let neg = map.negative_jacobian_fraction();
            assert!((neg - 0.5).abs() <= tv + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let lam = build_zero_det_laminate(&M2::diag([-1.0, 1.0]), 2).unwrap().laminate;
        assert!(matches!(realize_laminate(&lam, 3, 0.1, 8), Err(RealizationError::DepthExceeded { .. })));
        assert!(matches!(realize_laminate(&simple(), 4, 0.1, 8), Err(RealizationError::DepthExceeded { .. })));
        assert!(matches!(realize_laminate(&simple(), 1, 0.3, 8), Err(RealizationError::InvalidEpsilon(_))));
        let tree = LaminateTree::Split {
            t: 0.5,
            matrix: M2::zeros(),
            left: Box::new(LaminateTree::Atom { atom: M2::identity(), label: None }),
            right: Box::new(LaminateTree::Atom { atom: -M2::identity(), label: None }),
        };
        let bad = Laminate::from_tree(&tree);
        assert_eq!(realize_laminate(&bad, 1, 0.1, 2).unwrap_err(), RealizationError::IncompatibleSplit(0));
        let flat = Laminate::dirac(M2::zeros()).rank_one_split(0, 0.5, &M2::basis(0), &M2::basis(0), 0.0, 0.0).unwrap();
        assert_eq!(realize_laminate(&flat, 1, 0.1, 2).unwrap_err(), RealizationError::NotUnitNormal(0));
    }

    #[test]
    fn grid_samples_every_point() {
        let lam = build_zero_det_laminate(&M2::diag([-1.0, 1.0]), 1).unwrap().laminate;
        let map = realize_laminate(&lam, 2, 0.1, 4).unwrap();
        let csv = map.grid_csv(16);
        assert_eq!(csv.lines().count(), 1 + 256);
    }
}
