//! Finite-order laminates: weighted matrix atoms together with a binary
//! rank-one splitting tree that certifies the hierarchical (H_m) structure.
//!
//! Every internal node stores its matrix `N`, a weight `t ∈ (0,1)` and two
//! children `L`, `R` with `N = t·L + (1−t)·R` and `rank(L − R) ≤ 1`. The flat
//! atom list is obtained by multiplying the `t`/`1−t` factors down the tree.
//! Equal matrices at different leaves are never merged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Mat, Vector};
use crate::scalar::{pairwise_sum, Scalar};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaminateError {
    #[error("split amplitudes do not preserve the barycenter: t·a_L + (1−t)·a_R = {residual:e}")]
    BarycenterViolation { residual: f64 },
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("split weight t = {0} is outside (0, 1)")]
    InvalidWeight(f64),
    #[error("pushforward factors are not special-orthogonal")]
    NotRotation,
    #[error("unknown integrand tag `{0}`")]
    UnknownIntegrand(String),
    #[error("malformed laminate document: {0}")]
    Malformed(String),
}

/// Provenance tag stored on leaves by the constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomLabel {
    #[default]
    Plain,
    /// Reached the target set (e.g. zero determinant).
    Good,
    /// Still violates the target constraint; candidate for further splitting.
    Bad,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T, const D: usize> {
    Leaf { matrix: Mat<T, D>, label: AtomLabel },
    Split { matrix: Mat<T, D>, t: T, left: NodeId, right: NodeId },
}

impl<T: Scalar, const D: usize> Node<T, D> {
    pub fn matrix(&self) -> &Mat<T, D> {
        match self {
            Node::Leaf { matrix, .. } | Node::Split { matrix, .. } => matrix,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom<T, const D: usize> {
    pub weight: T,
    pub matrix: Mat<T, D>,
    pub leaf: NodeId,
    pub label: AtomLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Laminate<T, const D: usize> {
    nodes: Vec<Node<T, D>>,
}

/// Per-node result of [`Laminate::validate_hm`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCheck {
    pub node: NodeId,
    pub t: f64,
    pub barycenter_residual: f64,
    pub barycenter_tolerance: f64,
    pub rank_defect: f64,
    pub rank_tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmReport {
    pub nodes: Vec<NodeCheck>,
    pub weight_sum_error: f64,
    pub root_residual: f64,
    pub root_tolerance: f64,
    pub pass: bool,
}

impl HmReport {
    pub fn failures(&self) -> impl Iterator<Item = &NodeCheck> {
        self.nodes.iter().filter(|n| !n.pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaminateStats {
    pub mass_det_neg: f64,
    pub mass_det_zero: f64,
    pub mass_det_pos: f64,
    pub p_moment: f64,
    pub centered_p_moment: f64,
    pub det_integral: f64,
    pub neg_det_q_moment: f64,
}

/// Scale-aware zero-determinant threshold `1e-9·(1+‖M‖)^d`.
pub fn det_zero_tolerance<T: Scalar, const D: usize>(m: &Mat<T, D>) -> T {
    T::tol(1e-9) * (T::one() + m.frobenius_norm()).powi(D as i32)
}

/// Sign class of `det M` under [`det_zero_tolerance`].
pub fn det_sign<T: Scalar, const D: usize>(m: &Mat<T, D>) -> std::cmp::Ordering {
    let det = m.determinant();
    let tau = det_zero_tolerance(m);
    if det < -tau {
        std::cmp::Ordering::Less
    } else if det > tau {
        std::cmp::Ordering::Greater
    } else {
        std::cmp::Ordering::Equal
    }
}

impl<T: Scalar, const D: usize> Laminate<T, D> {
    pub const ROOT: NodeId = 0;

    pub fn dirac(m: Mat<T, D>) -> Self {
        Self { nodes: vec![Node::Leaf { matrix: m, label: AtomLabel::Plain }] }
    }

    pub fn root(&self) -> &Mat<T, D> {
        self.nodes[Self::ROOT].matrix()
    }

    pub fn nodes(&self) -> &[Node<T, D>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node<T, D>> {
        self.nodes.get(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes.get(id), Some(Node::Leaf { .. }))
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        match self.nodes.get(id)? {
            Node::Split { left, right, .. } => Some((*left, *right)),
            Node::Leaf { .. } => None,
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.atoms().into_iter().map(|a| a.leaf).collect()
    }

    /// Longest root-to-leaf path measured in splits.
    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(Self::ROOT, 0usize)];
        while let Some((id, d)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { .. } => best = best.max(d),
                Node::Split { left, right, .. } => {
                    stack.push((*right, d + 1));
                    stack.push((*left, d + 1));
                }
            }
        }
        best
    }

    /// Flat atom list `(t_k, M_k)` in left-to-right leaf order.
    pub fn atoms(&self) -> Vec<Atom<T, D>> {
        let mut out = Vec::new();
        let mut stack = vec![(Self::ROOT, T::one())];
        while let Some((id, w)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { matrix, label } => out.push(Atom { weight: w, matrix: *matrix, leaf: id, label: *label }),
                Node::Split { t, left, right, .. } => {
                    stack.push((*right, w * (T::one() - *t)));
                    stack.push((*left, w * *t));
                }
            }
        }
        out
    }

    pub fn set_label(&mut self, leaf: NodeId, new_label: AtomLabel) -> Result<(), LaminateError> {
        match self.nodes.get_mut(leaf) {
            Some(Node::Leaf { label, .. }) => {
                *label = new_label;
                Ok(())
            }
            _ => Err(LaminateError::NotALeaf(leaf)),
        }
    }

    /// In-place rank-one split of a leaf `N` into
    /// `L = N + amp_left·(a⊗b)` and `R = N + amp_right·(a⊗b)`.
    ///
    /// Returns the ids of the new left and right leaves.
    pub fn split_leaf(
        &mut self,
        leaf: NodeId,
        t: T,
        a: &Vector<T, D>,
        b: &Vector<T, D>,
        amp_left: T,
        amp_right: T,
    ) -> Result<(NodeId, NodeId), LaminateError> {
        if !(t > T::zero() && t < T::one()) {
            return Err(LaminateError::InvalidWeight(t.as_f64()));
        }
        let residual = t * amp_left + (T::one() - t) * amp_right;
        let scale = T::one().max(amp_left.abs()).max(amp_right.abs());
        if residual.abs() > T::tol(1e-12) * scale {
            return Err(LaminateError::BarycenterViolation { residual: residual.as_f64() });
        }
        let n = match self.nodes.get(leaf) {
            Some(Node::Leaf { matrix, .. }) => *matrix,
            _ => return Err(LaminateError::NotALeaf(leaf)),
        };
        let dir = Mat::outer(a, b);
        let left = self.nodes.len();
        let right = left + 1;
        self.nodes.push(Node::Leaf { matrix: n + dir.scale(amp_left), label: AtomLabel::Plain });
        self.nodes.push(Node::Leaf { matrix: n + dir.scale(amp_right), label: AtomLabel::Plain });
        self.nodes[leaf] = Node::Split { matrix: n, t, left, right };
        Ok((left, right))
    }

    /// Persistent variant of [`Laminate::split_leaf`].
    pub fn rank_one_split(
        &self,
        leaf: NodeId,
        t: T,
        a: &Vector<T, D>,
        b: &Vector<T, D>,
        amp_left: T,
        amp_right: T,
    ) -> Result<Self, LaminateError> {
        let mut out = self.clone();
        out.split_leaf(leaf, t, a, b, amp_left, amp_right)?;
        Ok(out)
    }

    /// Replaces a leaf by the whole tree of `sub`, whose root must equal the leaf matrix.
    pub fn graft(&mut self, leaf: NodeId, sub: &Laminate<T, D>) -> Result<(), LaminateError> {
        match self.nodes.get(leaf) {
            Some(Node::Leaf { matrix, .. }) if matrix == sub.root() => {}
            Some(Node::Leaf { .. }) => return Err(LaminateError::Malformed("grafted root differs from leaf".into())),
            _ => return Err(LaminateError::NotALeaf(leaf)),
        }
        let base = self.nodes.len();
        let map = |id: NodeId| if id == Self::ROOT { leaf } else { base + id - 1 };
        let relink = |n: &Node<T, D>| match n {
            Node::Leaf { matrix, label } => Node::Leaf { matrix: *matrix, label: *label },
            Node::Split { matrix, t, left, right } => {
                Node::Split { matrix: *matrix, t: *t, left: map(*left), right: map(*right) }
            }
        };
        let mut relinked = sub.nodes.iter().map(relink);
        self.nodes[leaf] = relinked.next().expect("root node");
        self.nodes.extend(relinked);
        Ok(())
    }

    /// Checks every Laminate invariant and reports residuals instead of failing.
    pub fn validate_hm(&self) -> HmReport {
        let mut nodes = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Node::Split { matrix, t, left, right } = node {
                let l = self.nodes[*left].matrix();
                let r = self.nodes[*right].matrix();
                let one_minus = T::one() - *t;
                let mix = l.scale(*t) + r.scale(one_minus);
                let residual = (*matrix - mix).frobenius_norm();
                let scale = matrix.frobenius_norm().max(*t * l.frobenius_norm() + one_minus * r.frobenius_norm());
                let bary_tol = T::tol(1e-10) * scale;
                let defect = (*l - *r).rank_one_defect();
                let rank_tol = T::tol(1e-9) * (T::one() + l.frobenius_norm() + r.frobenius_norm());
                let t_ok = *t > T::zero() && *t < T::one();
                nodes.push(NodeCheck {
                    node: id,
                    t: t.as_f64(),
                    barycenter_residual: residual.as_f64(),
                    barycenter_tolerance: bary_tol.as_f64(),
                    rank_defect: defect.as_f64(),
                    rank_tolerance: rank_tol.as_f64(),
                    pass: t_ok && residual <= bary_tol && defect <= rank_tol,
                });
            }
        }
        let atoms = self.atoms();
        let weights: Vec<T> = atoms.iter().map(|a| a.weight).collect();
        let weight_sum_error = (pairwise_sum(&weights) - T::one()).abs();
        let bary = weighted_sum(&atoms);
        let norms: Vec<T> = atoms.iter().map(|a| a.weight * a.matrix.frobenius_norm()).collect();
        let root_tol = T::tol(1e-10) * pairwise_sum(&norms);
        let root_residual = (bary - *self.root()).frobenius_norm();
        let pass = nodes.iter().all(|n| n.pass) && weight_sum_error <= T::tol(1e-12) && root_residual <= root_tol;
        HmReport {
            nodes,
            weight_sum_error: weight_sum_error.as_f64(),
            root_residual: root_residual.as_f64(),
            root_tolerance: root_tol.as_f64(),
            pass,
        }
    }

    /// `[ν] = Σ w_k M_k`.
    pub fn barycenter(&self) -> Mat<T, D> {
        weighted_sum(&self.atoms())
    }

    /// `Σ w_k ‖M_k − center‖^p`, center defaulting to zero.
    pub fn p_moment(&self, p: T, center: Option<&Mat<T, D>>) -> T {
        let c = center.copied().unwrap_or_else(Mat::zeros);
        let terms: Vec<T> = self.atoms().iter().map(|a| a.weight * (a.matrix - c).norm_pow(p)).collect();
        pairwise_sum(&terms)
    }

    /// Mass split by determinant sign plus the moment integrals used in the estimates.
    ///
    /// The centered moment is taken about the root matrix; `neg_det_q_moment`
    /// is `∫_{det<0} |det A|^q dν`.
    pub fn statistics(&self, p: T, q: T) -> LaminateStats {
        let atoms = self.atoms();
        let root = *self.root();
        let mut neg = Vec::with_capacity(atoms.len());
        let mut zero = Vec::with_capacity(atoms.len());
        let mut pos = Vec::with_capacity(atoms.len());
        let mut pm = Vec::with_capacity(atoms.len());
        let mut cpm = Vec::with_capacity(atoms.len());
        let mut det_int = Vec::with_capacity(atoms.len());
        let mut negq = Vec::with_capacity(atoms.len());
        for a in &atoms {
            let det = a.matrix.determinant();
            let tau = det_zero_tolerance(&a.matrix);
            let (n, z, ps) = if det < -tau {
                negq.push(a.weight * det.abs().powf(q));
                (a.weight, T::zero(), T::zero())
            } else if det > tau {
                (T::zero(), T::zero(), a.weight)
            } else {
                (T::zero(), a.weight, T::zero())
            };
            neg.push(n);
            zero.push(z);
            pos.push(ps);
            pm.push(a.weight * a.matrix.norm_pow(p));
            cpm.push(a.weight * (a.matrix - root).norm_pow(p));
            det_int.push(a.weight * det);
        }
        LaminateStats {
            mass_det_neg: pairwise_sum(&neg).as_f64(),
            mass_det_zero: pairwise_sum(&zero).as_f64(),
            mass_det_pos: pairwise_sum(&pos).as_f64(),
            p_moment: pairwise_sum(&pm).as_f64(),
            centered_p_moment: pairwise_sum(&cpm).as_f64(),
            det_integral: pairwise_sum(&det_int).as_f64(),
            neg_det_q_moment: pairwise_sum(&negq).as_f64(),
        }
    }

    /// Replaces every node matrix `N` by `P·N·Qᵀ`; the tree and weights are kept.
    pub fn pushforward_rotation(&self, p: &Mat<T, D>, q: &Mat<T, D>) -> Result<Self, LaminateError> {
        let tol = T::tol(1e-10);
        if !p.is_special_orthogonal(tol) || !q.is_special_orthogonal(tol) {
            return Err(LaminateError::NotRotation);
        }
        let qt = q.transpose();
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n {
                Node::Leaf { matrix, label } => Node::Leaf { matrix: *p * *matrix * qt, label: *label },
                Node::Split { matrix, t, left, right } => {
                    Node::Split { matrix: *p * *matrix * qt, t: *t, left: *left, right: *right }
                }
            })
            .collect();
        Ok(Self { nodes })
    }

    /// Homogeneous single-point energy `Σ w_k f(M_k)`.
    pub fn energy(&self, integrand: &Integrand<T>) -> T {
        let terms: Vec<T> = self.atoms().iter().map(|a| a.weight * integrand.eval(&a.matrix)).collect();
        pairwise_sum(&terms)
    }

    /// Mass carried by leaves with the given label.
    pub fn label_mass(&self, label: AtomLabel) -> T {
        let w: Vec<T> = self.atoms().iter().filter(|a| a.label == label).map(|a| a.weight).collect();
        pairwise_sum(&w)
    }

    /// Builds the arena form of a nested tree. No invariants are checked here;
    /// call [`Laminate::validate_hm`] on the result.
    pub fn from_tree(tree: &LaminateTree<T, D>) -> Self {
        let mut nodes = Vec::new();
        fn push<T: Scalar, const D: usize>(nodes: &mut Vec<Node<T, D>>, tree: &LaminateTree<T, D>) -> NodeId {
            let id = nodes.len();
            match tree {
                LaminateTree::Atom { atom, label } => {
                    nodes.push(Node::Leaf { matrix: *atom, label: label.unwrap_or_default() })
                }
                LaminateTree::Split { t, matrix, left, right } => {
                    nodes.push(Node::Leaf { matrix: *matrix, label: AtomLabel::Plain });
                    let l = push(nodes, left);
                    let r = push(nodes, right);
                    nodes[id] = Node::Split { matrix: *matrix, t: *t, left: l, right: r };
                }
            }
            id
        }
        push(&mut nodes, tree);
        Self { nodes }
    }

    pub fn to_tree(&self) -> LaminateTree<T, D> {
        self.subtree(Self::ROOT)
    }

    fn subtree(&self, id: NodeId) -> LaminateTree<T, D> {
        match &self.nodes[id] {
            Node::Leaf { matrix, label } => {
                LaminateTree::Atom { atom: *matrix, label: (*label != AtomLabel::Plain).then_some(*label) }
            }
            Node::Split { matrix, t, left, right } => LaminateTree::Split {
                t: *t,
                matrix: *matrix,
                left: Box::new(self.subtree(*left)),
                right: Box::new(self.subtree(*right)),
            },
        }
    }
}

fn weighted_sum<T: Scalar, const D: usize>(atoms: &[Atom<T, D>]) -> Mat<T, D> {
    let mut out = Mat::zeros();
    for i in 0..D {
        for j in 0..D {
            let terms: Vec<T> = atoms.iter().map(|a| a.weight * a.matrix[(i, j)]).collect();
            out[(i, j)] = pairwise_sum(&terms);
        }
    }
    out
}

/// Nested JSON form: `{"t", "matrix", "left", "right"}` or `{"atom"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, bound = "")]
pub enum LaminateTree<T: Scalar, const D: usize> {
    Split {
        #[serde(with = "scalar_serde")]
        t: T,
        matrix: Mat<T, D>,
        left: Box<LaminateTree<T, D>>,
        right: Box<LaminateTree<T, D>>,
    },
    Atom {
        atom: Mat<T, D>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<AtomLabel>,
    },
}

/// Top-level laminate document `{ "d", "root", "tree" }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LaminateDoc<T: Scalar, const D: usize> {
    pub d: usize,
    pub root: Mat<T, D>,
    pub tree: LaminateTree<T, D>,
}

impl<T: Scalar, const D: usize> LaminateDoc<T, D> {
    pub fn from_laminate(lam: &Laminate<T, D>) -> Self {
        Self { d: D, root: *lam.root(), tree: lam.to_tree() }
    }

    pub fn into_laminate(self) -> Result<Laminate<T, D>, LaminateError> {
        if self.d != D {
            return Err(LaminateError::Malformed(format!("document has d = {}, expected {D}", self.d)));
        }
        let lam = Laminate::from_tree(&self.tree);
        if lam.root() != &self.root {
            return Err(LaminateError::Malformed("`root` differs from the tree's root matrix".into()));
        }
        Ok(lam)
    }
}

pub(crate) mod scalar_serde {
    use crate::scalar::Scalar;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Scalar, S: Serializer>(x: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(x.as_f64())
    }

    pub fn deserialize<'de, T: Scalar, D: Deserializer<'de>>(d: D) -> Result<T, D::Error> {
        Ok(T::lit(f64::deserialize(d)?))
    }
}

/// Closed bank of integrands evaluable on matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrand<T> {
    /// `‖A‖^p`
    PNorm(T),
    /// `det A`
    Det,
    /// `|det A|^q` on `det A < 0`, zero elsewhere.
    NegDetQ(T),
    /// `c₁‖A‖^p + c₂·g(det A)` with the convex penalty `g(s) = (1 − s)²` for
    /// `s < 1` and `0` for `s ≥ 1`.
    Composite { c1: T, p: T, c2: T },
}

impl<T: Scalar> Integrand<T> {
    /// Parses `pnorm:P`, `det`, `negdet:Q` or `composite:C1,P,C2`.
    pub fn parse(tag: &str) -> Result<Self, LaminateError> {
        let unknown = || LaminateError::UnknownIntegrand(tag.to_string());
        let (name, args) = match tag.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (tag.trim(), None),
        };
        let nums = |a: &str| -> Result<Vec<T>, LaminateError> {
            a.split(',').map(|x| x.trim().parse::<f64>().map(T::lit).map_err(|_| unknown())).collect()
        };
        match (name, args) {
            ("det", None) => Ok(Self::Det),
            ("pnorm", Some(a)) => match nums(a)?.as_slice() {
                [p] if *p >= T::one() => Ok(Self::PNorm(*p)),
                _ => Err(unknown()),
            },
            ("negdet", Some(a)) => match nums(a)?.as_slice() {
                [q] if *q > T::zero() => Ok(Self::NegDetQ(*q)),
                _ => Err(unknown()),
            },
            ("composite", Some(a)) => match nums(a)?.as_slice() {
                [c1, p, c2] if *p >= T::one() => Ok(Self::Composite { c1: *c1, p: *p, c2: *c2 }),
                _ => Err(unknown()),
            },
            _ => Err(unknown()),
        }
    }

    pub fn eval<const D: usize>(&self, a: &Mat<T, D>) -> T {
        match *self {
            Self::PNorm(p) => a.norm_pow(p),
            Self::Det => a.determinant(),
            Self::NegDetQ(q) => {
                let det = a.determinant();
                if det < T::zero() {
                    det.abs().powf(q)
                } else {
                    T::zero()
                }
            }
            Self::Composite { c1, p, c2 } => {
                let s = a.determinant();
                let g = if s < T::one() { (T::one() - s) * (T::one() - s) } else { T::zero() };
                c1 * a.norm_pow(p) + c2 * g
            }
        }
    }

    /// Growth exponent of the integrand when it has p-growth.
    pub fn growth(&self) -> Option<T> {
        match *self {
            Self::PNorm(p) | Self::Composite { p, .. } => Some(p),
            _ => None,
        }
    }
}

impl<T: Scalar> std::fmt::Display for Integrand<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PNorm(p) => write!(f, "pnorm:{}", p.as_f64()),
            Self::Det => write!(f, "det"),
            Self::NegDetQ(q) => write!(f, "negdet:{}", q.as_f64()),
            Self::Composite { c1, p, c2 } => write!(f, "composite:{},{},{}", c1.as_f64(), p.as_f64(), c2.as_f64()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type M2 = Mat<f64, 2>;
    type M3 = Mat<f64, 3>;
    type L2 = Laminate<f64, 2>;

    fn e(k: usize) -> [f64; 2] {
        M2::basis(k)
    }

    #[test]
    fn dirac_has_single_unit_atom() {
        let lam = L2::dirac(M2::identity());
        let atoms = lam.atoms();
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].weight, 1.0);
        assert_eq!(lam.barycenter(), M2::identity());
        let m = M2::from_rows([[1.0, -2.0], [0.5, 3.0]]);
        let d = L2::dirac(m);
        for p in [1.0, 1.5, 2.0, 3.7] {
            assert!((d.p_moment(p, None) - m.frobenius_norm().powf(p)).abs() < 1e-12 * m.frobenius_norm().powf(p));
        }
    }

    #[test]
    fn symmetric_split_of_zero() {
        let lam = L2::dirac(M2::zeros()).rank_one_split(0, 0.5, &e(0), &e(0), 1.0, -1.0).unwrap();
        let atoms = lam.atoms();
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[0].matrix, M2::diag([1.0, 0.0]));
        assert_eq!(atoms[1].matrix, M2::diag([-1.0, 0.0]));
        assert_eq!(atoms[0].weight, 0.5);
        assert!(lam.validate_hm().pass);
        assert_eq!(lam.energy(&Integrand::PNorm(2.0)), 1.0);
    }

    #[test]
    fn first_step_split_of_reflection() {
        let m0 = M2::diag([-1.0, 1.0]);
        let lam = L2::dirac(m0).rank_one_split(0, 0.5, &e(0), &e(1), 1.0, -1.0).unwrap();
        let atoms = lam.atoms();
        assert_eq!(atoms[0].matrix, M2::from_rows([[-1.0, 1.0], [0.0, 1.0]]));
        assert_eq!(atoms[1].matrix, M2::from_rows([[-1.0, -1.0], [0.0, 1.0]]));
        assert_eq!(lam.barycenter(), m0);
    }

    #[test]
    fn uneven_split_keeps_barycenter() {
        let m0 = M2::from_rows([[0.3, -1.2], [2.0, 0.7]]);
        let lam = L2::dirac(m0).rank_one_split(0, 0.25, &[1.0, 2.0], &[0.5, -1.0], 3.0, -1.0).unwrap();
        assert!(lam.barycenter().max_abs_diff(&m0) < 1e-15);
        assert!(lam.validate_hm().pass);
    }

    #[test]
    fn split_errors() {
        let lam = L2::dirac(M2::zeros());
        assert!(matches!(
            lam.rank_one_split(0, 0.5, &e(0), &e(0), 1.0, 1.0),
            Err(LaminateError::BarycenterViolation { .. })
        ));
        let lam = lam.rank_one_split(0, 0.5, &e(0), &e(0), 1.0, -1.0).unwrap();
        assert_eq!(lam.rank_one_split(0, 0.5, &e(0), &e(0), 1.0, -1.0), Err(LaminateError::NotALeaf(0)));
        assert_eq!(lam.rank_one_split(1, 1.0, &e(0), &e(0), 0.0, 0.0), Err(LaminateError::InvalidWeight(1.0)));
    }

    #[test]
    fn naive_pair_fails_rank_check() {
        let tree = LaminateTree::Split {
            t: 0.5,
            matrix: M3::diag([-1.0, 2.0, 3.0]),
            left: Box::new(LaminateTree::Atom { atom: M3::diag([0.0, 4.0, 3.0]), label: None }),
            right: Box::new(LaminateTree::Atom { atom: M3::diag([-2.0, 0.0, 3.0]), label: None }),
        };
        let report = Laminate::from_tree(&tree).validate_hm();
        assert!(!report.pass);
        let root = &report.nodes[0];
        assert!((root.rank_defect - 2.0).abs() < 1e-12);
        assert!(root.barycenter_residual < 1e-15);
    }

    #[test]
    fn mismatched_weight_fails_barycenter_check() {
        let l = M2::diag([1.0, 0.0]);
        let r = M2::diag([-1.0, 0.0]);
        let tree = LaminateTree::Split {
            t: 0.6,
            matrix: (l + r).scale(0.5),
            left: Box::new(LaminateTree::Atom { atom: l, label: None }),
            right: Box::new(LaminateTree::Atom { atom: r, label: None }),
        };
        let report = Laminate::from_tree(&tree).validate_hm();
        assert!(!report.pass);
        assert!(report.nodes[0].barycenter_residual > 0.1);
        assert!(report.nodes[0].rank_defect < 1e-15);
    }

    #[test]
    fn statistics_of_identity() {
        let s = Laminate::dirac(M2::identity()).statistics(2.0, 1.0);
        assert_eq!(s.mass_det_pos, 1.0);
        assert_eq!(s.det_integral, 1.0);
        assert_eq!(s.mass_det_neg + s.mass_det_zero, 0.0);
    }

    #[test]
    fn pushforward_preserves_structure() {
        let m0 = M2::diag([-1.0, 1.0]);
        let lam = L2::dirac(m0).rank_one_split(0, 0.5, &e(0), &e(1), 1.0, -1.0).unwrap();
        let id = lam.pushforward_rotation(&M2::identity(), &M2::identity()).unwrap();
        assert_eq!(id, lam);
        let (s, c) = 0.3f64.sin_cos();
        let p = M2::from_rows([[c, -s], [s, c]]);
        let (s2, c2) = (-1.1f64).sin_cos();
        let q = M2::from_rows([[c2, -s2], [s2, c2]]);
        let pushed = lam.pushforward_rotation(&p, &q).unwrap();
        assert!(pushed.validate_hm().pass);
        for (a, b) in lam.atoms().iter().zip(pushed.atoms()) {
            assert_eq!(a.weight, b.weight);
            assert!((a.matrix.determinant() - b.matrix.determinant()).abs() < 1e-14);
        }
        let refl = M2::diag([1.0, -1.0]);
        assert_eq!(lam.pushforward_rotation(&refl, &q), Err(LaminateError::NotRotation));
    }

    #[test]
    fn integrand_parsing() {
        assert_eq!(Integrand::<f64>::parse("pnorm:2").unwrap(), Integrand::PNorm(2.0));
        assert_eq!(Integrand::<f64>::parse("det").unwrap(), Integrand::Det);
        assert_eq!(Integrand::<f64>::parse("negdet:0.75").unwrap(), Integrand::NegDetQ(0.75));
        assert!(matches!(Integrand::<f64>::parse("composite:1,2,0.5"), Ok(Integrand::Composite { .. })));
        assert!(matches!(Integrand::<f64>::parse("ogden:3"), Err(LaminateError::UnknownIntegrand(_))));
        assert!(Integrand::<f64>::parse("pnorm:0.5").is_err());
        let f = Integrand::<f64>::parse("pnorm:2").unwrap();
        assert_eq!(Laminate::dirac(M2::identity()).energy(&f), 2.0);
    }

    #[test]
    fn graft_composes_splits() {
        let base = L2::dirac(M2::zeros()).rank_one_split(0, 0.5, &e(0), &e(0), 1.0, -1.0).unwrap();
        let left = base.atoms()[0].matrix;
        let sub = L2::dirac(left).rank_one_split(0, 0.25, &e(1), &e(1), 3.0, -1.0).unwrap();
        let mut g = base.clone();
        g.graft(base.leaves()[0], &sub).unwrap();
        let w: Vec<f64> = g.atoms().iter().map(|a| a.weight).collect();
        assert_eq!(w, vec![0.125, 0.375, 0.5]);
        assert!(g.validate_hm().pass);
        assert_eq!(g.barycenter(), M2::zeros());
        assert!(g.clone().graft(0, &sub).is_err());
        assert!(g.graft(base.leaves()[1], &sub).is_err());
    }

    #[test]
    fn document_round_trip() {
        let lam = L2::dirac(M2::diag([-1.0, 1.0])).rank_one_split(0, 0.5, &e(0), &e(1), 1.0, -1.0).unwrap();
        let json = serde_json::to_string(&LaminateDoc::from_laminate(&lam)).unwrap();
        assert!(json.starts_with("{\"d\":2,\"root\":[[-1.0,0.0],[0.0,1.0]],\"tree\":{\"t\":0.5"));
        let doc: LaminateDoc<f64, 2> = serde_json::from_str(&json).unwrap();
        assert_eq!(doc.into_laminate().unwrap(), lam);
    }
}
