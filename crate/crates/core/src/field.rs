//! Piecewise-constant gradient fields on the unit box and the two repair
//! iterations that push their Jacobians onto `{det ≥ 0}` and `{det > 0}`.
//!
//! A cell carries an ordered list of slabs; a slab with weight `w` fills the
//! fraction `w` of its cell. Repairing a slab replaces it by the atoms of a
//! laminate built on its matrix, each atom becoming a thinner slab of
//! relative width equal to its weight. Slab interfaces are not required to be
//! rank-one compatible, so a repaired field reproduces the single-point
//! statistics of the laminates exactly but is not the gradient of one map.
//!
//! Cells are stored behind `Arc`, so identical cells are repaired once and
//! share storage.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delta_shift::{build_delta_laminate, DeltaError};
use crate::laminate::{det_sign, Integrand, Laminate, LaminateError};
use crate::matrix::Mat;
use crate::report::EstimateReport;
use crate::scalar::{pairwise_sum, Scalar};
use crate::zero_det::{build_zero_det_laminate, GeomParams, ZeroDetError, DET_FLOOR};

/// Largest number of stored (deduplicated) slabs a repair may produce.
pub const SUBCELL_BUDGET: usize = 1 << 24;
/// Hard cap on the zero-det level used in one repair iteration.
pub const MAX_SCHEDULE_LEVEL: usize = 20;
/// Smallest shift tried by the strict repair.
pub const MIN_DELTA: f64 = 1e-12;
/// Relative slack on inequalities that hold with equality in exact arithmetic.
const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("unknown field generator `{0}`")]
    UnknownGenerator(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("exponent p = {p} must satisfy 1 ≤ p < d = {d}")]
    InvalidExponent { p: f64, d: usize },
    #[error("no schedule value met the iteration-{l} target within the caps")]
    ScheduleExhausted { l: usize },
    #[error("repair would store {needed} subcells, above the budget of {SUBCELL_BUDGET}")]
    SubdivisionOverflow { needed: usize },
    #[error("input has untracked negative-determinant mass {0}")]
    NotWeaklyOriented(f64),
    #[error(transparent)]
    ZeroDet(#[from] ZeroDetError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error(transparent)]
    Laminate(#[from] LaminateError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slab<T, const D: usize> {
    /// Fraction of the cell volume.
    pub w: T,
    pub matrix: Mat<T, D>,
    /// Negative-determinant remainder left behind by a weak repair.
    pub residual: bool,
    origin: u32,
}

impl<T: Scalar, const D: usize> Slab<T, D> {
    pub fn new(w: T, matrix: Mat<T, D>) -> Self {
        Self { w, matrix, residual: false, origin: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell<T, const D: usize> {
    pub slabs: Vec<Slab<T, D>>,
}

impl<T: Scalar, const D: usize> Cell<T, D> {
    pub fn uniform(m: Mat<T, D>) -> Self {
        Self { slabs: vec![Slab::new(T::one(), m)] }
    }

    fn sums(&self, p: T) -> CellSums<T> {
        let q = p / T::lit(D as f64);
        let mut neg = Vec::with_capacity(self.slabs.len());
        let mut zero = Vec::with_capacity(self.slabs.len());
        let mut defic = Vec::with_capacity(self.slabs.len());
        let mut pn = Vec::with_capacity(self.slabs.len());
        let mut min_det = T::infinity();
        for s in &self.slabs {
            let det = s.matrix.determinant();
            min_det = min_det.min(det);
            match det_sign(&s.matrix) {
                std::cmp::Ordering::Less => {
                    neg.push(s.w);
                    defic.push(s.w * det.abs().powf(q));
                }
                std::cmp::Ordering::Equal => zero.push(s.w),
                std::cmp::Ordering::Greater => {}
            }
            pn.push(s.w * s.matrix.norm_pow(p));
        }
        CellSums {
            neg: pairwise_sum(&neg),
            zero: pairwise_sum(&zero),
            defic: pairwise_sum(&defic),
            pnorm: pairwise_sum(&pn),
            min_det,
        }
    }

    fn energy(&self, f: &Integrand<T>) -> T {
        let e: Vec<T> = self.slabs.iter().map(|s| s.w * f.eval(&s.matrix)).collect();
        pairwise_sum(&e)
    }

    fn weight_sum(&self) -> T {
        let w: Vec<T> = self.slabs.iter().map(|s| s.w).collect();
        pairwise_sum(&w)
    }

    fn rebased(&self) -> Self {
        let slabs = self.slabs.iter().enumerate().map(|(i, s)| Slab { origin: i as u32, ..s.clone() }).collect();
        Self { slabs }
    }
}

#[derive(Debug, Clone, Copy)]
struct CellSums<T> {
    neg: T,
    zero: T,
    defic: T,
    pnorm: T,
    min_det: T,
}

/// Volume-weighted summary of a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldStats {
    pub neg_mass: f64,
    pub zero_mass: f64,
    /// `∫_{det<0} |det|^{p/d}`
    pub det_deficiency: f64,
    /// `‖G‖_p`
    pub p_norm: f64,
    pub min_det: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator<T, const D: usize> {
    Constant(Mat<T, D>),
    /// Jacobian of `x + a·(∂₂ψ, −∂₁ψ, 0…)` with `ψ = sin²(πx₁)·sin²(πx₂)`.
    Vortex {
        amplitude: T,
    },
    /// Standard normal entries; each cell has `det < 0` with probability `mix`.
    Random {
        mix: T,
    },
}

impl<T: Scalar, const D: usize> Generator<T, D> {
    /// Parses `identity`, `zero`, `reflection`, `constant:<json matrix>`,
    /// `vortex[:a]` or `random[:mix]`.
    pub fn parse(tag: &str) -> Result<Self, FieldError> {
        let bad = || FieldError::UnknownGenerator(tag.to_string());
        let (name, arg) = match tag.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (tag.trim(), None),
        };
        let num = |a: Option<&str>, default: f64| -> Result<T, FieldError> {
            match a {
                None => Ok(T::lit(default)),
                Some(s) => s.parse::<f64>().ok().filter(|x| x.is_finite()).map(T::lit).ok_or_else(bad),
            }
        };
        match (name, arg) {
            ("identity", None) => Ok(Self::Constant(Mat::identity())),
            ("zero", None) => Ok(Self::Constant(Mat::zeros())),
            ("reflection", None) => {
                let mut m = Mat::identity();
                m[(0, 0)] = -T::one();
                Ok(Self::Constant(m))
            }
            ("constant", Some(json)) => serde_json::from_str::<Mat<T, D>>(json).map(Self::Constant).map_err(|_| bad()),
            ("vortex", a) => Ok(Self::Vortex { amplitude: num(a, 0.2)? }),
            ("random", a) => {
                let mix = num(a, 0.5)?;
                if mix < T::zero() || mix > T::one() {
                    return Err(bad());
                }
                Ok(Self::Random { mix })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField<T, const D: usize> {
    n: usize,
    cells: Vec<Arc<Cell<T, D>>>,
}

fn check_grid<const D: usize>(n: usize) -> Result<(), FieldError> {
    let cap = match D {
        2 => 256,
        3 => 32,
        _ => return Err(FieldError::InvalidGrid(format!("fields are defined for d = 2 or 3, not {D}"))),
    };
    if n == 0 || n > cap {
        return Err(FieldError::InvalidGrid(format!("n = {n} outside 1..={cap} for d = {D}")));
    }
    Ok(())
}

impl<T: Scalar, const D: usize> GradientField<T, D> {
    pub fn constant(m: Mat<T, D>, n: usize) -> Result<Self, FieldError> {
        check_grid::<D>(n)?;
        let cell = Arc::new(Cell::uniform(m));
        Ok(Self { n, cells: vec![cell; n.pow(D as u32)] })
    }

    /// One matrix per cell in row-major order (last coordinate fastest).
    pub fn from_matrices(n: usize, mats: Vec<Mat<T, D>>) -> Result<Self, FieldError> {
        Self::from_cells(n, mats.into_iter().map(Cell::uniform).collect())
    }

    pub fn from_cells(n: usize, cells: Vec<Cell<T, D>>) -> Result<Self, FieldError> {
        check_grid::<D>(n)?;
        if cells.len() != n.pow(D as u32) {
            return Err(FieldError::InvalidGrid(format!("expected {} cells, got {}", n.pow(D as u32), cells.len())));
        }
        for (i, c) in cells.iter().enumerate() {
            if c.slabs.is_empty() || c.slabs.iter().any(|s| !s.matrix.is_finite() || !(s.w > T::zero())) {
                return Err(FieldError::InvalidGrid(format!("cell {i} has an empty, non-finite or non-positive slab")));
            }
            if (c.weight_sum() - T::one()).abs() > T::tol(1e-12) {
                return Err(FieldError::InvalidGrid(format!("slab widths of cell {i} do not sum to 1")));
            }
        }
        Ok(Self { n, cells: cells.into_iter().map(Arc::new).collect() })
    }

    pub fn generate(gen: &Generator<T, D>, n: usize, seed: u64) -> Result<Self, FieldError> {
        check_grid::<D>(n)?;
        match gen {
            Generator::Constant(m) => Self::constant(*m, n),
            Generator::Vortex { amplitude } => {
                let mats =
                    (0..n.pow(D as u32)).map(|i| vortex_jacobian(*amplitude, cell_center::<T, D>(i, n))).collect();
                Self::from_matrices(n, mats)
            }
            Generator::Random { mix } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mats = (0..n.pow(D as u32))
                    .map(|_| {
                        let mut m = Mat::<T, D>::zeros();
                        for i in 0..D {
                            for j in 0..D {
                                m[(i, j)] = T::lit(rng.sample::<f64, _>(StandardNormal));
                            }
                        }
                        let want_negative = rng.random::<f64>() < mix.as_f64();
                        if (m.determinant() < T::zero()) != want_negative {
                            for j in 0..D {
                                m[(0, j)] = -m[(0, j)];
                            }
                        }
                        m
                    })
                    .collect();
                Self::from_matrices(n, mats)
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cell_volume(&self) -> T {
        T::one() / T::lit(self.n.pow(D as u32) as f64)
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell<T, D>> {
        self.cells.iter().map(|c| c.as_ref())
    }

    pub fn cell(&self, i: usize) -> &Cell<T, D> {
        &self.cells[i]
    }

    /// Slabs held in memory, counting shared cells once.
    pub fn stored_slab_count(&self) -> usize {
        let (uniq, _) = self.unique();
        uniq.iter().map(|c| c.slabs.len()).sum()
    }

    /// Total slab count over the grid.
    pub fn slab_count(&self) -> usize {
        self.cells.iter().map(|c| c.slabs.len()).sum()
    }

    fn unique(&self) -> (Vec<Arc<Cell<T, D>>>, Vec<usize>) {
        let mut index: HashMap<*const Cell<T, D>, usize> = HashMap::new();
        let mut uniq = Vec::new();
        let mut map = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            let id = *index.entry(Arc::as_ptr(c)).or_insert_with(|| {
                uniq.push(c.clone());
                uniq.len() - 1
            });
            map.push(id);
        }
        (uniq, map)
    }

    /// Volume-weighted sum of a per-cell quantity, reduced in cell order.
    fn reduce(&self, per_unique: &[T], map: &[usize]) -> T {
        let per_cell: Vec<T> = map.iter().map(|&u| per_unique[u]).collect();
        pairwise_sum(&per_cell) * self.cell_volume()
    }

    pub fn stats(&self, p: f64) -> FieldStats {
        let (uniq, map) = self.unique();
        let sums: Vec<CellSums<T>> = uniq.par_iter().map(|c| c.sums(T::lit(p))).collect();
        let pick = |f: fn(&CellSums<T>) -> T| sums.iter().map(f).collect::<Vec<T>>();
        FieldStats {
            neg_mass: self.reduce(&pick(|s| s.neg), &map).as_f64(),
            zero_mass: self.reduce(&pick(|s| s.zero), &map).as_f64(),
            det_deficiency: self.reduce(&pick(|s| s.defic), &map).as_f64(),
            p_norm: self.reduce(&pick(|s| s.pnorm), &map).as_f64().powf(1.0 / p),
            min_det: sums.iter().map(|s| s.min_det.as_f64()).fold(f64::INFINITY, f64::min),
        }
    }

    /// `∫ f(G(x)) dx`.
    pub fn energy(&self, f: &Integrand<T>) -> T {
        let (uniq, map) = self.unique();
        let e: Vec<T> = uniq.par_iter().map(|c| c.energy(f)).collect();
        self.reduce(&e, &map)
    }

    /// `|Σ slab volumes − 1|`.
    pub fn volume_error(&self) -> T {
        let (uniq, map) = self.unique();
        let w: Vec<T> = uniq.iter().map(|c| c.weight_sum()).collect();
        (self.reduce(&w, &map) - T::one()).abs()
    }

    fn rebased(&self) -> Self {
        let (uniq, map) = self.unique();
        let fresh: Vec<Arc<Cell<T, D>>> = uniq.iter().map(|c| Arc::new(c.rebased())).collect();
        Self { n: self.n, cells: map.iter().map(|&u| fresh[u].clone()).collect() }
    }

    pub fn to_doc(&self) -> FieldDoc<T, D> {
        let cells = self
            .cells
            .iter()
            .map(|c| match c.slabs.as_slice() {
                [s] if s.w == T::one() && !s.residual => CellDoc::Matrix(s.matrix),
                slabs => CellDoc::Slabs {
                    slabs: slabs.iter().map(|s| SlabDoc { w: s.w, matrix: s.matrix, residual: s.residual }).collect(),
                },
            })
            .collect();
        FieldDoc { d: D, n: self.n, cells }
    }

    pub fn from_doc(doc: FieldDoc<T, D>) -> Result<Self, FieldError> {
        if doc.d != D {
            return Err(FieldError::InvalidGrid(format!("document has d = {}, expected {D}", doc.d)));
        }
        let cells = doc
            .cells
            .into_iter()
            .map(|c| match c {
                CellDoc::Matrix(m) => Cell::uniform(m),
                CellDoc::Slabs { slabs } => Cell {
                    slabs: slabs
                        .into_iter()
                        .map(|s| Slab { w: s.w, matrix: s.matrix, residual: s.residual, origin: 0 })
                        .collect(),
                },
            })
            .collect();
        Self::from_cells(doc.n, cells)
    }
}

fn cell_center<T: Scalar, const D: usize>(index: usize, n: usize) -> [T; D] {
    let mut x = [T::zero(); D];
    let mut rest = index;
    for k in (0..D).rev() {
        x[k] = (T::lit((rest % n) as f64) + T::lit(0.5)) / T::lit(n as f64);
        rest /= n;
    }
    x
}

fn vortex_jacobian<T: Scalar, const D: usize>(a: T, x: [T; D]) -> Mat<T, D> {
    let pi = T::PI();
    let two = T::lit(2.0);
    let (s1, c1) = (pi * x[0]).sin_cos();
    let (s2, c2) = (pi * x[1]).sin_cos();
    // ψ = s1²·s2²
    let psi_11 = two * pi * pi * (c1 * c1 - s1 * s1) * s2 * s2;
    let psi_22 = two * pi * pi * s1 * s1 * (c2 * c2 - s2 * s2);
    let psi_12 = T::lit(4.0) * pi * pi * s1 * c1 * s2 * c2;
    let mut m = Mat::identity();
    m[(0, 0)] = T::one() + a * psi_12;
    m[(0, 1)] = a * psi_22;
    m[(1, 0)] = -a * psi_11;
    m[(1, 1)] = T::one() - a * psi_12;
    m
}

/// Serialized field: one entry per cell, either a matrix or a slab list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FieldDoc<T: Scalar, const D: usize> {
    pub d: usize,
    pub n: usize,
    pub cells: Vec<CellDoc<T, D>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, bound = "")]
pub enum CellDoc<T: Scalar, const D: usize> {
    Matrix(Mat<T, D>),
    Slabs { slabs: Vec<SlabDoc<T, D>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SlabDoc<T: Scalar, const D: usize> {
    #[serde(with = "crate::laminate::scalar_serde")]
    pub w: T,
    pub matrix: Mat<T, D>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub residual: bool,
}

/// One row per iteration; row 0 describes the input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub l: usize,
    pub neg_mass: f64,
    pub zero_mass: f64,
    pub det_deficiency: f64,
    /// `‖G^l − G^{l−1}‖_p`; zero on row 0.
    pub lp_step: f64,
    /// Cumulative volume of compliant input cells that differ from the input.
    pub changed_on_good: f64,
    /// Zero-det level (weak) or shift δ (strict) used for this iteration.
    pub schedule: f64,
    /// `∫ f(G^l)` for each tracked integrand.
    pub energies: Vec<f64>,
    /// The same integrals evaluated on the laminates before they are laid out as slabs.
    pub ym_energies: Vec<f64>,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("l,neg_mass,zero_mass,det_deficiency,lp_step,changed_on_good\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?}\n",
            r.l, r.neg_mass, r.zero_mass, r.det_deficiency, r.lp_step, r.changed_on_good
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome<T, const D: usize> {
    pub field: GradientField<T, D>,
    pub trace: Vec<TraceRow>,
    pub report: EstimateReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakParams<T> {
    pub p: f64,
    /// Offset of the default level schedule `j(l) = l + j0`.
    pub j0: usize,
    pub l_max: usize,
    pub track: Vec<Integrand<T>>,
}

impl<T> WeakParams<T> {
    pub fn new(p: f64, l_max: usize) -> Self {
        Self { p, j0: 0, l_max, track: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrictParams<T> {
    pub p: f64,
    /// First shift; iteration `l` starts from `δ₀·2^{−l}`.
    pub delta0: f64,
    /// Total L^p drift allowed; iteration `l` may use `2^{−(l+1)}·budget`.
    pub budget: f64,
    pub l_max: usize,
    /// Zero-det level applied to the negative atoms a shift creates.
    pub j_inner: usize,
    pub track: Vec<Integrand<T>>,
}

impl<T> StrictParams<T> {
    pub fn new(p: f64, l_max: usize) -> Self {
        Self { p, delta0: 0.5, budget: 1.0, l_max, j_inner: 2, track: Vec::new() }
    }
}

/// Result of repairing one stored cell.
struct CellStep<T, const D: usize> {
    cell: Cell<T, D>,
    /// `Σ_slab w·∫|A − M_slab|^p dν_slab`
    step_p: T,
    ym: Vec<T>,
}

fn check_exponent<const D: usize>(p: f64) -> Result<(), FieldError> {
    if !(p >= 1.0 && p < D as f64) {
        return Err(FieldError::InvalidExponent { p, d: D });
    }
    Ok(())
}

/// Replaces the slabs selected by `pick` with the atoms of the laminate `build` returns.
fn refine_cell<T: Scalar, const D: usize, P, B>(
    cell: &Cell<T, D>,
    p: T,
    track: &[Integrand<T>],
    pick: P,
    build: B,
) -> Result<CellStep<T, D>, FieldError>
where
    P: Fn(&Slab<T, D>) -> bool,
    B: Fn(&Mat<T, D>) -> Result<Laminate<T, D>, FieldError>,
{
    let mut slabs = Vec::with_capacity(cell.slabs.len());
    let mut step = Vec::new();
    let mut ym: Vec<Vec<T>> = vec![Vec::with_capacity(cell.slabs.len()); track.len()];
    for s in &cell.slabs {
        if pick(s) {
            let lam = build(&s.matrix)?;
            for a in lam.atoms() {
                let residual = det_sign(&a.matrix) == std::cmp::Ordering::Less;
                slabs.push(Slab { w: s.w * a.weight, matrix: a.matrix, residual, origin: s.origin });
            }
            step.push(s.w * lam.p_moment(p, Some(&s.matrix)));
            for (acc, f) in ym.iter_mut().zip(track) {
                acc.push(s.w * lam.energy(f));
            }
        } else {
            slabs.push(s.clone());
            for (acc, f) in ym.iter_mut().zip(track) {
                acc.push(s.w * f.eval(&s.matrix));
            }
        }
    }
    Ok(CellStep { cell: Cell { slabs }, step_p: pairwise_sum(&step), ym: ym.iter().map(|v| pairwise_sum(v)).collect() })
}

/// Shared driver state for both repair iterations.
struct Pass<'a, T, const D: usize> {
    input: &'a GradientField<T, D>,
    input_cells: Vec<Arc<Cell<T, D>>>,
    p: f64,
    track: &'a [Integrand<T>],
}

impl<'a, T: Scalar, const D: usize> Pass<'a, T, D> {
    fn new(input: &'a GradientField<T, D>, p: f64, track: &'a [Integrand<T>]) -> Self {
        Self { input, input_cells: input.cells.clone(), p, track }
    }

    fn row(
        &self,
        l: usize,
        g: &GradientField<T, D>,
        lp_step: f64,
        schedule: f64,
        ym: Vec<f64>,
        good: fn(&Mat<T, D>) -> bool,
    ) -> TraceRow {
        let s = g.stats(self.p);
        TraceRow {
            l,
            neg_mass: s.neg_mass,
            zero_mass: s.zero_mass,
            det_deficiency: s.det_deficiency,
            lp_step,
            changed_on_good: self.changed_on_good(g, good).as_f64(),
            schedule,
            energies: self.track.iter().map(|f| g.energy(f).as_f64()).collect(),
            ym_energies: ym,
        }
    }

    /// Runs `refine_cell` on every stored cell in parallel.
    fn step<P, B>(
        &self,
        g: &GradientField<T, D>,
        pick: P,
        build: B,
    ) -> Result<(GradientField<T, D>, f64, Vec<f64>), FieldError>
    where
        P: Fn(&Slab<T, D>) -> bool + Sync,
        B: Fn(&Mat<T, D>) -> Result<Laminate<T, D>, FieldError> + Sync,
    {
        let (uniq, map) = g.unique();
        let pt = T::lit(self.p);
        let steps =
            uniq.par_iter().map(|c| refine_cell(c, pt, self.track, &pick, &build)).collect::<Result<Vec<_>, _>>()?;
        let step_p = g.reduce(&steps.iter().map(|s| s.step_p).collect::<Vec<_>>(), &map);
        let ym = (0..self.track.len())
            .map(|k| g.reduce(&steps.iter().map(|s| s.ym[k]).collect::<Vec<_>>(), &map).as_f64())
            .collect();
        let fresh: Vec<Arc<Cell<T, D>>> = steps.into_iter().map(|s| Arc::new(s.cell)).collect();
        let next = GradientField { n: g.n, cells: map.iter().map(|&u| fresh[u].clone()).collect() };
        Ok((next, step_p.as_f64().powf(1.0 / self.p), ym))
    }

    /// `Σ_cells vol · f(cell_now, cell_input)` reduced in cell order.
    fn compare<F>(&self, g: &GradientField<T, D>, f: F) -> T
    where
        F: Fn(&Cell<T, D>, &Cell<T, D>) -> T + Sync,
    {
        let mut memo: HashMap<(*const Cell<T, D>, *const Cell<T, D>), T> = HashMap::new();
        let per_cell: Vec<T> = g
            .cells
            .iter()
            .zip(&self.input_cells)
            .map(|(now, was)| *memo.entry((Arc::as_ptr(now), Arc::as_ptr(was))).or_insert_with(|| f(now, was)))
            .collect();
        pairwise_sum(&per_cell) * g.cell_volume()
    }

    fn changed_on_good(&self, g: &GradientField<T, D>, good: fn(&Mat<T, D>) -> bool) -> T {
        self.compare(g, |now, was| {
            let w: Vec<T> = now
                .slabs
                .iter()
                .filter(|s| {
                    let origin = &was.slabs[s.origin as usize].matrix;
                    good(origin) && s.matrix != *origin
                })
                .map(|s| s.w)
                .collect();
            pairwise_sum(&w)
        })
    }

    /// `‖G − F‖_p^p`.
    fn drift_p(&self, g: &GradientField<T, D>) -> T {
        let p = T::lit(self.p);
        self.compare(g, |now, was| {
            let d: Vec<T> =
                now.slabs.iter().map(|s| s.w * (s.matrix - was.slabs[s.origin as usize].matrix).norm_pow(p)).collect();
            pairwise_sum(&d)
        })
    }

    fn input_ym(&self) -> Vec<f64> {
        self.track.iter().map(|f| self.input.energy(f).as_f64()).collect()
    }
}

fn not_negative<T: Scalar, const D: usize>(m: &Mat<T, D>) -> bool {
    det_sign(m) != std::cmp::Ordering::Less
}

fn strictly_positive<T: Scalar, const D: usize>(m: &Mat<T, D>) -> bool {
    det_sign(m) == std::cmp::Ordering::Greater
}

fn count_where<T: Scalar, const D: usize>(
    g: &GradientField<T, D>,
    pred: impl Fn(&Slab<T, D>) -> bool,
) -> (usize, usize) {
    let (uniq, _) = g.unique();
    let hits = uniq.iter().map(|c| c.slabs.iter().filter(|s| pred(s)).count()).sum();
    (hits, g.stored_slab_count())
}

/// Drives the negative-determinant mass toward zero by nested zero-det laminates.
///
/// Iteration `l` applies a level-`j` laminate to every slab with `det < 0`;
/// `j` starts at `l + j0` and grows until the deficiency is at most
/// `2^{−lp}` times the input deficiency.
pub fn weak_repair<T: Scalar, const D: usize>(
    f: &GradientField<T, D>,
    params: &WeakParams<T>,
) -> Result<RepairOutcome<T, D>, FieldError> {
    let p = params.p;
    check_exponent::<D>(p)?;
    let pass = Pass::new(f, p, &params.track);
    let mut trace = vec![pass.row(0, f, 0.0, 0.0, pass.input_ym(), not_negative)];
    let d0 = trace[0].det_deficiency;
    let mut report = EstimateReport::default();
    if trace[0].neg_mass == 0.0 {
        report.push("final_neg_mass", 0.0, 0.0, true, "nothing to repair");
        return Ok(RepairOutcome { field: f.clone(), trace, report });
    }

    let is_bad = |s: &Slab<T, D>| det_sign(&s.matrix) == std::cmp::Ordering::Less;
    let mut g = f.rebased();
    let mut total_j = 0;
    for l in 1..=params.l_max {
        let target = 2f64.powf(-(l as f64) * p) * d0;
        let mut j = (l + params.j0).max(1);
        let (next, lp_step, ym) = loop {
            if j > MAX_SCHEDULE_LEVEL {
                return Err(FieldError::ScheduleExhausted { l });
            }
            let (bad, stored) = count_where(&g, is_bad);
            let needed = stored - bad + bad * (3 * (1usize << j) - 2);
            if needed > SUBCELL_BUDGET {
                return Err(FieldError::SubdivisionOverflow { needed });
            }
            let attempt = pass.step(&g, is_bad, |m| {
                if m.determinant().abs() < T::lit(DET_FLOOR) {
                    return Ok(Laminate::dirac(*m));
                }
                Ok(build_zero_det_laminate(m, j)?.laminate)
            })?;
            if attempt.0.stats(p).det_deficiency <= target * (1.0 + SLACK) {
                break attempt;
            }
            j += 1;
        };
        g = next;
        total_j += j;
        let row = pass.row(l, &g, lp_step, j as f64, ym, not_negative);
        let c = GeomParams::new(p, D, j).c_geom();
        report.upper(&format!("deficiency_l{l}"), row.det_deficiency, target, SLACK, format!("2^(-{l}p) D0; j = {j}"));
        let step_bound = c.powf(1.0 / p) * 2f64.powi(1 - l as i32) * d0.powf(1.0 / p);
        report.upper(&format!("lp_step_l{l}"), row.lp_step, step_bound, SLACK, "C^(1/p) 2^-(l-1) D0^(1/p)");
        trace.push(row);
    }

    let last = trace.last().expect("row 0");
    let drift = pass.drift_p(&g).as_f64();
    let c_total = GeomParams::new(p, D, total_j).c_geom();
    report.upper("drift", drift, c_total * d0, SLACK, format!("|G - F|_p^p <= C_geom D0 with J = {total_j}"));
    report.push("changed_on_good", last.changed_on_good, 0.0, last.changed_on_good == 0.0, "compliant cells untouched");
    report.upper("volume", g.volume_error().as_f64(), 1e-12, 0.0, "|sum of slab volumes - 1|");
    report.push("final_neg_mass", last.neg_mass, 0.0, last.neg_mass == 0.0, "volume of det < 0");
    Ok(RepairOutcome { field: g, trace, report })
}

/// Lifts the zero-determinant mass onto `{det > 0}` with δ-shift laminates.
///
/// Each iteration shifts every slab with `det ≈ 0` and immediately applies a
/// level-`j_inner` zero-det laminate to the negative atoms this creates. The
/// shift starts at `δ₀·2^{−l}` and is halved until the iteration moves the
/// field by at most `2^{−(l+1)}·budget` in L^p. Negative slabs left by a weak
/// repair (flagged `residual`) are carried along unchanged.
pub fn strict_repair<T: Scalar, const D: usize>(
    f: &GradientField<T, D>,
    params: &StrictParams<T>,
) -> Result<RepairOutcome<T, D>, FieldError> {
    let p = params.p;
    check_exponent::<D>(p)?;
    let (uniq, map) = f.unique();
    let untracked: Vec<T> = uniq
        .iter()
        .map(|c| {
            let w: Vec<T> = c
                .slabs
                .iter()
                .filter(|s| !s.residual && det_sign(&s.matrix) == std::cmp::Ordering::Less)
                .map(|s| s.w)
                .collect();
            pairwise_sum(&w)
        })
        .collect();
    let untracked = f.reduce(&untracked, &map).as_f64();
    if untracked > 0.0 {
        return Err(FieldError::NotWeaklyOriented(untracked));
    }

    let pass = Pass::new(f, p, &params.track);
    let mut trace = vec![pass.row(0, f, 0.0, 0.0, pass.input_ym(), strictly_positive)];
    let z0 = trace[0].zero_mass;
    let mut report = EstimateReport::default();
    if z0 == 0.0 {
        report.push("final_min_det", trace[0].neg_mass, 0.0, trace[0].neg_mass == 0.0, "no zero-determinant mass");
        return Ok(RepairOutcome { field: f.clone(), trace, report });
    }

    let is_zero = |s: &Slab<T, D>| det_sign(&s.matrix) == std::cmp::Ordering::Equal;
    let j_inner = params.j_inner.clamp(1, MAX_SCHEDULE_LEVEL);
    let per_zero = (1usize << D) * (3 * (1usize << j_inner) - 2);
    let mut g = f.rebased();
    let mut total_step = 0.0;
    for l in 1..=params.l_max {
        if trace.last().expect("row").zero_mass == 0.0 {
            break;
        }
        let allowed = 2f64.powi(-(l as i32 + 1)) * params.budget;
        let mut delta = params.delta0 * 2f64.powi(-(l as i32));
        let (zero, stored) = count_where(&g, is_zero);
        let needed = stored - zero + zero * per_zero;
        if needed > SUBCELL_BUDGET {
            return Err(FieldError::SubdivisionOverflow { needed });
        }
        let (next, lp_step, ym) = loop {
            if delta < MIN_DELTA {
                return Err(FieldError::ScheduleExhausted { l });
            }
            let dt = T::lit(delta);
            let attempt = pass.step(&g, is_zero, |m| {
                let mut lam = build_delta_laminate(m, dt)?.laminate;
                for atom in lam.atoms() {
                    if det_sign(&atom.matrix) == std::cmp::Ordering::Less {
                        let sub = build_zero_det_laminate(&atom.matrix, j_inner)?.laminate;
                        lam.graft(atom.leaf, &sub)?;
                    }
                }
                Ok(lam)
            })?;
            if attempt.1 <= allowed {
                break attempt;
            }
            delta *= 0.5;
        };
        g = next;
        total_step += lp_step;
        let row = pass.row(l, &g, lp_step, delta, ym, strictly_positive);
        let envelope = (l as f64 + z0) * 2f64.powi(-(l as i32));
        report.upper(
            &format!("zero_mass_l{l}"),
            row.zero_mass,
            envelope,
            SLACK,
            format!("l/2^l + Z0/2^l; delta = {delta:e}"),
        );
        report.upper(&format!("lp_step_l{l}"), row.lp_step, allowed, 0.0, "2^-(l+1) budget");
        trace.push(row);
    }

    let drift = pass.drift_p(&g).as_f64().powf(1.0 / p);
    report.upper("drift", drift, params.budget, 0.0, format!("|G - F|_p; sum of steps = {total_step:e}"));
    report.upper("volume", g.volume_error().as_f64(), 1e-12, 0.0, "|sum of slab volumes - 1|");
    let min_det = g.stats(p).min_det;
    report.push("final_min_det", min_det, 0.0, min_det > 0.0, "min det over all slabs");
    Ok(RepairOutcome { field: g, trace, report })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub phase: &'static str,
    pub l: usize,
    pub field_energy: f64,
    pub ym_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyComparison<T, const D: usize> {
    pub rows: Vec<EnergyRow>,
    pub weak: RepairOutcome<T, D>,
    pub strict: RepairOutcome<T, D>,
    /// `|I(G_final) − I^{YM}|`
    pub final_gap: f64,
}

impl<T, const D: usize> EnergyComparison<T, D> {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,l,field_energy,ym_energy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:?},{:?}\n", r.phase, r.l, r.field_energy, r.ym_energy));
        }
        out
    }
}

/// Runs the weak then the strict repair while tracking `∫ f` on the field
/// and on the laminates each iteration builds.
pub fn energy_compare<T: Scalar, const D: usize>(
    f0: &GradientField<T, D>,
    integrand: Integrand<T>,
    weak: &WeakParams<T>,
    strict: &StrictParams<T>,
) -> Result<EnergyComparison<T, D>, FieldError> {
    let weak = weak_repair(f0, &WeakParams { track: vec![integrand], ..weak.clone() })?;
    let strict = strict_repair(&weak.field, &StrictParams { track: vec![integrand], ..strict.clone() })?;
    let mut rows = Vec::new();
    for (phase, out) in [("weak", &weak), ("strict", &strict)] {
        for r in &out.trace {
            rows.push(EnergyRow { phase, l: r.l, field_energy: r.energies[0], ym_energy: r.ym_energies[0] });
        }
    }
    let last = rows.last().expect("row 0 is always present");
    let final_gap = (last.field_energy - last.ym_energy).abs();
    Ok(EnergyComparison { rows, weak, strict, final_gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    type M2 = Mat<f64, 2>;
    type F2 = GradientField<f64, 2>;

    fn reflection() -> M2 {
        M2::diag([-1.0, 1.0])
    }

    #[test]
    fn constant_field_shares_one_cell() {
        let f = F2::constant(reflection(), 16).unwrap();
        assert_eq!(f.cells().count(), 256);
        assert_eq!(f.stored_slab_count(), 1);
        assert!(f.cells().all(|c| c.slabs[0].matrix == reflection()));
    }

    #[test]
    fn stats_of_simple_fields() {
        let s = F2::constant(reflection(), 4).unwrap().stats(1.5);
        assert_eq!((s.neg_mass, s.det_deficiency), (1.0, 1.0));
        let s = F2::constant(M2::identity(), 4).unwrap().stats(1.5);
        assert_eq!((s.neg_mass, s.det_deficiency), (0.0, 0.0));
        let mats = (0..16).map(|i| if i % 2 == 0 { reflection() } else { M2::identity() }).collect();
        let s = F2::from_matrices(4, mats).unwrap().stats(1.5);
        assert_eq!((s.neg_mass, s.det_deficiency), (0.5, 0.5));
    }

    #[test]
    fn random_generator_is_deterministic() {
        let g = Generator::parse("random:0.3").unwrap();
        let a = F2::generate(&g, 32, 7).unwrap();
        let b = F2::generate(&g, 32, 7).unwrap();
        assert_eq!(a, b);
        let neg = a.stats(1.5).neg_mass;
        assert!((neg - 0.3).abs() < 0.06, "{neg}");
        assert_ne!(a, F2::generate(&g, 32, 8).unwrap());
    }

    #[test]
    fn vortex_has_negative_region() {
        let f = F2::generate(&Generator::parse("vortex").unwrap(), 32, 0).unwrap();
        let s = f.stats(1.5);
        assert!(s.neg_mass > 0.0 && s.neg_mass < 1.0, "{s:?}");
        let m = vortex_jacobian(0.2, [0.25, 0.25]);
        assert!((m.determinant() - (1.0 - 0.04 * std::f64::consts::PI.powi(4))).abs() < 1e-12);
    }

    #[test]
    fn generator_tags() {
        assert!(matches!(Generator::<f64, 2>::parse("swirl"), Err(FieldError::UnknownGenerator(_))));
        assert!(Generator::<f64, 2>::parse("random:1.5").is_err());
        assert_eq!(
            Generator::<f64, 2>::parse("constant:[[1,2],[3,4]]").unwrap(),
            Generator::Constant(M2::from_rows([[1.0, 2.0], [3.0, 4.0]]))
        );
        assert!(F2::constant(M2::identity(), 300).is_err());
    }

    #[test]
    fn weak_repair_leaves_identity_alone() {
        let f = F2::constant(M2::identity(), 4).unwrap();
        let out = weak_repair(&f, &WeakParams::new(1.5, 3)).unwrap();
        assert_eq!(out.field, f);
        assert_eq!(out.trace.len(), 1);
        let r = &out.trace[0];
        assert_eq!([r.neg_mass, r.zero_mass, r.det_deficiency, r.lp_step, r.changed_on_good], [0.0; 5]);
    }

    #[test]
    fn weak_repair_reflection_two_levels() {
        let f = F2::constant(reflection(), 4).unwrap();
        let out = weak_repair(&f, &WeakParams::new(1.5, 2)).unwrap();
        for (l, row) in out.trace.iter().enumerate() {
            assert!(row.det_deficiency <= 2f64.powf(-1.5 * l as f64) * (1.0 + 1e-9));
        }
        assert_eq!(out.trace[1].schedule, 6.0);
        assert_eq!(out.trace[2].neg_mass, 2f64.powi(-12));
        for c in &out.report.checks {
            assert_eq!(c.pass, c.id != "final_neg_mass", "{c:?}");
        }
        assert!(out.trace[2].zero_mass > 0.99);
    }

    #[test]
    fn weak_repair_never_touches_good_cells() {
        let mats =
            (0..16).map(|i| if i < 8 { reflection() } else { M2::from_rows([[1.0, 0.3], [0.2, 2.0]]) }).collect();
        let f = F2::from_matrices(4, mats).unwrap();
        let out = weak_repair(&f, &WeakParams::new(1.5, 1)).unwrap();
        assert_eq!(out.trace[1].changed_on_good, 0.0);
        for i in 8..16 {
            assert_eq!(out.field.cell(i).slabs, f.cell(i).slabs);
        }
    }

    #[test]
    fn strict_repair_rejects_negative_input() {
        let f = F2::constant(reflection(), 2).unwrap();
        assert!(matches!(strict_repair(&f, &StrictParams::new(1.5, 2)), Err(FieldError::NotWeaklyOriented(_))));
    }

    #[test]
    fn strict_repair_identity_is_noop() {
        let f = F2::constant(M2::identity(), 4).unwrap();
        let out = strict_repair(&f, &StrictParams::new(1.5, 3)).unwrap();
        assert_eq!(out.field, f);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn strict_repair_zero_field_halves_zero_mass() {
        let f = F2::constant(M2::zeros(), 4).unwrap();
        let out = strict_repair(&f, &StrictParams::new(1.5, 3)).unwrap();
        for (l, row) in out.trace.iter().enumerate() {
            assert!(row.zero_mass <= (l as f64 + 1.0) / 2f64.powi(l as i32) + 1e-12, "{row:?}");
        }
        let total: f64 = out.trace.iter().map(|r| r.lp_step).sum();
        assert!(total <= 1.0);
        assert!(out.field.volume_error() < 1e-12);
    }

    #[test]
    fn field_document_round_trip() {
        let f = F2::constant(reflection(), 2).unwrap();
        let out = weak_repair(&f, &WeakParams::new(1.5, 1)).unwrap();
        let json = serde_json::to_string(&out.field.to_doc()).unwrap();
        let back = F2::from_doc(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.stats(1.5), out.field.stats(1.5));
        let plain = serde_json::to_string(&f.to_doc()).unwrap();
        assert_eq!(plain, "{\"d\":2,\"n\":2,\"cells\":[[[-1.0,0.0],[0.0,1.0]],[[-1.0,0.0],[0.0,1.0]],[[-1.0,0.0],[0.0,1.0]],[[-1.0,0.0],[0.0,1.0]]]}");
    }

    #[test]
    fn trace_csv_header() {
        let f = F2::constant(M2::identity(), 2).unwrap();
        let out = weak_repair(&f, &WeakParams::new(1.5, 1)).unwrap();
        assert_eq!(
            trace_to_csv(&out.trace),
            "l,neg_mass,zero_mass,det_deficiency,lp_step,changed_on_good\n0,0.0,0.0,0.0,0.0,0.0\n"
        );
    }
}
