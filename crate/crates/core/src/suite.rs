//! The acceptance battery: ten criteria, each timed and reported as
//! measured value against bound.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::delta_shift::{build_delta_laminate, verify_delta};
use crate::field::{energy_compare, strict_repair, weak_repair, GradientField, StrictParams, WeakParams};
use crate::laminate::{Integrand, Laminate};
use crate::matrix::Mat;
use crate::realization::realize_laminate;
use crate::zero_det::{build_zero_det_laminate, rigidity_scan, verify_geometry};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    pub seconds: f64,
    pub time_limit: f64,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {}: measured {:e} vs bound {:e} ({:.2}s of {}s) {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.bound,
            self.seconds,
            self.time_limit,
            self.detail
        )
    }
}

pub fn summary_csv(results: &[CriterionResult]) -> String {
    let mut out = String::from("criterion,measured,bound,pass\n");
    for r in results {
        out.push_str(&format!("{},{:?},{:?},{}\n", r.id, r.measured, r.bound, r.pass));
    }
    out
}

/// Random `D × D` matrix with standard normal entries and `det < 0`
/// (the first row is negated when needed).
pub fn negative_det_matrix<const D: usize>(seed: u64) -> Mat<f64, D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m = Mat::<f64, D>::zeros();
        for i in 0..D {
            for j in 0..D {
                m[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let det = m.determinant();
        if det == 0.0 {
            continue;
        }
        if det > 0.0 {
            for j in 0..D {
                m[(0, j)] = -m[(0, j)];
            }
        }
        return m;
    }
}

fn random_rotation<const D: usize>(rng: &mut ChaCha8Rng) -> Mat<f64, D> {
    // Gram–Schmidt on a Gaussian matrix, then fix the orientation.
    let mut q = Mat::<f64, D>::zeros();
    for k in 0..D {
        let mut v: [f64; D] = std::array::from_fn(|_| rng.sample(StandardNormal));
        for j in 0..k {
            let c = q.col(j);
            let dot: f64 = (0..D).map(|i| v[i] * c[i]).sum();
            for i in 0..D {
                v[i] -= dot * c[i];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.set_col(k, &v.map(|x| x / norm));
    }
    if q.determinant() < 0.0 {
        let c = q.col(0).map(|x| -x);
        q.set_col(0, &c);
    }
    q
}

/// Matrix `P·diag(θ)·Qᵀ` with random rotations and signed singular values
/// spread log-uniformly over `[10⁻⁴, 10]`; about a quarter of the entries of
/// `θ` are exactly zero.
pub fn spread_matrix<const D: usize>(seed: u64) -> Mat<f64, D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_rotation::<D>(&mut rng);
    let q = random_rotation::<D>(&mut rng);
    let theta: [f64; D] = std::array::from_fn(|_| {
        if rng.random::<f64>() < 0.25 {
            0.0
        } else {
            let mag = 10f64.powf(rng.random_range(-4.0..1.0));
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        }
    });
    p * Mat::diag(theta) * q.transpose()
}

fn timed(id: usize, name: &'static str, limit: f64, f: impl FnOnce() -> (f64, f64, bool, String)) -> CriterionResult {
    let start = Instant::now();
    let (measured, bound, ok, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    CriterionResult { id, name, measured, bound, pass: ok && seconds < limit, seconds, time_limit: limit, detail }
}

const CORPUS: u64 = 200;
const LEVELS: usize = 10;

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

fn worst_over_corpus<const D: usize>(f: impl Fn(Mat<f64, D>) -> f64 + Sync) -> f64 {
    (0..CORPUS).into_par_iter().map(|s| f(negative_det_matrix::<D>(s))).reduce(|| 0.0, f64::max)
}

pub fn bad_mass_law() -> CriterionResult {
    timed(1, "bad-mass law", 10.0, || {
        fn dev<const D: usize>(m: Mat<f64, D>) -> f64 {
            (1..=LEVELS)
                .map(|j| {
                    let b = build_zero_det_laminate(&m, j).expect("corpus matrix");
                    (b.laminate.statistics(1.0, 1.0).mass_det_neg - 0.5f64.powi(j as i32)).abs()
                })
                .fold(0.0, f64::max)
        }
        let worst = worst_over_corpus::<2>(dev).max(worst_over_corpus::<3>(dev));
        (worst, 1e-15, worst <= 1e-15, format!("|mass_det_neg - 2^-j| over {} matrices, j = 1..{LEVELS}", 2 * CORPUS))
    })
}

pub fn barycenter_and_det_linearity() -> CriterionResult {
    timed(2, "barycenter and det linearity", 10.0, || {
        fn dev<const D: usize>(m: Mat<f64, D>) -> f64 {
            (1..=LEVELS)
                .map(|j| {
                    let lam = build_zero_det_laminate(&m, j).expect("corpus matrix").laminate;
                    let bary = (lam.barycenter() - m).frobenius_norm() / m.frobenius_norm();
                    let det = rel(lam.energy(&Integrand::Det), m.determinant());
                    bary.max(det)
                })
                .fold(0.0, f64::max)
        }
        let worst = worst_over_corpus::<2>(dev).max(worst_over_corpus::<3>(dev));
        (worst, 1e-8, worst <= 1e-8, "max relative error of [nu_j] and of the det integral".into())
    })
}

pub fn moment_bounds() -> CriterionResult {
    timed(3, "moment bounds with proof constants", 30.0, || {
        fn ratio<const D: usize>(m: Mat<f64, D>) -> f64 {
            let ps = [1.0, 1.25, 1.5, D as f64 - 0.1];
            (1..=LEVELS)
                .map(|j| {
                    let b = build_zero_det_laminate(&m, j).expect("corpus matrix");
                    ps.iter()
                        .map(|&p| {
                            let rep = verify_geometry(&b, &m, p).expect("p < d");
                            ["c_centered_moment", "d_raw_moment"]
                                .iter()
                                .map(|id| {
                                    let c = rep.get(id).expect("check present");
                                    if c.pass {
                                        c.measured / c.bound
                                    } else {
                                        f64::INFINITY
                                    }
                                })
                                .fold(0.0, f64::max)
                        })
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        }
        let worst = worst_over_corpus::<2>(ratio).max(worst_over_corpus::<3>(ratio));
        (worst, 1.0, worst <= 1.0, "max measured/bound over checks (c), (d)".into())
    })
}

pub fn bad_determinant_growth() -> CriterionResult {
    timed(4, "bad-determinant growth", 5.0, || {
        fn dev<const D: usize>(m: Mat<f64, D>) -> f64 {
            let b = build_zero_det_laminate(&m, LEVELS).expect("corpus matrix");
            let det0 = m.determinant().abs();
            b.per_level
                .iter()
                .map(|r| {
                    let want = 2f64.powi(r.level as i32) * det0;
                    rel(r.bad_det_min, want).max(rel(r.bad_det_max, want))
                })
                .fold(0.0, f64::max)
        }
        let worst = worst_over_corpus::<2>(dev).max(worst_over_corpus::<3>(dev));
        (worst, 1e-8, worst <= 1e-8, "max relative error of |det| on bad atoms per level".into())
    })
}

pub fn rigidity() -> CriterionResult {
    timed(5, "rigidity at p = d", 5.0, || {
        let m0 = Mat::<f64, 2>::diag([-1.0, 1.0]);
        let js: Vec<usize> = (1..=14).collect();
        let rows = rigidity_scan(&m0, &[2.0, 1.5], &js).expect("negative determinant");
        let crit: Vec<_> = rows.iter().filter(|r| r.p == 2.0).collect();
        let first = crit[0].increment;
        let min_inc = crit.iter().skip(1).map(|r| r.increment).fold(f64::INFINITY, f64::min);
        let sub: Vec<_> = rows.iter().filter(|r| r.p == 1.5).collect();
        let r = 2f64.powf(-0.25);
        let tail: Vec<f64> = sub.windows(2).skip(sub.len() - 4).map(|w| w[1].increment / w[0].increment).collect();
        let ratio_err = tail.iter().map(|q| (q / r - 1.0).abs()).fold(0.0, f64::max);
        let growth_ok = min_inc >= 0.5 * first;
        let ratio_ok = ratio_err <= 0.1;
        (
            min_inc,
            0.5 * first,
            growth_ok && ratio_ok,
            format!(
                "p=2: min increment over j=2..14 vs half the first; p=1.5: tail ratios {:?} vs r = {r:.6} (worst rel. error {ratio_err:.4}, {})",
                tail.iter().map(|q| (q * 1e6).round() / 1e6).collect::<Vec<_>>(),
                if ratio_ok { "ok" } else { "FAIL" }
            ),
        )
    })
}

pub fn delta_suite() -> CriterionResult {
    timed(6, "delta-shift checks", 10.0, || {
        fn one<const D: usize>(seed: u64, delta: f64, p: f64) -> Option<String> {
            let m0 = if seed.is_multiple_of(2) {
                spread_matrix::<D>(seed)
            } else {
                negative_det_matrix::<D>(seed).scale(delta)
            };
            let b = match build_delta_laminate(&m0, delta) {
                Ok(b) => b,
                Err(e) => return Some(format!("seed {seed} d {D}: {e}")),
            };
            let rep = match verify_delta(&b, &m0, delta, p) {
                Ok(r) => r,
                Err(e) => return Some(format!("seed {seed} d {D}: {e}")),
            };
            let hm = b.laminate.validate_hm().pass;
            if rep.all_pass() && hm {
                None
            } else {
                Some(format!(
                    "seed {seed} d {D} delta {delta}: {}",
                    rep.checks.iter().filter(|c| !c.pass).map(|c| c.id.as_str()).collect::<Vec<_>>().join("/")
                ))
            }
        }
        let deltas = [1e-3, 1e-2, 1e-1, 1.0];
        let ps = [1.0, 1.5, 2.0, 3.0];
        let failures: Vec<String> = (0..500u64)
            .into_par_iter()
            .filter_map(|i| {
                let delta = deltas[(i / 3 % 4) as usize];
                let p = ps[(i / 12 % 4) as usize];
                match i % 3 {
                    0 => one::<2>(i, delta, p),
                    1 => one::<3>(i, delta, p),
                    _ => one::<4>(i, delta, p),
                }
            })
            .collect();
        fn equality<const D: usize>(delta: f64, p: f64) -> f64 {
            let z = Mat::<f64, D>::zeros();
            let b = build_delta_laminate(&z, delta).expect("positive delta");
            let c = verify_delta(&b, &z, delta, p).expect("matching inputs");
            let iv = c.get("iv_centered_moment").expect("check present");
            if iv.pass {
                rel(iv.measured, iv.bound)
            } else {
                f64::INFINITY
            }
        }
        let mut eq = 0.0f64;
        for delta in deltas {
            for p in [1.0, 1.5, 2.0] {
                eq = eq.max(equality::<2>(delta, p)).max(equality::<3>(delta, p)).max(equality::<4>(delta, p));
            }
        }
        let ok = failures.is_empty() && eq <= 1e-12;
        (
            failures.len() as f64,
            0.0,
            ok,
            format!("failing pairs out of 500 (first: {:?}); M0 = 0 equality rel. error {eq:e}", failures.first()),
        )
    })
}

pub fn weak_repair_criterion() -> CriterionResult {
    timed(7, "weak repair", 60.0, || {
        let f = GradientField::constant(Mat::<f64, 2>::diag([-1.0, 1.0]), 4).expect("grid");
        let out = weak_repair(&f, &WeakParams::new(1.5, 3)).expect("repair runs");
        let sub = |prefix: &str| out.report.checks.iter().filter(|c| c.id.starts_with(prefix)).all(|c| c.pass);
        let deficiency = sub("deficiency_l");
        let drift = sub("drift");
        let mixed: Vec<Mat<f64, 2>> = (0..16)
            .map(|i| if i % 3 == 0 { Mat::diag([-1.0, 1.0]) } else { Mat::from_rows([[1.0, 0.4], [-0.2, 2.0]]) })
            .collect();
        let mixed = GradientField::from_matrices(4, mixed).expect("grid");
        let mixed_out = weak_repair(&mixed, &WeakParams::new(1.5, 3)).expect("repair runs");
        let untouched = mixed_out.trace.iter().all(|r| r.changed_on_good == 0.0)
            && (0..16).filter(|i| i % 3 != 0).all(|i| mixed_out.field.cell(i).slabs == mixed.cell(i).slabs);
        let neg = out.trace.last().expect("row").neg_mass;
        let drift_check = out.report.get("drift").expect("drift");
        (
            neg,
            0.0,
            neg == 0.0 && deficiency && drift && untouched,
            format!(
                "final neg_mass (must be 0); deficiency <= 2^-lp D0 at every l: {deficiency}; |G-F|_p^p = {:.6} <= C_geom D0 = {:.6}: {drift}; compliant cells untouched: {untouched}",
                drift_check.measured, drift_check.bound
            ),
        )
    })
}

pub fn strict_repair_criterion() -> CriterionResult {
    timed(8, "strict repair", 120.0, || {
        let f = GradientField::constant(Mat::<f64, 2>::zeros(), 4).expect("grid");
        let out = strict_repair(&f, &StrictParams::new(1.5, 5)).expect("repair runs");
        let envelope = out.report.checks.iter().filter(|c| c.id.starts_with("zero_mass_l")).all(|c| c.pass);
        let drift = out.report.get("drift").expect("drift");
        let min_det = out.report.get("final_min_det").expect("min det");
        (
            min_det.measured,
            0.0,
            min_det.pass && envelope && drift.pass,
            format!(
                "final min det (must be > 0); zero_mass within l/2^l + Z0/2^l: {envelope}; drift {:.6} <= budget {}: {}",
                drift.measured, drift.bound, drift.pass
            ),
        )
    })
}

pub fn realization_fidelity() -> CriterionResult {
    timed(9, "realization fidelity", 10.0, || {
        let lam: Laminate<f64, 2> =
            build_zero_det_laminate(&Mat::diag([-1.0, 1.0]), 1).expect("negative determinant").laminate;
        let depth = lam.depth();
        let mut worst_ratio = 0.0f64;
        let mut worst_cont = 0.0f64;
        let mut parts = Vec::new();
        for eps in [0.2, 0.1, 0.05] {
            let map = realize_laminate(&lam, depth, eps, 8).expect("depth within cap");
            let tv = map.tv_distance(&lam);
            let cont = map.continuity_residual();
            worst_ratio = worst_ratio.max(tv / (2.0 * eps * depth as f64));
            worst_cont = worst_cont.max(cont);
            parts.push(format!("eps {eps}: tv {tv:.5}"));
        }
        (
            worst_ratio,
            1.0,
            worst_ratio <= 1.0 && worst_cont <= 1e-12,
            format!("max tv/(2 eps depth); {}; continuity residual {worst_cont:e} <= 1e-12", parts.join(", ")),
        )
    })
}

pub fn energy_tracking() -> CriterionResult {
    timed(10, "energy tracking", 60.0, || {
        let f = GradientField::constant(Mat::<f64, 2>::diag([-1.0, 1.0]), 4).expect("grid");
        let weak = WeakParams::new(1.5, 2);
        let strict = StrictParams::new(1.5, 2);
        let pn = energy_compare(&f, Integrand::PNorm(2.0), &weak, &strict).expect("pipeline runs");
        let det = energy_compare(&f, Integrand::Det, &weak, &strict).expect("pipeline runs");
        let det_dev =
            det.rows.iter().map(|r| (r.field_energy + 1.0).abs().max((r.ym_energy + 1.0).abs())).fold(0.0, f64::max);
        (
            pn.final_gap,
            1e-10,
            pn.final_gap <= 1e-10 && det_dev <= 1e-10,
            format!(
                "|I(G_final) - I_YM| for pnorm:2; det integral deviation from -1 over {} iterations: {det_dev:e}",
                det.rows.len()
            ),
        )
    })
}

/// Runs all ten criteria in order.
pub fn run_all() -> Vec<CriterionResult> {
    vec![
        bad_mass_law(),
        barycenter_and_det_linearity(),
        moment_bounds(),
        bad_determinant_growth(),
        rigidity(),
        delta_suite(),
        weak_repair_criterion(),
        strict_repair_criterion(),
        realization_fidelity(),
        energy_tracking(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_matrices_have_negative_determinant() {
        for s in 0..50 {
            assert!(negative_det_matrix::<2>(s).determinant() < 0.0);
            assert!(negative_det_matrix::<3>(s).determinant() < 0.0);
        }
        assert_eq!(negative_det_matrix::<3>(9), negative_det_matrix::<3>(9));
    }

    #[test]
    fn spread_matrices_use_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_rotation::<4>(&mut rng);
        assert!(q.is_special_orthogonal(1e-12));
        assert!(spread_matrix::<3>(1).is_finite());
    }
}
