//! Closed-form values worked out by hand for diagonal inputs, compared
//! against the library.

use laminate_core::suite::negative_det_matrix;
use laminate_core::{
    build_delta_laminate, build_zero_det_laminate, weak_repair, GeomParams, GradientField, Laminate, Mat, WeakParams,
};

/// All 2×2 minors vanish iff the matrix has rank at most one.
fn max_minor<const D: usize>(a: &Mat<f64, D>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..D {
        for k in i + 1..D {
            for j in 0..D {
                for l in j + 1..D {
                    worst = worst.max((a[(i, j)] * a[(k, l)] - a[(i, l)] * a[(k, j)]).abs());
                }
            }
        }
    }
    worst
}

/// Walks every split and checks the rank-one jump and the barycenter with
/// plain arithmetic.
fn check_tree<const D: usize>(lam: &Laminate<f64, D>) {
    use laminate_core::laminate::Node;
    for node in lam.nodes() {
        if let Node::Split { matrix, t, left, right } = node {
            let (a, b) = (lam.nodes()[*left].matrix(), lam.nodes()[*right].matrix());
            let jump = *a - *b;
            assert!(max_minor(&jump) <= 1e-9 * (1.0 + jump.max_abs()).powi(2), "jump not rank one");
            let mix = a.scale(*t) + b.scale(1.0 - *t);
            assert!(mix.max_abs_diff(matrix) <= 1e-12 * (1.0 + matrix.max_abs()));
            assert!(*t > 0.0 && *t < 1.0);
        }
    }
}

#[test]
fn splits_are_rank_one_and_barycentric() {
    for seed in 0..20 {
        check_tree(&build_zero_det_laminate(&negative_det_matrix::<2>(seed), 6).unwrap().laminate);
        check_tree(&build_zero_det_laminate(&negative_det_matrix::<3>(seed), 4).unwrap().laminate);
        check_tree(&build_delta_laminate(&negative_det_matrix::<4>(seed).scale(0.01), 0.1).unwrap().laminate);
    }
}

#[test]
fn geometric_constant_closed_form() {
    // p = 1.5, d = 2: r = 2^{-1/4}, prefactor (√2/(√2 − 1))^{3/2}.
    let r = 2f64.powf(-0.25);
    let pre = (2f64.sqrt() / (2f64.sqrt() - 1.0)).powf(1.5);
    for j in [1u32, 3, 10] {
        let want = pre * (1.0 / (1.0 - r) + r.powi(j as i32));
        assert!((GeomParams::new(1.5, 2, j as usize).c_geom() - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn first_level_of_a_reflection() {
    // diag(−1, 1) has γ = 1; adding ±(e1⊗e2) and ±(e2⊗e1) gives the four
    // children, the two with matching signs having det = −2.
    let lam = build_zero_det_laminate(&Mat::<f64, 2>::diag([-1.0, 1.0]), 1).unwrap().laminate;
    let mut got: Vec<[[f64; 2]; 2]> = lam.atoms().iter().map(|a| *a.matrix.rows()).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut want = vec![
        [[-1.0, 1.0], [1.0, 1.0]],
        [[-1.0, 1.0], [-1.0, 1.0]],
        [[-1.0, -1.0], [1.0, 1.0]],
        [[-1.0, -1.0], [-1.0, 1.0]],
    ];
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (g, w) in got.iter().zip(&want) {
        assert!(Mat::from_rows(*g).max_abs_diff(&Mat::from_rows(*w)) <= 1e-14, "{got:?}");
    }
}

#[test]
fn bad_atoms_of_a_reflection() {
    // Each bad atom splits into two bad and two good quarters, so level j has
    // 2^j bad atoms of weight 4^{-j} with |det| = 2^j, plus 2^{j+1} − 2 good
    // atoms on det = 0.
    let m = Mat::<f64, 2>::diag([-1.0, 1.0]);
    for j in 1..=10 {
        let lam = build_zero_det_laminate(&m, j).unwrap().laminate;
        let atoms = lam.atoms();
        let bad: Vec<_> = atoms.iter().filter(|a| a.matrix.determinant() < -0.5).collect();
        assert_eq!(bad.len(), 1 << j);
        for a in &bad {
            assert_eq!(a.weight, 0.25f64.powi(j as i32));
            assert!((a.matrix.determinant() + 2f64.powi(j as i32)).abs() <= 1e-9 * 2f64.powi(j as i32));
        }
        assert_eq!(atoms.len(), 3 * (1 << j) - 2);
        assert!(atoms.iter().filter(|a| a.matrix.determinant() >= -0.5).all(|a| a.matrix.determinant().abs() <= 1e-9));
    }
}

#[test]
fn delta_shift_of_zero() {
    // M0 = 0: every singular value is below δ, so all d directions shift by
    // ±2δ and each of the 2^d atoms has Frobenius norm 2δ√d.
    for delta in [1e-3, 0.25, 1.0] {
        let b = build_delta_laminate(&Mat::<f64, 3>::zeros(), delta).unwrap();
        let atoms = b.laminate.atoms();
        assert_eq!(atoms.len(), 8);
        for a in &atoms {
            assert_eq!(a.weight, 0.125);
            assert!((a.matrix.frobenius_norm() - 2.0 * delta * 3f64.sqrt()).abs() <= 1e-14);
            assert!((a.matrix.determinant().abs() - 8.0 * delta.powi(3)).abs() <= 1e-14);
        }
        let pos = atoms.iter().filter(|a| a.matrix.determinant() > 0.0).count();
        assert_eq!(pos, 4);
    }
}

#[test]
fn weak_repair_of_a_constant_reflection() {
    // With p = 1.5, d = 2 the level-j deficiency of one bad atom is
    // 2^{-j}·(2^j)^{3/4} = 2^{-j/4}; meeting 2^{-1.5 l} needs j = 6 per
    // iteration, applied again to the surviving bad slab.
    let f = GradientField::constant(Mat::<f64, 2>::diag([-1.0, 1.0]), 2).unwrap();
    let out = weak_repair(&f, &WeakParams::new(1.5, 3)).unwrap();
    for row in &out.trace[1..] {
        let l = row.l as i32;
        assert_eq!(row.schedule, 6.0);
        assert_eq!(row.neg_mass, 2f64.powi(-6 * l));
        assert!((row.det_deficiency - 2f64.powf(-1.5 * l as f64)).abs() <= 1e-12);
    }
    let min_det = out.field.stats(1.5).min_det;
    assert!((min_det + 2f64.powi(18)).abs() <= 1e-6 * 2f64.powi(18));
}
