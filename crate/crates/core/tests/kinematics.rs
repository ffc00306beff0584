mod common;

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

use approx::assert_relative_eq;
use common::{angle, block_kind_ratio, distance, dv, mobile_slider, uniform};
use mbfg::constraints::assemble;
use mbfg::reference::fourbar;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn every_block_kind_matches_finite_differences() {
    for kind in 0..4 {
        let ratio = block_kind_ratio(kind, 200, 40 + kind as u64);
        assert!(ratio <= 1.0, "block kind {kind}: worst ratio {ratio}");
    }
}

#[test]
fn constant_distance_examples() {
    let b = distance(5.0);
    let q = dv(&[0.0, 0.0, 3.0, 4.0]);
    let dq = dv(&[0.0, 0.0, 1.0, 0.0]);
    let e = b.eval(&q, Some(&dq), None, None);
    assert_eq!(e.phi, 0.0);
    assert_eq!(e.phi_q.to_dense(4), dv(&[-6.0, -8.0, 6.0, 8.0]));
    assert_eq!(e.dphi_q.to_dense(4), dv(&[-2.0, 0.0, 2.0, 0.0]));
    assert_eq!(e.phi_q.dot(&dq), 6.0);
}

#[test]
fn mobile_slider_example() {
    let e = mobile_slider().eval(&dv(&[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]), None, None, None);
    assert_eq!(e.phi, 0.0);
    assert_eq!(e.phi_q.to_dense(6), dv(&[-2.0, 2.0, 1.0, -1.0, 1.0, -1.0]));
}

#[test]
fn absolute_angle_branch_examples() {
    let b = angle(2.0);
    let up = b.eval(&dv(&[0.0, 0.0, 0.0, 2.0, FRAC_PI_2]), None, None, None);
    assert!(up.phi.abs() < 1e-15);
    assert_relative_eq!(
        up.phi_q.to_dense(5),
        dv(&[-1.0, 0.0, 1.0, 0.0, 2.0]),
        epsilon = 1e-15
    );
    let flat = b.eval(&dv(&[0.0, 0.0, 2.0, 0.0, 0.0]), None, None, None);
    assert_eq!(flat.phi, 0.0);
    assert_eq!(flat.phi_q.to_dense(5), dv(&[0.0, -1.0, 0.0, 1.0, -2.0]));
}

fn outer_sym(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose() + b * a.transpose()
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

#[test]
fn bilinear_blocks_match_closed_form_hessians() {
    let mut rng = StdRng::seed_from_u64(2);
    // Constant distance: Φ_qq = 2 [[I, -I], [-I, I]], Φ̇_qq = 0.
    let i2 = DMatrix::<f64>::identity(2, 2);
    let mut hd = DMatrix::zeros(4, 4);
    hd.view_mut((0, 0), (2, 2)).copy_from(&(&i2 * 2.0));
    hd.view_mut((2, 2), (2, 2)).copy_from(&(&i2 * 2.0));
    hd.view_mut((0, 2), (2, 2)).copy_from(&(&i2 * -2.0));
    hd.view_mut((2, 0), (2, 2)).copy_from(&(&i2 * -2.0));
    // Mobile slider Φ = (y - yi)(xj - xi) - (x - xi)(yj - yi) over
    // (x, y, xi, yi, xj, yj).
    let e = |i| unit(6, i);
    let (a, b) = (e(1) - e(3), e(4) - e(2));
    let (c, d) = (e(0) - e(2), e(5) - e(3));
    let hs = outer_sym(&a, &b) - outer_sym(&c, &d);
    for (block, h) in [(distance(1.5), hd), (mobile_slider(), hs)] {
        let n = h.nrows();
        for _ in 0..50 {
            let q = uniform(&mut rng, n, 3.0);
            let dq = uniform(&mut rng, n, 3.0);
            let ddq = uniform(&mut rng, n, 3.0);
            let ev = block.eval(&q, Some(&dq), Some(&ddq), Some(&dq));
            assert_relative_eq!(ev.phiqq_times_v.to_dense(n), &h * &ddq, epsilon = 1e-12);
            assert_relative_eq!(ev.dphi_q.to_dense(n), &h * &dq, epsilon = 1e-12);
            assert_eq!(ev.dotphiqq_times_v.to_dense(n), DVector::zeros(n));
        }
    }
}

#[test]
fn absolute_angle_branches_agree_at_the_switch() {
    let l = 1.5;
    let b = angle(l);
    for base in [FRAC_PI_4, 3.0 * FRAC_PI_4, -FRAC_PI_4, -3.0 * FRAC_PI_4] {
        for offset in [-1e-9, 1e-9] {
            let th: f64 = base + offset;
            let q = dv(&[0.3, -0.2, 0.3 + l * th.cos(), -0.2 + l * th.sin(), th]);
            assert!(b.eval(&q, None, None, None).phi.abs() < 1e-14);
        }
    }
}

#[test]
fn selected_angle_branch_is_never_degenerate() {
    let l = 1.5;
    let b = angle(l);
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..500 {
        let q = uniform(&mut rng, 5, 4.0);
        let slope = b.eval(&q, None, None, None).phi_q.to_dense(5)[4].abs();
        assert!(
            slope >= l * FRAC_1_SQRT_2 - 1e-12,
            "θ = {}: |∂Φ/∂θ| = {slope}",
            q[4]
        );
    }
}

#[test]
fn fourbar_assembles_at_rest() {
    let mech = fourbar();
    let q = dv(&[1.0, 0.0, 1.0, 2.0, 0.0]);
    let kin = mech.kinematics(&q, None, None, None);
    assert!(kin.phi.amax() < 1e-14);
    assert_eq!(kin.phi_q.nrows(), 4);
    assert_eq!(kin.dphi_q.to_dense(), DMatrix::zeros(4, 5));
    assert_eq!(kin.c, DVector::zeros(4));
    assert_eq!(kin.b, DVector::zeros(4));
}

#[test]
fn empty_block_list() {
    let kin = assemble(&[], 3, &DVector::zeros(3), None, None, None).unwrap();
    assert_eq!(kin.phi.len(), 0);
    assert_eq!(kin.phi_q.to_dense().shape(), (0, 3));
    assert_eq!(kin.c.len(), 0);
}

#[test]
fn duplicated_blocks_are_rejected() {
    let b = distance(1.0);
    assert!(assemble(&[b.clone(), b], 4, &DVector::zeros(4), None, None, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `Φ̇_q` is linear in `q̇`: zero velocity gives zero rows and `c = 0`.
    #[test]
    fn zero_velocity_gives_no_velocity_terms(q in proptest::collection::vec(-3.0f64..3.0, 5)) {
        let mech = fourbar();
        let q = DVector::from_vec(q);
        let kin = mech.kinematics(&q, Some(&DVector::zeros(5)), None, None);
        prop_assert_eq!(kin.dphi_q.to_dense(), DMatrix::zeros(4, 5));
        prop_assert_eq!(kin.c, DVector::zeros(4));
    }

    /// `Φ_qq·v` is linear in `v`.
    #[test]
    fn hessian_products_are_linear(
        q in proptest::collection::vec(-3.0f64..3.0, 5),
        v in proptest::collection::vec(-3.0f64..3.0, 5),
        s in -4.0f64..4.0,
    ) {
        let mech = fourbar();
        let (q, v) = (DVector::from_vec(q), DVector::from_vec(v));
        let one = mech.kinematics(&q, None, Some(&v), None).phiqq_v.to_dense();
        let scaled = mech.kinematics(&q, None, Some(&(&v * s)), None).phiqq_v.to_dense();
        prop_assert!((one * s - scaled).amax() < 1e-12);
    }

    /// `c = -Φ̇_q q̇` and `Φ̇_q = Φ_qq·q̇` on every row.
    #[test]
    fn velocity_terms_are_consistent(
        q in proptest::collection::vec(-3.0f64..3.0, 5),
        dq in proptest::collection::vec(-3.0f64..3.0, 5),
    ) {
        let mech = fourbar();
        let (q, dq) = (DVector::from_vec(q), DVector::from_vec(dq));
        let kin = mech.kinematics(&q, Some(&dq), Some(&dq), None);
        prop_assert!((kin.dphi_q.to_dense() - kin.phiqq_v.to_dense()).amax() < 1e-12);
        prop_assert!((kin.dphi_q.mul_vec(&dq) + &kin.c).amax() < 1e-12);
    }
}
