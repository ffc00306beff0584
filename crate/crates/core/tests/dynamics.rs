mod common;

use std::f64::consts::PI;

use approx::assert_relative_eq;
use common::{
    closed_form_vs_augmented, dense_kkt, dv, formulation_gap, pendulum, point_pendulum,
    random_matrix, random_spd, short_rocker_fourbar, uniform,
};
use mbfg::checks::random_consistent_state;
use mbfg::dynamics::{
    accel_dep_parts, compute_r, forward_accel_dep, forward_accel_indep, solve_position_problem,
    solve_velocity_problem,
};
use mbfg::pipelines::{oracle_forward, OracleConfig};
use mbfg::reference::fourbar;
use mbfg::{Error, Mechanism};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn rest() -> DVector<f64> {
    dv(&[1.0, 0.0, 1.0, 2.0, 0.0])
}

#[test]
fn closed_form_equals_augmented_solve() {
    let gap = closed_form_vs_augmented(100, 17);
    assert!(gap < 1e-10, "relative gap {gap}");
}

#[test]
fn multipliers_close_the_equations_of_motion() {
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..100 {
        let (n, k) = (7, 3);
        let m = random_spd(&mut rng, n);
        let a = random_matrix(&mut rng, k, n);
        let f = uniform(&mut rng, n, 10.0);
        let c = uniform(&mut rng, k, 10.0);
        let res = accel_dep_parts(&m, &a, &f, &c).unwrap();
        assert!((&m * &res.ddq + a.transpose() * &res.lambda - &f).amax() < 1e-9);
        assert!((&a * &res.ddq - &c).amax() < 1e-9);
        assert_relative_eq!(res.gamma.clone(), res.gamma.transpose(), epsilon = 0.0);
    }
}

#[test]
fn formulations_agree_on_consistent_states() {
    let gap = formulation_gap(200, 23);
    assert!(gap < 1e-8, "gap {gap}");
}

#[test]
fn both_formulations_satisfy_the_acceleration_constraint() {
    let mech = fourbar();
    let mut rng = StdRng::seed_from_u64(31);
    for _ in 0..200 {
        let (q, dq) = random_consistent_state(&mech, &mut rng).unwrap();
        let kin = mech.kinematics(&q, Some(&dq), None, None);
        let f = mech.gravity_forces(&q);
        let dep = forward_accel_dep(mech.mass_matrix(), &kin, &f).unwrap().ddq;
        let indep = forward_accel_indep(mech.mass_matrix(), &kin, &[4], &f)
            .unwrap()
            .ddq();
        for ddq in [dep, indep] {
            let closure = kin.dphi_q.mul_vec(&dq) + kin.phi_q.mul_vec(&ddq);
            assert!(closure.amax() < 1e-9, "{closure}");
        }
    }
}

#[test]
fn point_pendulum_accelerations() {
    let mech = point_pendulum(1);
    let q = dv(&[2.0, 0.0]);
    let f = dv(&[0.0, -9.8]);
    for (dq, expected) in [
        (dv(&[0.0, 0.0]), dv(&[0.0, -9.8])),
        (dv(&[0.0, 1.0]), dv(&[-0.5, -9.8])),
    ] {
        let kin = mech.kinematics(&q, Some(&dq), None, None);
        let ddq = forward_accel_dep(mech.mass_matrix(), &kin, &f).unwrap().ddq;
        assert_relative_eq!(ddq, expected, epsilon = 1e-12);
        let (direct, _) = dense_kkt(mech.mass_matrix(), &kin.phi_q.to_dense(), &f, &kin.c);
        assert_relative_eq!(direct, expected, epsilon = 1e-12);
    }
    let kin = mech.kinematics(&q, Some(&dv(&[0.0, 0.0])), None, None);
    let indep = forward_accel_indep(mech.mass_matrix(), &kin, &[1], &f).unwrap();
    assert_relative_eq!(indep.ddz[0], -9.8, epsilon = 1e-12);
}

#[test]
fn velocity_maps() {
    let pend = point_pendulum(1);
    let pq = pend
        .kinematics(&dv(&[2.0, 0.0]), None, None, None)
        .phi_q
        .to_dense();
    assert_relative_eq!(
        compute_r(&pq, &[1]).unwrap().r,
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        epsilon = 1e-15
    );

    let mech = fourbar();
    let kin = mech.kinematics(&rest(), None, None, None);
    let pq = kin.phi_q.to_dense();
    let r = compute_r(&pq, &[4]).unwrap().r;
    assert_relative_eq!(
        r.column(0).into_owned(),
        dv(&[0.0, 1.0, 2.0 / 3.0, 1.0, 1.0]),
        epsilon = 1e-12
    );
    assert!((&pq * &r).amax() < 1e-10);

    assert_eq!(
        compute_r(&DMatrix::zeros(0, 3), &[0, 1, 2]).unwrap().r,
        DMatrix::identity(3, 3)
    );
}

#[test]
fn s_reproduces_constraint_velocities() {
    let mech = fourbar();
    let mut rng = StdRng::seed_from_u64(12);
    let (q, _) = random_consistent_state(&mech, &mut rng).unwrap();
    let pq = mech.kinematics(&q, None, None, None).phi_q.to_dense();
    let map = compute_r(&pq, &[4]).unwrap();
    let w = uniform(&mut rng, 4, 1.0);
    let dq = map.s_times(&w);
    assert!((&pq * &dq - &w).amax() < 1e-12);
    assert!(dq[4].abs() < 1e-12);
}

#[test]
fn fourbar_at_rest_falls_with_projected_gravity() {
    let mech = fourbar();
    let q = rest();
    let kin = mech.kinematics(&q, Some(&DVector::zeros(5)), None, None);
    let f = mech.gravity_forces(&q);
    let indep = forward_accel_indep(mech.mass_matrix(), &kin, &[4], &f).unwrap();
    // RᵀMR = 41/9 for R = (0, 1, 2/3, 1, 1); RᵀF = -44.1.
    assert_relative_eq!(indep.mbar[(0, 0)], 41.0 / 9.0, epsilon = 1e-12);
    assert_relative_eq!(indep.qbar[0], -44.1, epsilon = 1e-12);
    assert_relative_eq!(indep.ddz[0], -44.1 * 9.0 / 41.0, epsilon = 1e-12);
    let dep = forward_accel_dep(mech.mass_matrix(), &kin, &f).unwrap().ddq;
    assert_relative_eq!(dep[4], indep.ddz[0], epsilon = 1e-12);
}

#[test]
fn position_problem_examples() {
    let mech = fourbar();
    let sol = solve_position_problem(
        mech.blocks(),
        &dv(&[0.9, 0.1, 1.2, 1.8, 0.0]),
        &[4],
        &dv(&[0.0]),
    )
    .unwrap();
    assert_relative_eq!(sol.q, rest(), epsilon = 1e-12);
    assert!(mech.kinematics(&sol.q, None, None, None).phi.amax() < 1e-12);

    let again = solve_position_problem(mech.blocks(), &sol.q, &[4], &dv(&[0.0])).unwrap();
    assert!(again.iterations <= 1);
    assert_eq!(again.q, sol.q);
}

#[test]
fn infeasible_assembly_diverges() {
    let mech = short_rocker_fourbar();
    assert!(solve_position_problem(mech.blocks(), &rest(), &[4], &dv(&[0.0])).is_ok());
    let err = solve_position_problem(mech.blocks(), &rest(), &[4], &dv(&[PI])).unwrap_err();
    assert!(
        matches!(err, Error::PositionProblemDiverged { .. }),
        "expected divergence, got {err}"
    );
}

#[test]
fn velocity_problem_examples() {
    let mech = fourbar();
    let kin = mech.kinematics(&rest(), None, None, None);
    assert_eq!(
        solve_velocity_problem(&kin, &[4], &dv(&[0.0])).unwrap(),
        DVector::zeros(5)
    );
    let dq = solve_velocity_problem(&kin, &[4], &dv(&[1.0])).unwrap();
    assert_relative_eq!(dq, dv(&[0.0, 1.0, 2.0 / 3.0, 1.0, 1.0]), epsilon = 1e-12);
    assert!(kin.phi_q.mul_vec(&dq).amax() < 1e-12);

    let pend = point_pendulum(1);
    let kin = pend.kinematics(&dv(&[2.0, 0.0]), None, None, None);
    assert_eq!(
        solve_velocity_problem(&kin, &[1], &dv(&[1.0])).unwrap(),
        dv(&[0.0, 1.0])
    );
}

#[test]
fn bad_dof_choice_is_reported() {
    // z = y cannot parameterize a pendulum hanging straight down.
    let pend = point_pendulum(1);
    let kin = pend.kinematics(&dv(&[0.0, -2.0]), None, None, None);
    assert!(matches!(
        compute_r(&kin.phi_q.to_dense(), &[1]),
        Err(Error::BadDofChoice)
    ));
}

/// Time of the `k`-th upward zero crossing of `x`, by linear interpolation.
fn crossings(t: &[f64], x: &[f64]) -> Vec<f64> {
    (1..x.len())
        .filter(|&i| x[i - 1] < 0.0 && x[i] >= 0.0)
        .map(|i| t[i - 1] + (t[i] - t[i - 1]) * (-x[i - 1]) / (x[i] - x[i - 1]))
        .collect()
}

#[test]
fn compound_pendulum_small_angle_period() {
    // A uniform rod pivoted at one end swings like a point mass at 2L/3.
    let (l, a0) = (1.5, 0.05_f64);
    let q0 = [l * a0.sin(), -l * a0.cos()];
    let mech: Mechanism = pendulum("uniform-rod", 2.0, l, q0, 0);
    let traj = oracle_forward(
        &mech,
        &dv(&q0),
        &DVector::zeros(2),
        &OracleConfig::for_grid(1e-3, 6.0),
    )
    .unwrap();
    let t: Vec<f64> = traj.rows.iter().map(|r| r.t).collect();
    let x: Vec<f64> = traj.rows.iter().map(|r| r.q[0]).collect();
    let up = crossings(&t, &x);
    assert!(up.len() >= 2);
    let measured = (up[up.len() - 1] - up[0]) / (up.len() - 1) as f64;
    let expected = 2.0 * PI * (2.0 * l / 3.0 / 9.8).sqrt();
    assert!(
        (measured - expected).abs() < 0.01 * expected,
        "period {measured} vs {expected}"
    );
}

#[test]
fn oracle_energy_and_constraints_over_one_second() {
    let mech = fourbar();
    let traj = oracle_forward(
        &mech,
        &rest(),
        &DVector::zeros(5),
        &OracleConfig::for_grid(1e-3, 1.0),
    )
    .unwrap();
    let e0 = mech.total_energy(&traj.rows[0].q, &traj.rows[0].dq);
    for row in &traj.rows {
        assert!(mech.kinematics(&row.q, None, None, None).phi.amax() < 1e-10);
        assert!(((mech.total_energy(&row.q, &row.dq) - e0) / e0).abs() < 2e-2);
    }
}

#[test]
fn oracle_without_gravity_is_stationary() {
    let mech = fourbar().with_gravity(0.0);
    let traj = oracle_forward(
        &mech,
        &rest(),
        &DVector::zeros(5),
        &OracleConfig::for_grid(1e-2, 1.0),
    )
    .unwrap();
    for row in &traj.rows {
        assert!((&row.q - rest()).amax() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Accelerations respond linearly to the applied forces at a fixed state.
    #[test]
    fn accelerations_are_affine_in_the_force(seed in 0u64..1000, s in -3.0f64..3.0) {
        let mech = fourbar();
        let mut rng = StdRng::seed_from_u64(seed);
        let (q, dq) = random_consistent_state(&mech, &mut rng).unwrap();
        let kin = mech.kinematics(&q, Some(&dq), None, None);
        let m = mech.mass_matrix();
        let f = uniform(&mut rng, 5, 10.0);
        let zero = forward_accel_dep(m, &kin, &DVector::zeros(5)).unwrap().ddq;
        let one = forward_accel_dep(m, &kin, &f).unwrap().ddq;
        let scaled = forward_accel_dep(m, &kin, &(&f * s)).unwrap().ddq;
        prop_assert!((scaled - &zero - (one - &zero) * s).amax() < 1e-9);
    }
}
