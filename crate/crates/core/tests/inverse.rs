use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mbfg::dynamics::{compute_r, solve_position_problem};
use mbfg::pipelines::{
    max_position_violation, oracle_forward, run_inverse, ForceSchedule, InverseConfig, InverseRun,
    OracleConfig,
};
use mbfg::reference::{fourbar, initial_guess, theta_ref};
use mbfg::{LinearSolver, Mechanism};
use nalgebra::{DMatrix, DVector};

/// Crank torque that makes the four-bar follow `theta_ref` exactly, from the
/// augmented system `M q̈ = F_g + Φ_qᵀ λ + τ e_θ` on the analytic motion.
fn kkt_torque(mech: &Mechanism, t: f64, guess: &DVector<f64>) -> (f64, DVector<f64>) {
    let (th, w, a) = theta_ref(t);
    let q = solve_position_problem(mech.blocks(), guess, &[4], &DVector::from_element(1, th))
        .unwrap()
        .q;
    let pq = mech.kinematics(&q, None, None, None).phi_q.to_dense();
    let map = compute_r(&pq, &[4]).unwrap();
    let dq = &map.r * DVector::from_element(1, w);
    let c = mech.kinematics(&q, Some(&dq), None, None).c;
    let ddq = map.s_times(&c) + &map.r * DVector::from_element(1, a);
    let rhs = mech.mass_matrix() * &ddq - mech.gravity_forces(&q);
    // Unknowns (λ, τ): Φ_qᵀ λ + τ e_θ = M q̈ − F_g.
    let mut k = DMatrix::zeros(5, 5);
    k.view_mut((0, 0), (5, 4)).copy_from(&pq.transpose());
    k[(4, 4)] = 1.0;
    (k.lu().solve(&rhs).unwrap()[4], q)
}

fn crank_run(dt: f64) -> (Mechanism, InverseRun) {
    let mech = fourbar();
    let config = InverseConfig::crank_reference(&mech, dt, 5.0).unwrap();
    let run = run_inverse(&mech, &config).unwrap();
    (mech, run)
}

fn worst_torque_error(mech: &Mechanism, run: &InverseRun) -> f64 {
    let mut guess = initial_guess(mech);
    let mut worst: f64 = 0.0;
    for row in &run.trajectory.rows {
        let (tau, q) = kkt_torque(mech, row.t, &guess);
        guess = q;
        worst = worst.max((row.force.as_ref().unwrap()[4] - tau).abs());
    }
    worst
}

#[test]
fn crank_reference_tracks_and_matches_kkt_torque() {
    let (mech, run) = crank_run(1e-2);
    let tracking = run
        .trajectory
        .rows
        .iter()
        .map(|r| (r.q[4] - theta_ref(r.t).0).abs())
        .fold(0.0, f64::max);
    assert!(tracking < 1e-9, "tracking error {tracking}");
    assert!(max_position_violation(&mech, &run.trajectory) < 1e-9);
    // Trapezoidal rates carry an O(dt²) error into the accelerations.
    let err = worst_torque_error(&mech, &run);
    assert!(err < 1e-3, "torque error {err}");
    for row in &run.trajectory.rows {
        let f = row.force.as_ref().unwrap();
        assert!(
            f.rows(0, 4).amax() < 1e-6,
            "passive slots must stay at zero"
        );
    }
}

#[test]
fn torque_converges_with_the_step() {
    let (mech, coarse) = crank_run(1e-2);
    let (_, fine) = crank_run(2e-3);
    let (ec, ef) = (
        worst_torque_error(&mech, &coarse),
        worst_torque_error(&mech, &fine),
    );
    assert!(ef < ec / 10.0, "coarse {ec}, fine {ef}");
}

#[test]
fn static_reference_holds_crank_against_gravity() {
    let mech = fourbar();
    let zero = || DVector::zeros(1);
    let config =
        InverseConfig::from_reference_fn(&mech, 1e-2, 0.5, |_| (zero(), zero(), zero())).unwrap();
    let run = run_inverse(&mech, &config).unwrap();
    for row in &run.trajectory.rows {
        // Virtual work: τ = g Σ mᵢ ∂y_cm,i/∂θ = 9.8 · 4.5.
        assert_abs_diff_eq!(row.force.as_ref().unwrap()[4], 44.1, epsilon = 1e-6);
    }
}

#[test]
fn qr_and_cholesky_agree() {
    let mech = fourbar();
    let mut config = InverseConfig::crank_reference(&mech, 2e-2, 1.0).unwrap();
    let a = run_inverse(&mech, &config).unwrap();
    config.lm.linear_solver = LinearSolver::Qr;
    let b = run_inverse(&mech, &config).unwrap();
    for (ra, rb) in a.trajectory.rows.iter().zip(&b.trajectory.rows) {
        assert_abs_diff_eq!(
            ra.force.as_ref().unwrap()[4],
            rb.force.as_ref().unwrap()[4],
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(ra.q.clone(), rb.q.clone(), epsilon = 1e-10);
    }
}

/// Largest `|R(q)ᵀ Q|` of a fully actuated inverse solve that follows the
/// passive fall of the four-bar from rest.
fn passive_effective_force(dt: f64, t_end: f64) -> f64 {
    let mech = fourbar();
    let q0 = initial_guess(&mech);
    let passive = oracle_forward(
        &mech,
        &q0,
        &DVector::zeros(5),
        &OracleConfig::for_grid(dt, t_end),
    )
    .unwrap();
    let rows = passive.rows.clone();
    let mut config = InverseConfig::from_reference_fn(&mech, dt, t_end, |t| {
        let r = &rows[(t / dt).round() as usize];
        (
            r.q.rows(4, 1).into(),
            r.dq.rows(4, 1).into(),
            r.ddq.rows(4, 1).into(),
        )
    })
    .unwrap();
    config.actuated = (0..5).collect();
    let run = run_inverse(&mech, &config).unwrap();
    let mut worst: f64 = 0.0;
    for row in &run.trajectory.rows {
        // Only the part of Q along the motion subspace does work; the rest is
        // absorbed by constraint reactions and cannot be identified.
        let pq = mech.kinematics(&row.q, None, None, None).phi_q.to_dense();
        let r = compute_r(&pq, &[4]).unwrap().r;
        worst = worst.max((r.transpose() * row.force.as_ref().unwrap()).amax());
    }
    worst
}

#[test]
fn fully_actuated_passive_motion_needs_no_effective_force() {
    let fine = passive_effective_force(2e-4, 0.4);
    assert!(fine < 1e-4, "effective force {fine}");
    // The residual is the trapezoidal rate error: second order in dt.
    let coarse = passive_effective_force(1e-3, 0.4);
    assert!(coarse / fine > 15.0, "coarse {coarse}, fine {fine}");
}

/// Forward replay of a torque table, linearly interpolated between samples.
fn replay(mech: &Mechanism, dt: f64, tau: Vec<f64>) -> Vec<(f64, f64)> {
    let tau = Arc::new(tau);
    let last = tau.len() - 1;
    let schedule = ForceSchedule::Function(Arc::new(move |t: f64| {
        let s = (t / dt).clamp(0.0, last as f64);
        let k = (s.floor() as usize).min(last.saturating_sub(1));
        let w = s - k as f64;
        let mut f = DVector::zeros(5);
        f[4] = tau[k] * (1.0 - w) + tau[(k + 1).min(last)] * w;
        f
    }));
    let config = OracleConfig {
        external: schedule,
        ..OracleConfig::for_grid(dt, 5.0)
    };
    let traj = oracle_forward(mech, &initial_guess(mech), &DVector::zeros(5), &config).unwrap();
    traj.rows
        .iter()
        .map(|r| (r.t, (r.q[4] - theta_ref(r.t).0).abs()))
        .collect()
}

fn worst_until(drift: &[(f64, f64)], t_max: f64) -> f64 {
    drift
        .iter()
        .filter(|d| d.0 <= t_max + 1e-9)
        .map(|d| d.1)
        .fold(0.0, f64::max)
}

#[test]
fn recovered_torque_reproduces_the_reference_forward() {
    let (mech, run) = crank_run(1e-3);
    let tau = run
        .trajectory
        .rows
        .iter()
        .map(|r| r.force.as_ref().unwrap()[4])
        .collect();
    let drift = replay(&mech, 1e-3, tau);
    let worst = worst_until(&drift, 2.5);
    assert!(
        worst < 5e-3,
        "open-loop drift {worst} before the crank-up peak"
    );
}

#[test]
fn open_loop_replay_diverges_even_with_the_exact_torque() {
    // Past the crank-up peak the reference motion is unstable, so any
    // integration error grows by orders of magnitude before t = 5 s.
    let mech = fourbar();
    let dt = 1e-3;
    let mut guess = initial_guess(&mech);
    let tau = (0..=5000)
        .map(|k| {
            let (tau, q) = kkt_torque(&mech, k as f64 * dt, &guess);
            guess = q;
            tau
        })
        .collect();
    let drift = replay(&mech, dt, tau);
    assert!(worst_until(&drift, 1.0) < 1e-6);
    assert!(worst_until(&drift, 5.0) > 5e-3);
}
