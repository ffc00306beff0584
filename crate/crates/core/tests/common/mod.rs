//! Helpers shared by the integration tests: small mechanisms, random
//! problem instances and finite-difference oracles.
#![allow(dead_code)]

use std::f64::consts::FRAC_1_SQRT_2;

use mbfg::checks::random_consistent_state;
use mbfg::constraints::{BlockKind, ConstraintBlock, Coord};
use mbfg::dynamics::{accel_dep_parts, forward_accel_dep, forward_accel_indep};
use mbfg::reference::fourbar;
use mbfg::{Mechanism, MechanismDef};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub fn mechanism(json: &str) -> Mechanism {
    Mechanism::from_def(MechanismDef::from_json_str(json).unwrap()).unwrap()
}

/// One rod from a fixed pivot at the origin to a mobile tip `(x, y)`.
pub fn pendulum(inertia: &str, mass: f64, length: f64, q0: [f64; 2], dof: usize) -> Mechanism {
    mechanism(&format!(
        r#"{{
          "points": [ {{ "id": "O", "fixed": true, "xy": [0, 0] }}, {{ "id": "P", "fixed": false }} ],
          "bodies": [ {{ "endpoints": ["O", "P"], "length": {length}, "mass": {mass}, "inertia_model": "{inertia}" }} ],
          "dof_idxs": [{dof}],
          "q0": [{}, {}]
        }}"#,
        q0[0], q0[1]
    ))
}

/// Point-mass pendulum of unit mass and length 2 lying along +x.
pub fn point_pendulum(dof: usize) -> Mechanism {
    pendulum("point-masses-at-ends", 2.0, 2.0, [2.0, 0.0], dof)
}

/// A four-bar with a unit rocker pivoted at D = (2, 2). It assembles at
/// θ = 0 with the same P1, P2 as the reference, but at θ = π the distance
/// from P1 to D (√13) exceeds coupler plus rocker.
pub fn short_rocker_fourbar() -> Mechanism {
    let mut def = mbfg::reference::fourbar_def();
    def.points[3].xy = Some([2.0, 2.0]);
    def.bodies[2].length = 1.0;
    def.q0 = Some(vec![1.0, 0.0, 1.0, 2.0, 0.0]);
    Mechanism::from_def(def).unwrap()
}

pub fn uniform(rng: &mut StdRng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub fn random_matrix(rng: &mut StdRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Symmetric positive definite with eigenvalues roughly in `[0.5, n + 1]`.
pub fn random_spd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Augmented system `[M Aᵀ; A 0] [x; λ] = [f; c]` solved densely by LU.
pub fn dense_kkt(
    m: &DMatrix<f64>,
    a: &DMatrix<f64>,
    f: &DVector<f64>,
    c: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (k, n) = a.shape();
    let mut big = DMatrix::zeros(n + k, n + k);
    big.view_mut((0, 0), (n, n)).copy_from(m);
    big.view_mut((0, n), (n, k)).copy_from(&a.transpose());
    big.view_mut((n, 0), (k, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(f);
    rhs.rows_mut(n, k).copy_from(c);
    let x = big.lu().solve(&rhs).expect("nonsingular augmented matrix");
    (x.rows(0, n).into_owned(), x.rows(n, k).into_owned())
}

/// Central-difference derivative of a vector function along `dir`.
pub fn directional<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    dir: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    (f(&(x + dir * h)) - f(&(x - dir * h))) / (2.0 * h)
}

/// Central-difference Jacobian, one column per coordinate.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut e = DVector::zeros(x.len());
            e[i] = 1.0;
            directional(&f, x, &e, h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// `max(1e-6 absolute, 1e-5 relative)`, elementwise; returns the worst
/// ratio of the difference to its allowance.
pub fn fd_ratio(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / (1e-5 * b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn free<const N: usize>(first: usize) -> [Coord; N] {
    std::array::from_fn(|i| Coord::Free(first + i))
}

pub fn distance(length: f64) -> ConstraintBlock {
    ConstraintBlock::new(BlockKind::ConstantDistance {
        coords: free(0),
        length,
    })
    .unwrap()
}

pub fn mobile_slider() -> ConstraintBlock {
    ConstraintBlock::new(BlockKind::MobilePinnedSlider { coords: free(0) }).unwrap()
}

pub fn fixed_slider() -> ConstraintBlock {
    ConstraintBlock::new(BlockKind::FixedPinnedSlider {
        coords: free(0),
        a: [0.5, -1.0],
        b: [2.0, 1.5],
    })
    .unwrap()
}

pub fn angle(length: f64) -> ConstraintBlock {
    ConstraintBlock::new(BlockKind::AbsoluteAngle {
        coords: free(0),
        theta: 4,
        length,
    })
    .unwrap()
}

pub fn row(
    block: &ConstraintBlock,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
    which: usize,
) -> DVector<f64> {
    let e = block.eval(q, Some(dq), Some(v), Some(w));
    let r = match which {
        0 => &e.phi_q,
        1 => &e.dphi_q,
        2 => &e.phiqq_times_v,
        _ => &e.dotphiqq_times_v,
    };
    r.to_dense(q.len())
}

pub fn phi(block: &ConstraintBlock, q: &DVector<f64>) -> DVector<f64> {
    DVector::from_element(1, block.eval(q, None, None, None).phi)
}

pub fn as_row(v: DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

/// Worst tolerance ratio of the four derivative objects of `block` at a
/// random state, each against a central difference of a lower-order one.
pub fn block_fd_ratio(
    block: &ConstraintBlock,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
) -> f64 {
    let n = q.len();
    let h = 1e-6;
    // Φ_q against the gradient of Φ.
    let grad = DVector::from_fn(n, |i, _| {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        directional(|x| phi(block, x), q, &e, h * q[i].abs().max(1.0))[0]
    });
    let mut worst = fd_ratio(&as_row(row(block, q, dq, v, w, 0)), &as_row(grad));
    // Φ̇_q against d/dt Φ_q along q̇.
    let dt = directional(|x| row(block, x, dq, v, w, 0), q, dq, h);
    worst = worst.max(fd_ratio(&as_row(row(block, q, dq, v, w, 1)), &as_row(dt)));
    // Φ_qq·v against the derivative of Φ_q in direction v.
    let dv_ = directional(|x| row(block, x, dq, v, w, 0), q, v, h);
    worst = worst.max(fd_ratio(&as_row(row(block, q, dq, v, w, 2)), &as_row(dv_)));
    // Φ̇_qq·w against d/dt (Φ_qq·w) along q̇.
    let dw = directional(|x| row(block, x, dq, w, w, 2), q, dq, h);
    worst.max(fd_ratio(&as_row(row(block, q, dq, v, w, 3)), &as_row(dw)))
}

/// Worst ratio of one block kind over `trials` random states.
pub fn block_kind_ratio(kind: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let (block, n) = match kind {
            0 => (distance(1.7), 4),
            1 => (fixed_slider(), 2),
            2 => (mobile_slider(), 6),
            _ => (angle(1.3), 5),
        };
        let q = uniform(&mut rng, n, 2.0);
        if kind == 3 && ((q[4].sin().abs() - FRAC_1_SQRT_2).abs() < 1e-3) {
            // A difference stencil that straddles the branch switch compares
            // two different functions.
            continue;
        }
        let dq = uniform(&mut rng, n, 2.0);
        let v = uniform(&mut rng, n, 2.0);
        let w = uniform(&mut rng, n, 2.0);
        worst = worst.max(block_fd_ratio(&block, &q, &dq, &v, &w));
        done += 1;
    }
    worst
}

/// Worst relative gap between the closed-form accelerations and a dense
/// solve of the augmented system over `trials` random problems.
pub fn closed_form_vs_augmented(trials: usize, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(2..12);
        let k = rng.random_range(1..n);
        let m = random_spd(&mut rng, n);
        let a = random_matrix(&mut rng, k, n);
        let f = uniform(&mut rng, n, 10.0);
        let c = uniform(&mut rng, k, 10.0);
        let closed = accel_dep_parts(&m, &a, &f, &c).unwrap().ddq;
        let (direct, _) = dense_kkt(&m, &a, &f, &c);
        worst = worst.max((closed - &direct).norm() / direct.norm());
    }
    worst
}

/// Worst `|R z̈ + S c − q̈|` over random consistent four-bar states.
pub fn formulation_gap(states: usize, seed: u64) -> f64 {
    let mech = fourbar();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..states {
        let (q, dq) = random_consistent_state(&mech, &mut rng).unwrap();
        let kin = mech.kinematics(&q, Some(&dq), None, None);
        let f = mech.gravity_forces(&q) + uniform(&mut rng, 5, 20.0);
        let dep = forward_accel_dep(mech.mass_matrix(), &kin, &f).unwrap().ddq;
        let indep = forward_accel_indep(mech.mass_matrix(), &kin, &[4], &f).unwrap();
        let rebuilt = &indep.r * &indep.ddz + &indep.s_times_c;
        worst = worst.max((rebuilt - dep).amax());
    }
    worst
}
