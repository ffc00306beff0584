//! Randomized verification of factor Jacobians against central differences.
//!
//! Used by the command-line `check-jacobians` command. States are drawn
//! near the constraint manifold of the mechanism under test, since the
//! independent-coordinate factors are only defined where the declared dofs
//! parameterize the mechanism.

use std::sync::Arc;

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::dynamics;
use crate::error::{Error, Result};
use crate::factors::{
    DepDynamicsFactor, DepPositionFactor, DepVelocityFactor, EulerIntegratorFactor, Factor,
    FactorKind, IndepAccelerationFactor, IndepDynamicsFactor, IndepPositionFactor,
    IndepVelocityFactor, NoiseModel, PriorFactor, SoftEqualityFactor, TrapezoidalIntegratorFactor,
    VariableKey,
};
use crate::mechanism::Mechanism;
use crate::reference;

/// Absolute part of the acceptance tolerance.
pub const ABS_TOL: f64 = 1e-6;
/// Relative part of the acceptance tolerance.
pub const REL_TOL: f64 = 1e-5;

/// Worst result over all trials of one factor kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub kind: FactorKind,
    pub trials: usize,
    /// Largest `|analytic - numeric| / max(ABS_TOL, REL_TOL·|numeric|)`.
    pub worst_ratio: f64,
    pub failures: usize,
}

impl KindReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn uniform(rng: &mut StdRng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// A consistent `(q, q̇)` with random dof values and rates, reached by
/// continuation from the mechanism's `q0` so the assembly branch is kept.
pub fn random_consistent_state(
    mech: &Mechanism,
    rng: &mut StdRng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let layout = mech.layout();
    let q0 = reference::initial_guess(mech);
    let z0 = layout.pack_dofs(&q0)?;
    for _ in 0..20 {
        let target = &z0 + uniform(rng, z0.len(), std::f64::consts::PI);
        let mut q = q0.clone();
        let mut ok = true;
        for k in 1..=16 {
            let z = &z0 + (&target - &z0) * (k as f64 / 16.0);
            match dynamics::solve_position_problem(mech.blocks(), &q, layout.dof_idxs(), &z) {
                Ok(sol) => q = sol.q,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let kin = mech.kinematics(&q, None, None, None);
        if let Ok(dq) =
            dynamics::solve_velocity_problem(&kin, layout.dof_idxs(), &uniform(rng, z0.len(), 2.0))
        {
            return Ok((q, dq));
        }
    }
    Err(Error::config(
        "could not sample a consistent state for this mechanism",
    ))
}

/// Worst normalized deviation between the factor's Jacobians and central
/// differences of its error function.
pub fn jacobian_ratio(factor: &dyn Factor, values: &[DVector<f64>]) -> Result<f64> {
    let refs: Vec<&DVector<f64>> = values.iter().collect();
    let lin = factor.linearize(&refs)?;
    let mut worst: f64 = 0.0;
    for (var, jac) in lin.jacobians.iter().enumerate() {
        for i in 0..values[var].len() {
            let x = values[var][i];
            let h = 1e-6 * x.abs().max(1.0);
            let mut plus = values.to_vec();
            plus[var][i] = x + h;
            let mut minus = values.to_vec();
            minus[var][i] = x - h;
            let ep = factor.error(&plus.iter().collect::<Vec<_>>())?;
            let em = factor.error(&minus.iter().collect::<Vec<_>>())?;
            let col = (ep - em) / (2.0 * h);
            for r in 0..col.len() {
                let tol = ABS_TOL.max(REL_TOL * col[r].abs());
                worst = worst.max((jac[(r, i)] - col[r]).abs() / tol);
            }
        }
    }
    Ok(worst)
}

/// One randomly configured instance of every factor kind, with values.
fn instances(
    mech: &Arc<Mechanism>,
    rng: &mut StdRng,
) -> Result<Vec<(Box<dyn Factor>, Vec<DVector<f64>>)>> {
    let (n, d) = (mech.n(), mech.d());
    let layout = mech.layout();
    let (q, dq) = random_consistent_state(mech, rng)?;
    // Small departures from the manifold: Jacobians must hold off it too.
    let q = q + uniform(rng, n, 1e-2);
    let dq = dq + uniform(rng, n, 1e-2);
    let ddq = uniform(rng, n, 5.0);
    let force = uniform(rng, n, 10.0);
    let z = layout.pack_dofs(&q)? + uniform(rng, d, 1e-2);
    let dz = layout.pack_dofs(&dq)? + uniform(rng, d, 1e-2);
    let ddz = uniform(rng, d, 5.0);
    let ext = uniform(rng, n, 1.0);
    let dt = rng.random_range(1e-4..1e-1);
    let noise = || NoiseModel::isotropic(1.0);
    let (kq, kdq, kddq, kz, kdz, kddz, kf) = (
        VariableKey::q(1),
        VariableKey::dq(1),
        VariableKey::ddq(1),
        VariableKey::z(1),
        VariableKey::dz(1),
        VariableKey::ddz(1),
        VariableKey::force(1),
    );
    let comps: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    let target = uniform(rng, comps.len(), 1.0);
    let out: Vec<(Box<dyn Factor>, Vec<DVector<f64>>)> = vec![
        (
            Box::new(PriorFactor::on_components(
                kq,
                n,
                comps.clone(),
                target,
                noise(),
            )?),
            vec![q.clone()],
        ),
        (
            Box::new(EulerIntegratorFactor::new(
                VariableKey::q(0),
                kq,
                VariableKey::dq(0),
                n,
                dt,
                noise(),
            )?),
            vec![uniform(rng, n, 1.0), q.clone(), dq.clone()],
        ),
        (
            Box::new(TrapezoidalIntegratorFactor::new(
                VariableKey::q(0),
                kq,
                VariableKey::dq(0),
                kdq,
                n,
                dt,
                noise(),
            )?),
            vec![
                uniform(rng, n, 1.0),
                q.clone(),
                uniform(rng, n, 1.0),
                dq.clone(),
            ],
        ),
        (
            Box::new(SoftEqualityFactor::new(VariableKey::q(0), kq, n, noise())?),
            vec![uniform(rng, n, 1.0), q.clone()],
        ),
        (
            Box::new(DepPositionFactor::new(mech.clone(), kq, noise())?),
            vec![q.clone()],
        ),
        (
            Box::new(DepVelocityFactor::new(mech.clone(), kq, kdq, noise())?),
            vec![q.clone(), dq.clone()],
        ),
        (
            Box::new(DepDynamicsFactor::forward(
                mech.clone(),
                kq,
                kdq,
                kddq,
                ext.clone(),
                noise(),
            )?),
            vec![q.clone(), dq.clone(), ddq.clone()],
        ),
        (
            Box::new(DepDynamicsFactor::inverse(
                mech.clone(),
                kq,
                kdq,
                kddq,
                kf,
                ext.clone(),
                noise(),
            )?),
            vec![q.clone(), dq.clone(), ddq.clone(), force.clone()],
        ),
        (
            Box::new(IndepPositionFactor::new(mech.clone(), kq, kz, noise())?),
            vec![q.clone(), z.clone()],
        ),
        (
            Box::new(IndepVelocityFactor::new(
                mech.clone(),
                kq,
                kdq,
                kdz,
                noise(),
            )?),
            vec![q.clone(), dq.clone(), dz.clone()],
        ),
        (
            Box::new(IndepAccelerationFactor::new(
                mech.clone(),
                kq,
                kdq,
                kddq,
                kddz,
                noise(),
            )?),
            vec![q.clone(), dq.clone(), ddq.clone(), ddz.clone()],
        ),
        (
            Box::new(IndepDynamicsFactor::forward(
                mech.clone(),
                kq,
                kz,
                kdz,
                kddz,
                ext.clone(),
                noise(),
            )?),
            vec![q.clone(), z.clone(), dz.clone(), ddz.clone()],
        ),
        (
            Box::new(IndepDynamicsFactor::inverse(
                mech.clone(),
                kq,
                kz,
                kdz,
                kddz,
                kf,
                ext,
                noise(),
            )?),
            vec![q, z, dz, ddz, force],
        ),
    ];
    Ok(out)
}

/// Checks every factor kind on `trials` random states.
pub fn check_factor_jacobians(
    mech: &Mechanism,
    trials: usize,
    seed: u64,
) -> Result<Vec<KindReport>> {
    let mech = Arc::new(mech.clone());
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports: Vec<KindReport> = Vec::new();
    for _ in 0..trials {
        for (factor, values) in instances(&mech, &mut rng)? {
            let ratio = jacobian_ratio(factor.as_ref(), &values)?;
            let kind = factor.kind();
            let pos = match reports.iter().position(|r| r.kind == kind) {
                Some(p) => p,
                None => {
                    reports.push(KindReport {
                        kind,
                        trials: 0,
                        worst_ratio: 0.0,
                        failures: 0,
                    });
                    reports.len() - 1
                }
            };
            let r = &mut reports[pos];
            r.trials += 1;
            r.worst_ratio = r.worst_ratio.max(ratio);
            if ratio > 1.0 {
                r.failures += 1;
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_states_are_consistent() {
        let mech = reference::fourbar();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..5 {
            let (q, dq) = random_consistent_state(&mech, &mut rng).unwrap();
            let kin = mech.kinematics(&q, None, None, None);
            assert!(kin.phi.amax() < 1e-11);
            assert!(kin.phi_q.mul_vec(&dq).amax() < 1e-11);
            // Upper assembly branch is preserved by continuation.
            assert!(q[3] > 0.0);
        }
    }

    #[test]
    fn all_kinds_pass_a_few_trials() {
        let reports = check_factor_jacobians(&reference::fourbar(), 3, 11).unwrap();
        assert_eq!(reports.len(), 13);
        for r in reports {
            assert!(r.passed(), "{:?}", r);
        }
    }
}
