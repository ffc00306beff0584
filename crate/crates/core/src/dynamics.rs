//! Closed-form accelerations in dependent and independent coordinates, the
//! `R`/`S` velocity maps, and the position and velocity problems.

use nalgebra::{DMatrix, DVector};

use crate::constraints::{self, AssembledKinematics, ConstraintBlock};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseCholesky};

/// Result of the dependent-coordinate equation of motion.
#[derive(Debug, Clone)]
pub struct DepDynResult {
    pub ddq: DVector<f64>,
    /// Lagrange multipliers of `M q̈ + Φ_qᵀ λ = F`.
    pub lambda: DVector<f64>,
    /// `Γ = Φ_q M⁻¹ Φ_qᵀ`.
    pub gamma: DMatrix<f64>,
}

/// `ddq = (M⁻¹ - M⁻¹Φ_qᵀΓ⁻¹Φ_qM⁻¹) F + M⁻¹Φ_qᵀΓ⁻¹ c`.
pub fn forward_accel_dep(
    m: &DMatrix<f64>,
    kin: &AssembledKinematics,
    f: &DVector<f64>,
) -> Result<DepDynResult> {
    accel_dep_parts(m, &kin.phi_q.to_dense(), f, &kin.c)
}

/// Same as [`forward_accel_dep`] on explicit dense inputs.
pub fn accel_dep_parts(
    m: &DMatrix<f64>,
    phi_q: &DMatrix<f64>,
    f: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<DepDynResult> {
    let chol = mass_cholesky(m)?;
    accel_dep_with_factor(&chol, phi_q, f, c)
}

pub(crate) fn mass_cholesky(m: &DMatrix<f64>) -> Result<DenseCholesky> {
    linalg::cholesky(m).map_err(|pivot| Error::SingularConfiguration {
        pivot,
        context: "mass matrix",
    })
}

pub(crate) fn accel_dep_with_factor(
    chol: &DenseCholesky,
    phi_q: &DMatrix<f64>,
    f: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<DepDynResult> {
    let minv_f = chol.solve(f);
    if phi_q.nrows() == 0 {
        return Ok(DepDynResult {
            ddq: minv_f,
            lambda: DVector::zeros(0),
            gamma: DMatrix::zeros(0, 0),
        });
    }
    let minv_phit = chol.solve_matrix(&phi_q.transpose());
    let mut gamma = phi_q * &minv_phit;
    gamma = (&gamma + gamma.transpose()) * 0.5;
    let gamma_chol = linalg::cholesky(&gamma).map_err(|pivot| Error::SingularConfiguration {
        pivot,
        context: "constraint row of Gamma = Phi_q M^-1 Phi_q^T",
    })?;
    let lambda = gamma_chol.solve(&(phi_q * &minv_f - c));
    let ddq = minv_f - minv_phit * &lambda;
    Ok(DepDynResult { ddq, lambda, gamma })
}

/// Direct solve of the augmented system `[M Φ_qᵀ; Φ_q 0] [q̈; λ] = [F; c]`.
pub fn solve_kkt(
    m: &DMatrix<f64>,
    phi_q: &DMatrix<f64>,
    f: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = m.nrows();
    let k = phi_q.nrows();
    let mut a = DMatrix::zeros(n + k, n + k);
    a.view_mut((0, 0), (n, n)).copy_from(m);
    a.view_mut((0, n), (n, k)).copy_from(&phi_q.transpose());
    a.view_mut((n, 0), (k, n)).copy_from(phi_q);
    let mut rhs = DMatrix::zeros(n + k, 1);
    rhs.view_mut((0, 0), (n, 1)).copy_from(f);
    rhs.view_mut((n, 0), (k, 1)).copy_from(c);
    let x = linalg::lu_solve(&a, &rhs).ok_or(Error::SingularConfiguration {
        pivot: 0,
        context: "KKT matrix",
    })?;
    let sol = x.column(0);
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

/// The blocks of `[Φ_q; B]⁻¹ = [S R]`.
#[derive(Debug, Clone)]
pub struct VelocityMap {
    /// `n×d` basis of the nullspace of `Φ_q` with `B·R = I`.
    pub r: DMatrix<f64>,
    /// `n×m`.
    pub s: DMatrix<f64>,
}

impl VelocityMap {
    pub fn s_times(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.s * w
    }
}

/// Builds `R` and `S` from `Φ_q` stacked on the dof selection rows.
pub fn compute_r(phi_q: &DMatrix<f64>, dof_idxs: &[usize]) -> Result<VelocityMap> {
    let (m, n) = phi_q.shape();
    let d = dof_idxs.len();
    if m + d != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m + d,
        });
    }
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (m, n)).copy_from(phi_q);
    for (k, &i) in dof_idxs.iter().enumerate() {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        a[(m + k, i)] = 1.0;
    }
    let inv = linalg::lu_solve(&a, &DMatrix::identity(n, n)).ok_or(Error::BadDofChoice)?;
    Ok(VelocityMap {
        s: inv.columns(0, m).into_owned(),
        r: inv.columns(m, d).into_owned(),
    })
}

/// Result of the independent-coordinate equation of motion.
#[derive(Debug, Clone)]
pub struct IndepDynResult {
    pub ddz: DVector<f64>,
    pub r: DMatrix<f64>,
    pub s_times_c: DVector<f64>,
    pub mbar: DMatrix<f64>,
    pub qbar: DVector<f64>,
}

impl IndepDynResult {
    /// `q̈ = S c + R z̈`.
    pub fn ddq(&self) -> DVector<f64> {
        &self.s_times_c + &self.r * &self.ddz
    }
}

/// `z̈ = M̄⁻¹ Q̄` with `M̄ = RᵀMR`, `Q̄ = Rᵀ(F - M S c)`.
pub fn forward_accel_indep(
    m: &DMatrix<f64>,
    kin: &AssembledKinematics,
    dof_idxs: &[usize],
    f: &DVector<f64>,
) -> Result<IndepDynResult> {
    let map = compute_r(&kin.phi_q.to_dense(), dof_idxs)?;
    let s_times_c = map.s_times(&kin.c);
    let mbar = map.r.transpose() * m * &map.r;
    let qbar = map.r.transpose() * (f - m * &s_times_c);
    let chol = linalg::cholesky(&mbar).map_err(|pivot| Error::SingularConfiguration {
        pivot,
        context: "reduced mass matrix",
    })?;
    let ddz = chol.solve(&qbar);
    Ok(IndepDynResult {
        ddz,
        r: map.r,
        s_times_c,
        mbar,
        qbar,
    })
}

/// Newton iteration limit for the position problem.
pub const POSITION_MAX_ITERATIONS: usize = 50;
/// Convergence threshold on `‖Φ‖∞`.
pub const POSITION_TOLERANCE: f64 = 1e-12;
const POSITION_MAX_HALVINGS: usize = 8;

#[derive(Debug, Clone)]
pub struct PositionSolution {
    pub q: DVector<f64>,
    pub iterations: usize,
}

/// Solves `Φ(q) = 0` with `q(locked) = values` by damped Newton steps.
pub fn solve_position_problem(
    blocks: &[ConstraintBlock],
    q_guess: &DVector<f64>,
    locked_idxs: &[usize],
    locked_values: &DVector<f64>,
) -> Result<PositionSolution> {
    let n = q_guess.len();
    constraints::check_blocks(blocks, n)?;
    if locked_values.len() != locked_idxs.len() {
        return Err(Error::DimensionMismatch {
            expected: locked_idxs.len(),
            got: locked_values.len(),
        });
    }
    if let Some(&i) = locked_idxs.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    let m = blocks.len();
    let rows = m + locked_idxs.len();

    let residual = |q: &DVector<f64>| -> (DVector<f64>, AssembledKinematics) {
        let kin = constraints::assemble_unchecked(blocks, n, q, None, None, None);
        let mut r = DVector::zeros(rows);
        r.rows_mut(0, m).copy_from(&kin.phi);
        for (k, &i) in locked_idxs.iter().enumerate() {
            r[m + k] = q[i] - locked_values[k];
        }
        (r, kin)
    };

    let mut q = q_guess.clone();
    let (mut r, mut kin) = residual(&q);
    for iteration in 0..=POSITION_MAX_ITERATIONS {
        if r.amax() < POSITION_TOLERANCE {
            return Ok(PositionSolution {
                q,
                iterations: iteration,
            });
        }
        if iteration == POSITION_MAX_ITERATIONS {
            break;
        }
        let mut jac = DMatrix::zeros(rows, n);
        jac.view_mut((0, 0), (m, n))
            .copy_from(&kin.phi_q.to_dense());
        for (k, &i) in locked_idxs.iter().enumerate() {
            jac[(m + k, i)] = 1.0;
        }
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if rows.min(n) > 0 && !(smin > 1e-12 * smax) {
            let pivot = svd.singular_values.imin();
            return Err(Error::SingularConfiguration {
                pivot,
                context: "position problem Jacobian",
            });
        }
        let step = svd
            .solve(&(-&r), 0.0)
            .map_err(|e| Error::SolverDiverged(e.to_string()))?;
        let r_norm = r.norm();
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..=POSITION_MAX_HALVINGS {
            let trial = &q + &step * alpha;
            let (rt, kt) = residual(&trial);
            if rt.norm() < r_norm {
                q = trial;
                r = rt;
                kin = kt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::PositionProblemDiverged {
                iterations: iteration + 1,
                residual: r.amax(),
            });
        }
    }
    Err(Error::PositionProblemDiverged {
        iterations: POSITION_MAX_ITERATIONS,
        residual: r.amax(),
    })
}

/// `q̇ = R ż` (no rheonomic terms, so `b = 0`).
pub fn solve_velocity_problem(
    kin: &AssembledKinematics,
    dof_idxs: &[usize],
    dz: &DVector<f64>,
) -> Result<DVector<f64>> {
    if dz.len() != dof_idxs.len() {
        return Err(Error::DimensionMismatch {
            expected: dof_idxs.len(),
            got: dz.len(),
        });
    }
    let map = compute_r(&kin.phi_q.to_dense(), dof_idxs)?;
    Ok(&map.r * dz)
}
