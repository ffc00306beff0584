//! Factor library: error functions, Jacobians, and noise models.
//!
//! Every factor maps the current values of its connected variables to a
//! raw error `e` plus one Jacobian block per variable (in key order). The
//! solver whitens both with the factor's [`NoiseModel`], so the graph cost
//! is `Σ ½ eᵀ Λ e`.
//!
//! Analytic Jacobians are provided for all kinematic and integrator factors.
//! Dynamics factors differentiate their closed-form accelerations by central
//! differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics;
use crate::error::{Error, Result};
use crate::mechanism::{self, Mechanism};

/// Surrogate variance for rows that should hold exactly.
pub const SURROGATE_VARIANCE: f64 = 1e-10;

/// Relative step of the central differences used by dynamics factors.
pub const NUMERIC_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKind {
    Q,
    Dq,
    Ddq,
    Z,
    Dz,
    Ddz,
    /// Generalized forces.
    Force,
}

impl VarKind {
    pub fn label(self) -> &'static str {
        match self {
            VarKind::Q => "q",
            VarKind::Dq => "dq",
            VarKind::Ddq => "ddq",
            VarKind::Z => "z",
            VarKind::Dz => "dz",
            VarKind::Ddz => "ddz",
            VarKind::Force => "Q",
        }
    }
}

/// A variable node. Ordering is `(timestep, kind)`, which is also the
/// solver's column ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableKey {
    pub timestep: usize,
    pub kind: VarKind,
}

impl VariableKey {
    pub fn new(kind: VarKind, timestep: usize) -> Self {
        VariableKey { timestep, kind }
    }

    pub fn q(t: usize) -> Self {
        Self::new(VarKind::Q, t)
    }

    pub fn dq(t: usize) -> Self {
        Self::new(VarKind::Dq, t)
    }

    pub fn ddq(t: usize) -> Self {
        Self::new(VarKind::Ddq, t)
    }

    pub fn z(t: usize) -> Self {
        Self::new(VarKind::Z, t)
    }

    pub fn dz(t: usize) -> Self {
        Self::new(VarKind::Dz, t)
    }

    pub fn ddz(t: usize) -> Self {
        Self::new(VarKind::Ddz, t)
    }

    pub fn force(t: usize) -> Self {
        Self::new(VarKind::Force, t)
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.kind.label(), self.timestep)
    }
}

/// Gaussian noise model of a factor, parameterized by variances.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Isotropic {
        variance: f64,
    },
    Diagonal {
        variances: Vec<f64>,
    },
    /// Hard rows, realized with [`SURROGATE_VARIANCE`].
    Constrained,
}

impl NoiseModel {
    pub fn isotropic(variance: f64) -> Self {
        NoiseModel::Isotropic { variance }
    }

    pub fn diagonal(variances: Vec<f64>) -> Self {
        NoiseModel::Diagonal { variances }
    }

    fn variance(&self, row: usize) -> f64 {
        match self {
            NoiseModel::Isotropic { variance } => *variance,
            NoiseModel::Diagonal { variances } => variances[row],
            NoiseModel::Constrained => SURROGATE_VARIANCE,
        }
    }

    /// Per-row square-root information `1/σ`.
    pub fn sqrt_information(&self, dim: usize) -> Vec<f64> {
        (0..dim).map(|i| 1.0 / self.variance(i).sqrt()).collect()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            NoiseModel::Isotropic { variance } if !(*variance > 0.0) => {
                Err(Error::config("isotropic variance must be positive"))
            }
            NoiseModel::Diagonal { variances } => {
                if variances.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: variances.len(),
                    });
                }
                if variances.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::config("diagonal variances must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `½ eᵀ Λ e`.
    pub fn cost(&self, e: &DVector<f64>) -> f64 {
        0.5 * e
            .iter()
            .enumerate()
            .map(|(i, x)| x * x / self.variance(i))
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Prior,
    EulerIntegrator,
    TrapezoidalIntegrator,
    DepPositionConstraint,
    DepVelocityConstraint,
    DepDynamics,
    DepInverseDynamics,
    IndepPositionConstraint,
    IndepVelocityConstraint,
    IndepAccelerationConstraint,
    IndepDynamics,
    IndepInverseDynamics,
    SoftEquality,
}

/// Raw error and Jacobian blocks of a factor at one point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub error: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

pub trait Factor: Send + Sync + fmt::Debug {
    fn kind(&self) -> FactorKind;

    fn keys(&self) -> &[VariableKey];

    /// Dimension of the error vector.
    fn dim(&self) -> usize;

    fn noise(&self) -> &NoiseModel;

    /// Raw error only.
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>>;

    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization>;

    /// Expected dimension of every connected variable, in key order.
    fn key_dims(&self) -> Vec<usize>;

    /// Raw errors and Jacobians of the dynamics factors come from numerical
    /// differentiation; the others are analytic.
    fn has_numeric_jacobian(&self) -> bool {
        false
    }
}

fn check_dims(values: &[&DVector<f64>], dims: &[usize]) -> Result<()> {
    if values.len() != dims.len() {
        return Err(Error::DimensionMismatch {
            expected: dims.len(),
            got: values.len(),
        });
    }
    for (v, &d) in values.iter().zip(dims) {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Central-difference Jacobian of `f` with respect to `values[var]`, using
/// `h = NUMERIC_STEP · max(1, |x_i|)` per coordinate.
pub fn numeric_jacobian<F>(
    f: F,
    values: &[&DVector<f64>],
    var: usize,
    rows: usize,
) -> Result<DMatrix<f64>>
where
    F: Fn(&[&DVector<f64>]) -> Result<DVector<f64>>,
{
    let x = values[var];
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut perturbed = x.clone();
    for i in 0..x.len() {
        let h = NUMERIC_STEP * x[i].abs().max(1.0);
        perturbed[i] = x[i] + h;
        let plus = {
            let mut vals = values.to_vec();
            vals[var] = &perturbed;
            f(&vals)?
        };
        perturbed[i] = x[i] - h;
        let minus = {
            let mut vals = values.to_vec();
            vals[var] = &perturbed;
            f(&vals)?
        };
        perturbed[i] = x[i];
        jac.column_mut(i).copy_from(&((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

fn selection(idxs: &[usize], n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(idxs.len(), n);
    for (k, &i) in idxs.iter().enumerate() {
        s[(k, i)] = 1.0;
    }
    s
}

/// Prior `e = x(components) - x₀`.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    keys: [VariableKey; 1],
    var_dim: usize,
    components: Vec<usize>,
    target: DVector<f64>,
    noise: NoiseModel,
}

impl PriorFactor {
    pub fn new(key: VariableKey, target: DVector<f64>, noise: NoiseModel) -> Result<Self> {
        let dim = target.len();
        Self::on_components(key, dim, (0..dim).collect(), target, noise)
    }

    /// Prior on a subset of the components of a `var_dim`-vector.
    pub fn on_components(
        key: VariableKey,
        var_dim: usize,
        components: Vec<usize>,
        target: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        if target.len() != components.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                got: target.len(),
            });
        }
        if let Some(&i) = components.iter().find(|&&i| i >= var_dim) {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: var_dim,
            });
        }
        noise.validate(components.len())?;
        Ok(PriorFactor {
            keys: [key],
            var_dim,
            components,
            target,
            noise,
        })
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }
}

impl Factor for PriorFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::Prior
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.components.len()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.var_dim]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(mechanism::pack(values[0], &self.components)? - &self.target)
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        Ok(Linearization {
            error: self.error(values)?,
            jacobians: vec![selection(&self.components, self.var_dim)],
        })
    }
}

/// `e = x_{t+1} - x_t - Δt ẋ_t`; keys `[x_t, x_{t+1}, ẋ_t]`.
#[derive(Debug, Clone)]
pub struct EulerIntegratorFactor {
    keys: [VariableKey; 3],
    dim: usize,
    dt: f64,
    noise: NoiseModel,
}

impl EulerIntegratorFactor {
    pub fn new(
        x_t: VariableKey,
        x_next: VariableKey,
        dx_t: VariableKey,
        dim: usize,
        dt: f64,
        noise: NoiseModel,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::config("integrator time step must be positive"));
        }
        noise.validate(dim)?;
        Ok(EulerIntegratorFactor {
            keys: [x_t, x_next, dx_t],
            dim,
            dt,
            noise,
        })
    }
}

impl Factor for EulerIntegratorFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::EulerIntegrator
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.dim; 3]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(values[1] - values[0] - values[2] * self.dt)
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        let eye = DMatrix::identity(self.dim, self.dim);
        Ok(Linearization {
            error: self.error(values)?,
            jacobians: vec![-&eye, eye.clone(), eye * -self.dt],
        })
    }
}

/// `e = x_{t+1} - x_t - Δt/2 (ẋ_t + ẋ_{t+1})`; keys `[x_t, x_{t+1}, ẋ_t, ẋ_{t+1}]`.
#[derive(Debug, Clone)]
pub struct TrapezoidalIntegratorFactor {
    keys: [VariableKey; 4],
    dim: usize,
    dt: f64,
    noise: NoiseModel,
}

impl TrapezoidalIntegratorFactor {
    pub fn new(
        x_t: VariableKey,
        x_next: VariableKey,
        dx_t: VariableKey,
        dx_next: VariableKey,
        dim: usize,
        dt: f64,
        noise: NoiseModel,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::config("integrator time step must be positive"));
        }
        noise.validate(dim)?;
        Ok(TrapezoidalIntegratorFactor {
            keys: [x_t, x_next, dx_t, dx_next],
            dim,
            dt,
            noise,
        })
    }
}

impl Factor for TrapezoidalIntegratorFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::TrapezoidalIntegrator
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.dim; 4]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(values[1] - values[0] - (values[2] + values[3]) * (0.5 * self.dt))
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        let eye = DMatrix::identity(self.dim, self.dim);
        let half = &eye * (-0.5 * self.dt);
        Ok(Linearization {
            error: self.error(values)?,
            jacobians: vec![-&eye, eye.clone(), half.clone(), half],
        })
    }
}

/// Soft equality `e = x_{t+1} - x_t`.
#[derive(Debug, Clone)]
pub struct SoftEqualityFactor {
    keys: [VariableKey; 2],
    dim: usize,
    noise: NoiseModel,
}

impl SoftEqualityFactor {
    pub fn new(
        x_t: VariableKey,
        x_next: VariableKey,
        dim: usize,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.validate(dim)?;
        Ok(SoftEqualityFactor {
            keys: [x_t, x_next],
            dim,
            noise,
        })
    }
}

impl Factor for SoftEqualityFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::SoftEquality
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.dim; 2]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(values[1] - values[0])
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        let eye = DMatrix::identity(self.dim, self.dim);
        Ok(Linearization {
            error: self.error(values)?,
            jacobians: vec![-&eye, eye],
        })
    }
}

/// `e = Φ(q_t)`.
#[derive(Debug, Clone)]
pub struct DepPositionFactor {
    mech: Arc<Mechanism>,
    keys: [VariableKey; 1],
    noise: NoiseModel,
}

impl DepPositionFactor {
    pub fn new(mech: Arc<Mechanism>, q: VariableKey, noise: NoiseModel) -> Result<Self> {
        noise.validate(mech.m())?;
        Ok(DepPositionFactor {
            mech,
            keys: [q],
            noise,
        })
    }
}

impl Factor for DepPositionFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::DepPositionConstraint
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.m()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.mech.n()]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(self.mech.kinematics(values[0], None, None, None).phi)
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        check_dims(values, &self.key_dims())?;
        let kin = self.mech.kinematics(values[0], None, None, None);
        Ok(Linearization {
            error: kin.phi,
            jacobians: vec![kin.phi_q.to_dense()],
        })
    }
}

/// `e = Φ_q(q_t) q̇_t`; keys `[q, q̇]`.
#[derive(Debug, Clone)]
pub struct DepVelocityFactor {
    mech: Arc<Mechanism>,
    keys: [VariableKey; 2],
    noise: NoiseModel,
}

impl DepVelocityFactor {
    pub fn new(
        mech: Arc<Mechanism>,
        q: VariableKey,
        dq: VariableKey,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.validate(mech.m())?;
        Ok(DepVelocityFactor {
            mech,
            keys: [q, dq],
            noise,
        })
    }
}

impl Factor for DepVelocityFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::DepVelocityConstraint
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.m()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.mech.n(); 2]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(self
            .mech
            .kinematics(values[0], None, None, None)
            .phi_q
            .mul_vec(values[1]))
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        check_dims(values, &self.key_dims())?;
        let kin = self.mech.kinematics(values[0], Some(values[1]), None, None);
        Ok(Linearization {
            error: kin.phi_q.mul_vec(values[1]),
            // ∂(Φ_q q̇)/∂q = Φ_qq q̇ = Φ̇_q
            jacobians: vec![kin.dphi_q.to_dense(), kin.phi_q.to_dense()],
        })
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape())
        .copy_from(bottom);
    out
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(top);
    out.rows_mut(top.len(), bottom.len()).copy_from(bottom);
    out
}

/// `[0_{m×d}; -I_d]`.
fn minus_identity_below(m: usize, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m + d, d);
    for k in 0..d {
        out[(m + k, k)] = -1.0;
    }
    out
}

/// `e = [Φ(q_t); q_t(idxs) - z_t]`; keys `[q, z]`.
#[derive(Debug, Clone)]
pub struct IndepPositionFactor {
    mech: Arc<Mechanism>,
    keys: [VariableKey; 2],
    noise: NoiseModel,
}

impl IndepPositionFactor {
    pub fn new(
        mech: Arc<Mechanism>,
        q: VariableKey,
        z: VariableKey,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.validate(mech.m() + mech.d())?;
        Ok(IndepPositionFactor {
            mech,
            keys: [q, z],
            noise,
        })
    }
}

impl Factor for IndepPositionFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::IndepPositionConstraint
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.m() + self.mech.d()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.mech.n(), self.mech.d()]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        Ok(self.linearize(values)?.error)
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        check_dims(values, &self.key_dims())?;
        let layout = self.mech.layout();
        let kin = self.mech.kinematics(values[0], None, None, None);
        let error = stack_vec(&kin.phi, &(layout.pack_dofs(values[0])? - values[1]));
        let jq = stack_rows(
            &kin.phi_q.to_dense(),
            &selection(layout.dof_idxs(), layout.n()),
        );
        Ok(Linearization {
            error,
            jacobians: vec![jq, minus_identity_below(layout.m(), layout.d())],
        })
    }
}

/// `e = [Φ_q q̇_t; q̇_t(idxs) - ż_t]`; keys `[q, q̇, ż]`.
#[derive(Debug, Clone)]
pub struct IndepVelocityFactor {
    mech: Arc<Mechanism>,
    keys: [VariableKey; 3],
    noise: NoiseModel,
}

impl IndepVelocityFactor {
    pub fn new(
        mech: Arc<Mechanism>,
        q: VariableKey,
        dq: VariableKey,
        dz: VariableKey,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.validate(mech.m() + mech.d())?;
        Ok(IndepVelocityFactor {
            mech,
            keys: [q, dq, dz],
            noise,
        })
    }
}

impl Factor for IndepVelocityFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::IndepVelocityConstraint
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.m() + self.mech.d()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.mech.n(), self.mech.n(), self.mech.d()]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        Ok(self.linearize(values)?.error)
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        check_dims(values, &self.key_dims())?;
        let layout = self.mech.layout();
        let (m, n, d) = (layout.m(), layout.n(), layout.d());
        let kin = self.mech.kinematics(values[0], Some(values[1]), None, None);
        let error = stack_vec(
            &kin.phi_q.mul_vec(values[1]),
            &(layout.pack_dofs(values[1])? - values[2]),
        );
        let jq = stack_rows(&kin.dphi_q.to_dense(), &DMatrix::zeros(d, n));
        let jdq = stack_rows(&kin.phi_q.to_dense(), &selection(layout.dof_idxs(), n));
        Ok(Linearization {
            error,
            jacobians: vec![jq, jdq, minus_identity_below(m, d)],
        })
    }
}

/// `e = [Φ̇_q q̇_t + Φ_q q̈_t; q̈_t(idxs) - z̈_t]`; keys `[q, q̇, q̈, z̈]`.
#[derive(Debug, Clone)]
pub struct IndepAccelerationFactor {
    mech: Arc<Mechanism>,
    keys: [VariableKey; 4],
    noise: NoiseModel,
}

impl IndepAccelerationFactor {
    pub fn new(
        mech: Arc<Mechanism>,
        q: VariableKey,
        dq: VariableKey,
        ddq: VariableKey,
        ddz: VariableKey,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.validate(mech.m() + mech.d())?;
        Ok(IndepAccelerationFactor {
            mech,
            keys: [q, dq, ddq, ddz],
            noise,
        })
    }
}

impl Factor for IndepAccelerationFactor {
    fn kind(&self) -> FactorKind {
        FactorKind::IndepAccelerationConstraint
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.m() + self.mech.d()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.mech.n(), self.mech.n(), self.mech.n(), self.mech.d()]
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        Ok(self.linearize(values)?.error)
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        check_dims(values, &self.key_dims())?;
        let layout = self.mech.layout();
        let (m, n, d) = (layout.m(), layout.n(), layout.d());
        let (q, dq, ddq) = (values[0], values[1], values[2]);
        let kin = self.mech.kinematics(q, Some(dq), Some(ddq), Some(dq));
        let top = kin.dphi_q.mul_vec(dq) + kin.phi_q.mul_vec(ddq);
        let error = stack_vec(&top, &(layout.pack_dofs(ddq)? - values[3]));
        let jq = stack_rows(
            &(kin.dphiqq_w.to_dense() + kin.phiqq_v.to_dense()),
            &DMatrix::zeros(d, n),
        );
        let jdq = stack_rows(&(kin.dphi_q.to_dense() * 2.0), &DMatrix::zeros(d, n));
        let jddq = stack_rows(&kin.phi_q.to_dense(), &selection(layout.dof_idxs(), n));
        Ok(Linearization {
            error,
            jacobians: vec![jq, jdq, jddq, minus_identity_below(m, d)],
        })
    }
}

/// Dependent-coordinate dynamics `e = q̈(q, q̇[, Q]) - q̈_t`.
///
/// Keys `[q, q̇, q̈]` for forward dynamics or `[q, q̇, q̈, Q]` for inverse
/// dynamics. The applied force is gravity at `q` plus a known external
/// vector fixed at construction, plus `Q` when connected.
#[derive(Debug, Clone)]
pub struct DepDynamicsFactor {
    mech: Arc<Mechanism>,
    keys: Vec<VariableKey>,
    external: DVector<f64>,
    noise: NoiseModel,
}

impl DepDynamicsFactor {
    pub fn forward(
        mech: Arc<Mechanism>,
        q: VariableKey,
        dq: VariableKey,
        ddq: VariableKey,
        external: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        Self::build(mech, vec![q, dq, ddq], external, noise)
    }

    pub fn inverse(
        mech: Arc<Mechanism>,
        q: VariableKey,
        dq: VariableKey,
        ddq: VariableKey,
        force: VariableKey,
        external: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        Self::build(mech, vec![q, dq, ddq, force], external, noise)
    }

    fn build(
        mech: Arc<Mechanism>,
        keys: Vec<VariableKey>,
        external: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        if external.len() != mech.n() {
            return Err(Error::DimensionMismatch {
                expected: mech.n(),
                got: external.len(),
            });
        }
        noise.validate(mech.n())?;
        Ok(DepDynamicsFactor {
            mech,
            keys,
            external,
            noise,
        })
    }

    fn accel(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        let (q, dq) = (values[0], values[1]);
        let mut f = self.mech.gravity_forces(q) + &self.external;
        if let Some(force) = values.get(3) {
            f += *force;
        }
        let kin = self.mech.kinematics(q, Some(dq), None, None);
        let res = dynamics::accel_dep_with_factor(
            self.mech.mass_factor(),
            &kin.phi_q.to_dense(),
            &f,
            &kin.c,
        )?;
        Ok(res.ddq)
    }
}

impl Factor for DepDynamicsFactor {
    fn kind(&self) -> FactorKind {
        if self.keys.len() == 4 {
            FactorKind::DepInverseDynamics
        } else {
            FactorKind::DepDynamics
        }
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.n()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        vec![self.mech.n(); self.keys.len()]
    }
    fn has_numeric_jacobian(&self) -> bool {
        true
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(self.accel(values)? - values[2])
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        let error = self.error(values)?;
        let n = self.mech.n();
        let f = |v: &[&DVector<f64>]| self.accel(v);
        let mut jacobians = Vec::with_capacity(self.keys.len());
        jacobians.push(numeric_jacobian(f, values, 0, n)?);
        jacobians.push(numeric_jacobian(f, values, 1, n)?);
        jacobians.push(-DMatrix::identity(n, n));
        if self.keys.len() == 4 {
            jacobians.push(numeric_jacobian(f, values, 3, n)?);
        }
        Ok(Linearization { error, jacobians })
    }
}

/// Independent-coordinate dynamics `e = z̈(z, ż[, Q]) - z̈_t`.
///
/// Keys `[q, z, ż, z̈]` (forward) or `[q, z, ż, z̈, Q]` (inverse). The
/// connected `q` supplies the non-dof coordinates needed to evaluate
/// `R`, `Γ` and `c`; its dof slots are overwritten by `z`, and `q̇ = R ż`.
#[derive(Debug, Clone)]
pub struct IndepDynamicsFactor {
    mech: Arc<Mechanism>,
    keys: Vec<VariableKey>,
    external: DVector<f64>,
    noise: NoiseModel,
}

impl IndepDynamicsFactor {
    pub fn forward(
        mech: Arc<Mechanism>,
        q: VariableKey,
        z: VariableKey,
        dz: VariableKey,
        ddz: VariableKey,
        external: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        Self::build(mech, vec![q, z, dz, ddz], external, noise)
    }

    pub fn inverse(
        mech: Arc<Mechanism>,
        q: VariableKey,
        z: VariableKey,
        dz: VariableKey,
        ddz: VariableKey,
        force: VariableKey,
        external: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        Self::build(mech, vec![q, z, dz, ddz, force], external, noise)
    }

    fn build(
        mech: Arc<Mechanism>,
        keys: Vec<VariableKey>,
        external: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        if external.len() != mech.n() {
            return Err(Error::DimensionMismatch {
                expected: mech.n(),
                got: external.len(),
            });
        }
        noise.validate(mech.d())?;
        Ok(IndepDynamicsFactor {
            mech,
            keys,
            external,
            noise,
        })
    }

    fn accel(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        let layout = self.mech.layout();
        let q = layout.scatter_dofs(values[0], values[1])?;
        let kin0 = self.mech.kinematics(&q, None, None, None);
        let dq = dynamics::solve_velocity_problem(&kin0, layout.dof_idxs(), values[2])?;
        let kin = self.mech.kinematics(&q, Some(&dq), None, None);
        let mut f = self.mech.gravity_forces(&q) + &self.external;
        if let Some(force) = values.get(4) {
            f += *force;
        }
        Ok(
            dynamics::forward_accel_indep(self.mech.mass_matrix(), &kin, layout.dof_idxs(), &f)?
                .ddz,
        )
    }
}

impl Factor for IndepDynamicsFactor {
    fn kind(&self) -> FactorKind {
        if self.keys.len() == 5 {
            FactorKind::IndepInverseDynamics
        } else {
            FactorKind::IndepDynamics
        }
    }
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }
    fn dim(&self) -> usize {
        self.mech.d()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn key_dims(&self) -> Vec<usize> {
        let (n, d) = (self.mech.n(), self.mech.d());
        let mut dims = vec![n, d, d, d];
        if self.keys.len() == 5 {
            dims.push(n);
        }
        dims
    }
    fn has_numeric_jacobian(&self) -> bool {
        true
    }
    fn error(&self, values: &[&DVector<f64>]) -> Result<DVector<f64>> {
        check_dims(values, &self.key_dims())?;
        Ok(self.accel(values)? - values[3])
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Result<Linearization> {
        let error = self.error(values)?;
        let d = self.mech.d();
        let f = |v: &[&DVector<f64>]| self.accel(v);
        let mut jacobians = Vec::with_capacity(self.keys.len());
        for var in 0..3 {
            jacobians.push(numeric_jacobian(f, values, var, d)?);
        }
        jacobians.push(-DMatrix::identity(d, d));
        if self.keys.len() == 5 {
            jacobians.push(numeric_jacobian(f, values, 4, d)?);
        }
        Ok(Linearization { error, jacobians })
    }
}
