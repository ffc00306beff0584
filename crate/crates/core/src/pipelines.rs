//! Problem graphs and the runs built on them: forward dynamics in dependent
//! and independent coordinates, staged inverse dynamics, the classical
//! reference integrator, and trajectory comparison.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics;
use crate::error::{Error, Result};
use crate::factors::{
    DepDynamicsFactor, DepPositionFactor, DepVelocityFactor, Factor, IndepAccelerationFactor,
    IndepDynamicsFactor, IndepPositionFactor, IndepVelocityFactor, NoiseModel, PriorFactor,
    SoftEqualityFactor, TrapezoidalIntegratorFactor, VarKind, VariableKey, SURROGATE_VARIANCE,
};
use crate::linalg;
use crate::mechanism::{Mechanism, NoiseSection};
use crate::reference;
use crate::solver::{self, FactorGraph, FixedLagSmoother, LmConfig, Values, WindowReport};

/// One sample of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    pub ddq: DVector<f64>,
    /// Generalized forces, present for inverse-dynamics results.
    pub force: Option<DVector<f64>>,
}

/// Uniformly sampled states starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn new(dt: f64) -> Self {
        Trajectory {
            dt,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Coordinate count, zero for an empty trajectory.
    pub fn n(&self) -> usize {
        self.rows.first().map_or(0, |r| r.q.len())
    }

    pub fn has_forces(&self) -> bool {
        self.rows.first().is_some_and(|r| r.force.is_some())
    }

    pub fn push(&mut self, row: TrajectoryRow) -> Result<()> {
        if let Some(first) = self.rows.first() {
            let n = first.q.len();
            let dims_ok = row.q.len() == n && row.dq.len() == n && row.ddq.len() == n;
            let force_ok = match (&first.force, &row.force) {
                (Some(_), Some(f)) => f.len() == n,
                (None, None) => true,
                _ => false,
            };
            if !dims_ok || !force_ok {
                return Err(Error::config(
                    "trajectory rows must share dimensions and force columns",
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Keeps every `k`-th row.
    pub fn decimate(&self, k: usize) -> Trajectory {
        Trajectory {
            dt: self.dt * k as f64,
            rows: self.rows.iter().step_by(k.max(1)).cloned().collect(),
        }
    }

    pub fn column(&self, field: Field, coord: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| field.of(r).map_or(f64::NAN, |v| v[coord]))
            .collect()
    }

    pub fn header(&self) -> Vec<String> {
        let n = self.n();
        let mut h = vec!["t".to_string()];
        for prefix in ["q", "dq", "ddq"] {
            h.extend((0..n).map(|i| format!("{prefix}{i}")));
        }
        if self.has_forces() {
            h.extend((0..n).map(|i| format!("Q{i}")));
        }
        h
    }

    /// CSV with `#` comment lines first, values at 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![format!("{:.16e}", r.t)];
            for v in [&r.q, &r.dq, &r.ddq].into_iter().chain(r.force.as_ref()) {
                rec.extend(v.iter().map(|x| format!("{x:.16e}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, comments: &[String]) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, comments)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
        let text = self.to_csv_string(comments)?;
        File::create(path)?.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn from_csv_reader<R: Read>(input: R) -> Result<Trajectory> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("t") {
            return Err(Error::config("trajectory CSV must start with a 't' column"));
        }
        let n = header.iter().filter(|h| h.starts_with('q')).count();
        let with_force = header.iter().any(|h| h.starts_with('Q'));
        let expected = 1 + n * if with_force { 4 } else { 3 };
        if n == 0 || header.len() != expected {
            return Err(Error::config(format!(
                "unexpected trajectory CSV header with {} columns",
                header.len()
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::config(format!("bad number '{s}': {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: vals.len(),
                });
            }
            let block = |k: usize| DVector::from_column_slice(&vals[1 + k * n..1 + (k + 1) * n]);
            rows.push(TrajectoryRow {
                t: vals[0],
                q: block(0),
                dq: block(1),
                ddq: block(2),
                force: with_force.then(|| block(3)),
            });
        }
        let dt = if rows.len() > 1 {
            rows[1].t - rows[0].t
        } else {
            0.0
        };
        for (k, r) in rows.iter().enumerate() {
            if (r.t - k as f64 * dt).abs() > 1e-9 * (1.0 + r.t.abs()) {
                return Err(Error::GridMismatch(format!(
                    "row {k} at t = {} breaks the uniform grid",
                    r.t
                )));
            }
        }
        Ok(Trajectory { dt, rows })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
        Self::from_csv_reader(File::open(path)?)
    }
}

/// Trajectory quantity selected for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Q,
    Dq,
    Ddq,
    Force,
}

impl Field {
    fn of(self, row: &TrajectoryRow) -> Option<&DVector<f64>> {
        match self {
            Field::Q => Some(&row.q),
            Field::Dq => Some(&row.dq),
            Field::Ddq => Some(&row.ddq),
            Field::Force => row.force.as_ref(),
        }
    }
}

/// Root mean square of the differences, pooled over time and coordinates.
/// A trajectory sampled at an integer multiple of the other's rate is
/// decimated first.
pub fn rmse(a: &Trajectory, b: &Trajectory, field: Field) -> Result<f64> {
    let (a, b) = align(a, b)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        let (Some(va), Some(vb)) = (field.of(ra), field.of(rb)) else {
            return Err(Error::config(
                "requested field is missing from a trajectory",
            ));
        };
        sum += (va - vb).norm_squared();
        count += va.len();
    }
    if count == 0 {
        return Err(Error::GridMismatch("trajectories are empty".into()));
    }
    Ok((sum / count as f64).sqrt())
}

fn align(a: &Trajectory, b: &Trajectory) -> Result<(Trajectory, Trajectory)> {
    if a.n() != b.n() {
        return Err(Error::GridMismatch(format!(
            "coordinate counts differ ({} vs {})",
            a.n(),
            b.n()
        )));
    }
    let ratio = |fine: f64, coarse: f64| -> Option<usize> {
        if fine <= 0.0 {
            return None;
        }
        let k = (coarse / fine).round();
        (k >= 1.0 && (k * fine - coarse).abs() <= 1e-9 * coarse).then_some(k as usize)
    };
    let (a, b) = if a.len() <= 1 && b.len() <= 1 {
        (a.clone(), b.clone())
    } else if let Some(k) = ratio(a.dt, b.dt) {
        (a.decimate(k), b.clone())
    } else if let Some(k) = ratio(b.dt, a.dt) {
        (a.clone(), b.decimate(k))
    } else {
        return Err(Error::GridMismatch(format!(
            "time steps {} and {} are not commensurate",
            a.dt, b.dt
        )));
    };
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!(
            "{} rows vs {} rows after decimation",
            a.len(),
            b.len()
        )));
    }
    Ok((a, b))
}

/// Largest `‖Φ(q_t)‖∞` along a trajectory.
pub fn max_position_violation(mech: &Mechanism, traj: &Trajectory) -> f64 {
    traj.rows
        .iter()
        .map(|r| mech.kinematics(&r.q, None, None, None).phi.amax())
        .fold(0.0, f64::max)
}

/// Largest `‖Φ_q q̇_t‖∞` along a trajectory.
pub fn max_velocity_violation(mech: &Mechanism, traj: &Trajectory) -> f64 {
    traj.rows
        .iter()
        .map(|r| {
            mech.kinematics(&r.q, None, None, None)
                .phi_q
                .mul_vec(&r.dq)
                .amax()
        })
        .fold(0.0, f64::max)
}

/// Known applied forces (besides gravity) as a function of time.
#[derive(Clone, Default)]
pub enum ForceSchedule {
    #[default]
    None,
    Constant(DVector<f64>),
    Function(Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
}

impl ForceSchedule {
    pub fn at(&self, t: f64, n: usize) -> Result<DVector<f64>> {
        let f = match self {
            ForceSchedule::None => DVector::zeros(n),
            ForceSchedule::Constant(f) => f.clone(),
            ForceSchedule::Function(f) => f(t),
        };
        if f.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: f.len(),
            });
        }
        Ok(f)
    }
}

impl fmt::Debug for ForceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForceSchedule::None => write!(f, "None"),
            ForceSchedule::Constant(v) => write!(f, "Constant({:?})", v.as_slice()),
            ForceSchedule::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// Variances of every factor family. `prior_q0 = None` selects the
/// per-formulation default: hard in dependent coordinates, and
/// `10⁻³` on dof slots with `1` elsewhere in independent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub prior_q0: Option<f64>,
    pub prior_dq0: f64,
    pub integrator: f64,
    pub dynamics: f64,
    pub constraints: f64,
    pub soft_equality: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            prior_q0: None,
            prior_dq0: SURROGATE_VARIANCE,
            integrator: 1e-2,
            dynamics: 1e-4,
            constraints: SURROGATE_VARIANCE,
            soft_equality: 1e2,
        }
    }
}

impl NoiseConfig {
    /// Defaults overridden by a mechanism file's `noise` section.
    pub fn from_section(section: Option<&NoiseSection>) -> Result<Self> {
        let mut out = NoiseConfig::default();
        if let Some(s) = section {
            let pairs = [
                ("prior_q0", s.prior_q0),
                ("prior_dq0", s.prior_dq0),
                ("integrator", s.integrator),
                ("dynamics", s.dynamics),
                ("constraints", s.constraints),
                ("soft_equality", s.soft_equality),
            ];
            for (key, value) in pairs {
                if let Some(v) = value {
                    out.set(key, v)?;
                }
            }
        }
        Ok(out)
    }

    /// Sets one variance by its configuration key.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::config(format!(
                "noise '{key}' must be a positive variance, got {value}"
            )));
        }
        match key {
            "prior_q0" => self.prior_q0 = Some(value),
            "prior_dq0" => self.prior_dq0 = value,
            "integrator" => self.integrator = value,
            "dynamics" => self.dynamics = value,
            "constraints" => self.constraints = value,
            "soft_equality" => self.soft_equality = value,
            other => return Err(Error::config(format!("unknown noise key '{other}'"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    Dependent,
    Independent,
}

/// Initial state of a forward run. Independent values are completed to a
/// consistent `(q₀, q̇₀)` through the position and velocity problems.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Independent { z0: DVector<f64>, dz0: DVector<f64> },
    Dependent { q0: DVector<f64>, dq0: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct ForwardConfig {
    pub t_end: f64,
    pub dt: f64,
    pub window: usize,
    pub formulation: Formulation,
    pub initial: InitialState,
    pub external: ForceSchedule,
    pub noise: NoiseConfig,
    pub lm: LmConfig,
}

impl ForwardConfig {
    /// 5 s at 1 ms, window 2, dependent coordinates, starting at rest from
    /// the mechanism's `q0`.
    pub fn for_mechanism(mech: &Mechanism) -> Result<Self> {
        let z0 = mech.layout().pack_dofs(&reference::initial_guess(mech))?;
        Ok(ForwardConfig {
            t_end: 5.0,
            dt: 1e-3,
            window: 2,
            formulation: Formulation::Dependent,
            initial: InitialState::Independent {
                dz0: DVector::zeros(z0.len()),
                z0,
            },
            external: ForceSchedule::None,
            noise: NoiseConfig::from_section(mech.def().noise.as_ref())?,
            lm: LmConfig::default(),
        })
    }

    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::config("dt must be positive and T non-negative"));
        }
        if self.window < 2 {
            return Err(Error::config("the fixed-lag window must be at least 2"));
        }
        Ok((self.t_end / self.dt).round() as usize)
    }
}

/// Output of a forward run.
#[derive(Debug, Clone)]
pub struct ForwardRun {
    pub trajectory: Trajectory,
    /// One report per solved window.
    pub windows: Vec<WindowReport>,
    /// Every variable and factor the smoother built, shared so runs stay
    /// cheap to clone.
    pub graph: Arc<FactorGraph>,
    /// Final estimates of every variable in `graph`.
    pub values: Values,
}

impl ForwardRun {
    /// Fraction of windows that converged within `limit` iterations.
    pub fn fraction_within(&self, limit: usize) -> f64 {
        if self.windows.is_empty() {
            return 1.0;
        }
        self.windows
            .iter()
            .filter(|w| w.iterations <= limit)
            .count() as f64
            / self.windows.len() as f64
    }

    pub fn max_iterations(&self) -> usize {
        self.windows.iter().map(|w| w.iterations).max().unwrap_or(0)
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        self.windows
            .iter()
            .map(|w| w.iterations as f64)
            .sum::<f64>()
            / self.windows.len() as f64
    }
}

/// Solves the position and velocity problems for given dof values.
pub fn consistent_state(
    mech: &Mechanism,
    q_guess: &DVector<f64>,
    z: &DVector<f64>,
    dz: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let idxs = mech.layout().dof_idxs();
    let q = dynamics::solve_position_problem(mech.blocks(), q_guess, idxs, z)?.q;
    let kin = mech.kinematics(&q, None, None, None);
    let dq = dynamics::solve_velocity_problem(&kin, idxs, dz)?;
    Ok((q, dq))
}

fn initial_state(mech: &Mechanism, init: &InitialState) -> Result<(DVector<f64>, DVector<f64>)> {
    match init {
        InitialState::Independent { z0, dz0 } => {
            consistent_state(mech, &reference::initial_guess(mech), z0, dz0)
        }
        InitialState::Dependent { q0, dq0 } => {
            if q0.len() != mech.n() || dq0.len() != mech.n() {
                return Err(Error::DimensionMismatch {
                    expected: mech.n(),
                    got: q0.len().min(dq0.len()),
                });
            }
            let kin = mech.kinematics(q0, None, None, None);
            let (phi, vel) = (kin.phi.amax(), kin.phi_q.mul_vec(dq0).amax());
            if phi > 1e-9 || vel > 1e-9 {
                return Err(Error::config(format!(
                    "initial state is not consistent (|Phi| = {phi:e}, |Phi_q dq| = {vel:e})"
                )));
            }
            Ok((q0.clone(), dq0.clone()))
        }
    }
}

/// `q̈` from the dependent-coordinate equation of motion.
fn dep_accel(
    mech: &Mechanism,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    external: &DVector<f64>,
) -> Result<DVector<f64>> {
    let kin = mech.kinematics(q, Some(dq), None, None);
    let f = mech.gravity_forces(q) + external;
    Ok(dynamics::forward_accel_dep(mech.mass_matrix(), &kin, &f)?.ddq)
}

fn trapezoid(
    x: VarKind,
    dx: VarKind,
    t: usize,
    dim: usize,
    dt: f64,
    noise: f64,
) -> Result<Box<dyn Factor>> {
    Ok(Box::new(TrapezoidalIntegratorFactor::new(
        VariableKey::new(x, t - 1),
        VariableKey::new(x, t),
        VariableKey::new(dx, t - 1),
        VariableKey::new(dx, t),
        dim,
        dt,
        NoiseModel::isotropic(noise),
    )?))
}

/// Factors whose latest timestep is `t` in the dependent-coordinate graph.
fn dep_step_factors(
    mech: &Arc<Mechanism>,
    t: usize,
    dt: f64,
    noise: &NoiseConfig,
    external: DVector<f64>,
) -> Result<Vec<Box<dyn Factor>>> {
    let n = mech.n();
    let hard = NoiseModel::isotropic(noise.constraints);
    let mut out: Vec<Box<dyn Factor>> = vec![
        Box::new(DepPositionFactor::new(
            mech.clone(),
            VariableKey::q(t),
            hard.clone(),
        )?),
        Box::new(DepVelocityFactor::new(
            mech.clone(),
            VariableKey::q(t),
            VariableKey::dq(t),
            hard,
        )?),
        Box::new(DepDynamicsFactor::forward(
            mech.clone(),
            VariableKey::q(t),
            VariableKey::dq(t),
            VariableKey::ddq(t),
            external,
            NoiseModel::isotropic(noise.dynamics),
        )?),
    ];
    if t > 0 {
        out.push(trapezoid(
            VarKind::Q,
            VarKind::Dq,
            t,
            n,
            dt,
            noise.integrator,
        )?);
        out.push(trapezoid(
            VarKind::Dq,
            VarKind::Ddq,
            t,
            n,
            dt,
            noise.integrator,
        )?);
    }
    Ok(out)
}

/// Factors whose latest timestep is `t` in the independent-coordinate graph.
fn indep_step_factors(
    mech: &Arc<Mechanism>,
    t: usize,
    dt: f64,
    noise: &NoiseConfig,
    external: DVector<f64>,
) -> Result<Vec<Box<dyn Factor>>> {
    let (n, d) = (mech.n(), mech.d());
    let hard = NoiseModel::isotropic(noise.constraints);
    let (q, dq, ddq) = (VariableKey::q(t), VariableKey::dq(t), VariableKey::ddq(t));
    let (z, dz, ddz) = (VariableKey::z(t), VariableKey::dz(t), VariableKey::ddz(t));
    let mut out: Vec<Box<dyn Factor>> = vec![
        Box::new(IndepPositionFactor::new(mech.clone(), q, z, hard.clone())?),
        Box::new(IndepVelocityFactor::new(
            mech.clone(),
            q,
            dq,
            dz,
            hard.clone(),
        )?),
        Box::new(IndepAccelerationFactor::new(
            mech.clone(),
            q,
            dq,
            ddq,
            ddz,
            hard,
        )?),
        Box::new(IndepDynamicsFactor::forward(
            mech.clone(),
            q,
            z,
            dz,
            ddz,
            external,
            NoiseModel::isotropic(noise.dynamics),
        )?),
    ];
    if t > 0 {
        out.push(trapezoid(
            VarKind::Z,
            VarKind::Dz,
            t,
            d,
            dt,
            noise.integrator,
        )?);
        out.push(trapezoid(
            VarKind::Dz,
            VarKind::Ddz,
            t,
            d,
            dt,
            noise.integrator,
        )?);
        out.push(Box::new(SoftEqualityFactor::new(
            VariableKey::q(t - 1),
            q,
            n,
            NoiseModel::isotropic(noise.soft_equality),
        )?));
    }
    Ok(out)
}

fn initial_priors(
    mech: &Mechanism,
    formulation: Formulation,
    noise: &NoiseConfig,
    q0: &DVector<f64>,
    dq0: &DVector<f64>,
) -> Result<Vec<Box<dyn Factor>>> {
    let layout = mech.layout();
    let mut out: Vec<Box<dyn Factor>> = Vec::new();
    match formulation {
        Formulation::Dependent => {
            let var = noise.prior_q0.unwrap_or(SURROGATE_VARIANCE);
            out.push(Box::new(PriorFactor::new(
                VariableKey::q(0),
                q0.clone(),
                NoiseModel::isotropic(var),
            )?));
            out.push(Box::new(PriorFactor::new(
                VariableKey::dq(0),
                dq0.clone(),
                NoiseModel::isotropic(noise.prior_dq0),
            )?));
        }
        Formulation::Independent => {
            let q_noise = match noise.prior_q0 {
                Some(v) => NoiseModel::isotropic(v),
                None => {
                    let mut vars = vec![1.0; mech.n()];
                    for &i in layout.dof_idxs() {
                        vars[i] = 1e-3;
                    }
                    NoiseModel::diagonal(vars)
                }
            };
            out.push(Box::new(PriorFactor::new(
                VariableKey::q(0),
                q0.clone(),
                q_noise,
            )?));
            out.push(Box::new(PriorFactor::new(
                VariableKey::z(0),
                layout.pack_dofs(q0)?,
                NoiseModel::isotropic(SURROGATE_VARIANCE),
            )?));
            out.push(Box::new(PriorFactor::new(
                VariableKey::dz(0),
                layout.pack_dofs(dq0)?,
                NoiseModel::isotropic(noise.prior_dq0),
            )?));
        }
    }
    Ok(out)
}

fn kinds(formulation: Formulation) -> &'static [VarKind] {
    match formulation {
        Formulation::Dependent => &[VarKind::Q, VarKind::Dq, VarKind::Ddq],
        Formulation::Independent => &[
            VarKind::Q,
            VarKind::Dq,
            VarKind::Ddq,
            VarKind::Z,
            VarKind::Dz,
            VarKind::Ddz,
        ],
    }
}

/// Warm start for timestep `t` from the estimate at `t - 1`: positions
/// advance by `Δt` times the velocity, rates are held.
fn predict(
    values: &Values,
    formulation: Formulation,
    t: usize,
    dt: f64,
) -> Result<Vec<(VariableKey, DVector<f64>)>> {
    let prev = |kind| values.at(&VariableKey::new(kind, t - 1)).cloned();
    let mut out = Vec::new();
    for &kind in kinds(formulation) {
        let v = match kind {
            VarKind::Q => prev(VarKind::Q)? + prev(VarKind::Dq)? * dt,
            VarKind::Z => prev(VarKind::Z)? + prev(VarKind::Dz)? * dt,
            other => prev(other)?,
        };
        out.push((VariableKey::new(kind, t), v));
    }
    Ok(out)
}

fn collect_rows(values: &Values, upto: usize, dt: f64, forces: bool) -> Result<Trajectory> {
    let mut traj = Trajectory::new(dt);
    for t in 0..upto {
        traj.push(TrajectoryRow {
            t: t as f64 * dt,
            q: values.at(&VariableKey::q(t))?.clone(),
            dq: values.at(&VariableKey::dq(t))?.clone(),
            ddq: values.at(&VariableKey::ddq(t))?.clone(),
            force: if forces {
                Some(values.at(&VariableKey::force(t))?.clone())
            } else {
                None
            },
        })?;
    }
    Ok(traj)
}

/// Forward dynamics by fixed-lag smoothing over the chosen graph.
pub fn run_forward(mech: &Mechanism, config: &ForwardConfig) -> Result<ForwardRun> {
    let steps = config.steps()?;
    let mech = Arc::new(mech.clone());
    let (q0, dq0) = initial_state(&mech, &config.initial)?;
    let n = mech.n();
    let layout = mech.layout();
    let mut smoother = FixedLagSmoother::new(config.window, config.lm.clone())?;

    let ext0 = config.external.at(0.0, n)?;
    let ddq0 = dep_accel(&mech, &q0, &dq0, &ext0)?;
    let mut vars = vec![
        (VariableKey::q(0), q0.clone()),
        (VariableKey::dq(0), dq0.clone()),
        (VariableKey::ddq(0), ddq0.clone()),
    ];
    if config.formulation == Formulation::Independent {
        vars.push((VariableKey::z(0), layout.pack_dofs(&q0)?));
        vars.push((VariableKey::dz(0), layout.pack_dofs(&dq0)?));
        vars.push((VariableKey::ddz(0), layout.pack_dofs(&ddq0)?));
    }
    let step_factors = |t: usize| -> Result<Vec<Box<dyn Factor>>> {
        let ext = config.external.at(t as f64 * config.dt, n)?;
        match config.formulation {
            Formulation::Dependent => dep_step_factors(&mech, t, config.dt, &config.noise, ext),
            Formulation::Independent => indep_step_factors(&mech, t, config.dt, &config.noise, ext),
        }
    };
    let mut factors = initial_priors(&mech, config.formulation, &config.noise, &q0, &dq0)?;
    factors.extend(step_factors(0)?);

    let fail = |t: usize, e: Error, values: &Values| -> Error {
        let prefix = collect_rows(values, t, config.dt, false)
            .unwrap_or_else(|_| Trajectory::new(config.dt));
        Error::StepFailed {
            step: t,
            source: Box::new(e),
            prefix: Box::new(prefix),
        }
    };

    if let Err(e) = smoother.fixed_lag_step(0, vars, factors) {
        return Err(fail(0, e, smoother.values()));
    }
    for t in 1..=steps {
        let res = predict(smoother.values(), config.formulation, t, config.dt)
            .and_then(|vars| Ok((vars, step_factors(t)?)))
            .and_then(|(vars, factors)| smoother.fixed_lag_step(t, vars, factors));
        match res {
            Ok(report) => log::debug!(
                "window {t}: {} iterations, cost {:e}",
                report.iterations,
                report.cost
            ),
            Err(e) => return Err(fail(t, e, smoother.values())),
        }
    }
    let trajectory = collect_rows(smoother.values(), steps + 1, config.dt, false)?;
    let windows = smoother.reports().to_vec();
    let (graph, values) = smoother.into_parts();
    Ok(ForwardRun {
        trajectory,
        windows,
        graph: Arc::new(graph),
        values,
    })
}

/// Settings of the classical reference integrator.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// Integration substep.
    pub dt: f64,
    pub t_end: f64,
    /// Every `store_every`-th substep is recorded.
    pub store_every: usize,
    pub external: ForceSchedule,
}

impl OracleConfig {
    /// Substeps of `dt/10`, stored on the `dt` grid.
    pub fn for_grid(dt: f64, t_end: f64) -> Self {
        OracleConfig {
            dt: dt / 10.0,
            t_end,
            store_every: 10,
            external: ForceSchedule::None,
        }
    }
}

const PROJECTION_TOLERANCE: f64 = 1e-13;
const PROJECTION_MAX_ITERATIONS: usize = 20;
const FIXED_POINT_TOLERANCE: f64 = 1e-14;
const FIXED_POINT_MAX_ITERATIONS: usize = 50;

/// Newton steps of minimum norm toward `Φ(q) = 0`.
fn project_position(mech: &Mechanism, q: &mut DVector<f64>, t: f64) -> Result<()> {
    for _ in 0..PROJECTION_MAX_ITERATIONS {
        let kin = mech.kinematics(q, None, None, None);
        if kin.phi.amax() < PROJECTION_TOLERANCE {
            return Ok(());
        }
        let a = kin.phi_q.to_dense();
        let chol =
            linalg::cholesky(&(&a * a.transpose())).map_err(|_| Error::ProjectionDiverged(t))?;
        *q -= a.transpose() * chol.solve(&kin.phi);
    }
    let residual = mech.kinematics(q, None, None, None).phi.amax();
    if residual < PROJECTION_TOLERANCE * 100.0 {
        Ok(())
    } else {
        Err(Error::ProjectionDiverged(t))
    }
}

/// Least-squares correction onto `Φ_q q̇ = 0`.
fn project_velocity(
    mech: &Mechanism,
    q: &DVector<f64>,
    dq: &mut DVector<f64>,
    t: f64,
) -> Result<()> {
    if mech.m() == 0 {
        return Ok(());
    }
    let a = mech.kinematics(q, None, None, None).phi_q.to_dense();
    let chol = linalg::cholesky(&(&a * a.transpose())).map_err(|_| Error::ProjectionDiverged(t))?;
    *dq -= a.transpose() * chol.solve(&(&a * &*dq));
    Ok(())
}

/// `q̈` from the augmented (KKT) system.
fn kkt_accel(
    mech: &Mechanism,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    external: &DVector<f64>,
) -> Result<DVector<f64>> {
    let kin = mech.kinematics(q, Some(dq), None, None);
    let f = mech.gravity_forces(q) + external;
    Ok(dynamics::solve_kkt(mech.mass_matrix(), &kin.phi_q.to_dense(), &f, &kin.c)?.0)
}

/// Reference integrator: augmented-system accelerations, implicit
/// trapezoidal steps solved by fixed-point iteration, then projection of
/// positions and velocities onto the constraint manifolds.
pub fn oracle_forward(
    mech: &Mechanism,
    q0: &DVector<f64>,
    dq0: &DVector<f64>,
    config: &OracleConfig,
) -> Result<Trajectory> {
    if !(config.dt > 0.0) || config.store_every == 0 || !(config.t_end >= 0.0) {
        return Err(Error::config(
            "oracle needs a positive step and store interval",
        ));
    }
    let n = mech.n();
    if q0.len() != n || dq0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q0.len(),
        });
    }
    let h = config.dt;
    let substeps = (config.t_end / h).round() as usize;
    let mut q = q0.clone();
    let mut dq = dq0.clone();
    project_position(mech, &mut q, 0.0)?;
    project_velocity(mech, &q, &mut dq, 0.0)?;
    let mut ddq = kkt_accel(mech, &q, &dq, &config.external.at(0.0, n)?)?;
    let mut traj = Trajectory::new(h * config.store_every as f64);
    traj.push(TrajectoryRow {
        t: 0.0,
        q: q.clone(),
        dq: dq.clone(),
        ddq: ddq.clone(),
        force: None,
    })?;

    for k in 1..=substeps {
        let t = k as f64 * h;
        let ext = config.external.at(t, n)?;
        let mut q_next = &q + &dq * h + &ddq * (0.5 * h * h);
        let mut dq_next = &dq + &ddq * h;
        for _ in 0..FIXED_POINT_MAX_ITERATIONS {
            let a_next = kkt_accel(mech, &q_next, &dq_next, &ext)?;
            let dq_new = &dq + (&ddq + &a_next) * (0.5 * h);
            let q_new = &q + (&dq + &dq_new) * (0.5 * h);
            let change = (&q_new - &q_next)
                .amax()
                .max((&dq_new - &dq_next).amax() * h);
            q_next = q_new;
            dq_next = dq_new;
            if change < FIXED_POINT_TOLERANCE {
                break;
            }
        }
        project_position(mech, &mut q_next, t)?;
        project_velocity(mech, &q_next, &mut dq_next, t)?;
        q = q_next;
        dq = dq_next;
        ddq = kkt_accel(mech, &q, &dq, &ext)?;
        if k % config.store_every == 0 {
            traj.push(TrajectoryRow {
                t,
                q: q.clone(),
                dq: dq.clone(),
                ddq: ddq.clone(),
                force: None,
            })?;
        }
    }
    Ok(traj)
}

/// Inverse-dynamics problem: follow `z_ref(t)` with free forces on the
/// actuated slots of `Q`.
#[derive(Debug, Clone)]
pub struct InverseConfig {
    pub dt: f64,
    /// `z_ref` sampled at `t = kΔt`.
    pub reference: Vec<DVector<f64>>,
    /// Optional `(ż_ref, z̈_ref)` samples; finite differences otherwise.
    pub reference_rates: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
    /// Slots of `Q` left free; the rest are held at zero.
    pub actuated: Vec<usize>,
    /// Variance of the priors pulling `q(idxs)` to the reference.
    pub reference_variance: f64,
    /// Variance of a weak zero prior on the actuated forces, which fixes
    /// force directions the dynamics cannot observe. At small `dt` the
    /// integrators carry little information about `q̈`, so anything much
    /// stronger than the default visibly shrinks the recovered forces.
    pub force_variance: f64,
    pub external: ForceSchedule,
    pub noise: NoiseConfig,
    pub lm: LmConfig,
}

impl InverseConfig {
    /// Samples `reference(t) -> (z, ż, z̈)` on `[0, t_end]`.
    pub fn from_reference_fn(
        mech: &Mechanism,
        dt: f64,
        t_end: f64,
        reference: impl Fn(f64) -> (DVector<f64>, DVector<f64>, DVector<f64>),
    ) -> Result<Self> {
        if !(dt > 0.0) || !(t_end >= 0.0) {
            return Err(Error::config("dt must be positive and T non-negative"));
        }
        let steps = (t_end / dt).round() as usize;
        let (mut z, mut dz, mut ddz) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..=steps {
            let (a, b, c) = reference(k as f64 * dt);
            z.push(a);
            dz.push(b);
            ddz.push(c);
        }
        Ok(InverseConfig {
            dt,
            reference: z,
            reference_rates: Some((dz, ddz)),
            actuated: mech.torque_slots(),
            reference_variance: 1e-8,
            force_variance: 1e16,
            external: ForceSchedule::None,
            noise: NoiseConfig::from_section(mech.def().noise.as_ref())?,
            lm: LmConfig::default(),
        })
    }

    /// The crank reference `θ(t) = (π/4)(1 − cos(2πt/5))` for a one-dof mechanism.
    pub fn crank_reference(mech: &Mechanism, dt: f64, t_end: f64) -> Result<Self> {
        if mech.d() != 1 {
            return Err(Error::config("the crank reference needs exactly one dof"));
        }
        Self::from_reference_fn(mech, dt, t_end, |t| {
            let (a, b, c) = reference::theta_ref(t);
            (
                DVector::from_element(1, a),
                DVector::from_element(1, b),
                DVector::from_element(1, c),
            )
        })
    }

    fn rates(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        if let Some((dz, ddz)) = &self.reference_rates {
            return (dz.clone(), ddz.clone());
        }
        let z = &self.reference;
        let diff = |x: &[DVector<f64>]| -> Vec<DVector<f64>> {
            let k = x.len();
            (0..k)
                .map(|i| match (i, k) {
                    (_, 1) => x[0].clone() * 0.0,
                    (0, _) => (&x[1] - &x[0]) / self.dt,
                    (i, k) if i == k - 1 => (&x[k - 1] - &x[k - 2]) / self.dt,
                    (i, _) => (&x[i + 1] - &x[i - 1]) / (2.0 * self.dt),
                })
                .collect()
        };
        let dz = diff(z);
        let ddz = diff(&dz);
        (dz, ddz)
    }
}

/// Output of the staged inverse-dynamics solve.
#[derive(Debug, Clone)]
pub struct InverseRun {
    pub trajectory: Trajectory,
    /// LM iterations of stages 1 to 4.
    pub stage_iterations: [usize; 4],
    pub stage_costs: [f64; 4],
}

/// Least-squares actuator forces reproducing `ddq` at one state.
fn initial_forces(
    mech: &Mechanism,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    external: &DVector<f64>,
    actuated: &[usize],
) -> Result<DVector<f64>> {
    let n = mech.n();
    let base = dep_accel(mech, q, dq, external)?;
    let mut a = DMatrix::zeros(n, actuated.len());
    for (k, &slot) in actuated.iter().enumerate() {
        let mut unit = external.clone();
        unit[slot] += 1.0;
        a.set_column(k, &(dep_accel(mech, q, dq, &unit)? - &base));
    }
    let tau = a
        .svd(true, true)
        .solve(&(ddq - &base), 1e-12)
        .map_err(|e| Error::SolverDiverged(e.to_string()))?;
    let mut f = DVector::zeros(n);
    for (k, &slot) in actuated.iter().enumerate() {
        f[slot] = tau[k];
    }
    Ok(f)
}

/// Four batch solves over a growing graph: positions with reference
/// priors, then velocities and accelerations with integrators, then
/// velocity constraints, then forces with inverse-dynamics factors.
pub fn run_inverse(mech: &Mechanism, config: &InverseConfig) -> Result<InverseRun> {
    let n = mech.n();
    let d = mech.d();
    let idxs = mech.layout().dof_idxs().to_vec();
    if config.reference.is_empty() || config.reference.iter().any(|z| z.len() != d) {
        return Err(Error::config(format!(
            "reference must be a non-empty list of {d}-vectors"
        )));
    }
    if config.actuated.is_empty() {
        return Err(Error::config("the actuated set must not be empty"));
    }
    if let Some(&i) = config.actuated.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    if !(config.dt > 0.0) || !(config.reference_variance > 0.0) || !(config.force_variance > 0.0) {
        return Err(Error::config(
            "dt and the reference/force variances must be positive",
        ));
    }
    let (dz_ref, ddz_ref) = config.rates();
    let steps = config.reference.len() - 1;
    let dt = config.dt;
    let noise = &config.noise;
    let mech_arc = Arc::new(mech.clone());
    let hard = NoiseModel::isotropic(noise.constraints);
    let mut graph = FactorGraph::new();
    let mut values = Values::new();
    let mut stage_iterations = [0; 4];
    let mut stage_costs = [0.0; 4];
    let stage_err = |stage: usize| {
        move |e: Error| Error::StageFailed {
            stage,
            source: Box::new(e),
        }
    };

    // Stage 1: positions, reference priors, position constraints, soft equality.
    let stage = 1;
    let mut guess = reference::initial_guess(mech);
    for t in 0..=steps {
        let q =
            dynamics::solve_position_problem(mech.blocks(), &guess, &idxs, &config.reference[t])
                .map_err(stage_err(stage))?
                .q;
        graph.add_variable(VariableKey::q(t), n)?;
        values.insert(VariableKey::q(t), q.clone());
        graph.add_factor(Box::new(PriorFactor::on_components(
            VariableKey::q(t),
            n,
            idxs.clone(),
            config.reference[t].clone(),
            NoiseModel::isotropic(config.reference_variance),
        )?))?;
        graph.add_factor(Box::new(DepPositionFactor::new(
            mech_arc.clone(),
            VariableKey::q(t),
            hard.clone(),
        )?))?;
        if t > 0 {
            graph.add_factor(Box::new(SoftEqualityFactor::new(
                VariableKey::q(t - 1),
                VariableKey::q(t),
                n,
                NoiseModel::isotropic(noise.soft_equality),
            )?))?;
        }
        guess = q;
    }
    let res = solver::optimize_lm(&graph, &values, &config.lm).map_err(stage_err(stage))?;
    values = res.values;
    stage_iterations[0] = res.iterations;
    stage_costs[0] = res.cost;

    // Stage 2: rates, integrators, and priors at t = 0 that remove the
    // alternating modes the trapezoidal rule cannot see.
    let stage = 2;
    for t in 0..=steps {
        let q = values.at(&VariableKey::q(t))?.clone();
        let kin = mech.kinematics(&q, None, None, None);
        let map = dynamics::compute_r(&kin.phi_q.to_dense(), &idxs).map_err(stage_err(stage))?;
        let dq = &map.r * &dz_ref[t];
        let c = mech.kinematics(&q, Some(&dq), None, None).c;
        let ddq = map.s_times(&c) + &map.r * &ddz_ref[t];
        for (key, v) in [(VariableKey::dq(t), dq), (VariableKey::ddq(t), ddq)] {
            graph.add_variable(key, n)?;
            values.insert(key, v);
        }
        if t > 0 {
            graph.add_factor(trapezoid(
                VarKind::Q,
                VarKind::Dq,
                t,
                n,
                dt,
                noise.integrator,
            )?)?;
            graph.add_factor(trapezoid(
                VarKind::Dq,
                VarKind::Ddq,
                t,
                n,
                dt,
                noise.integrator,
            )?)?;
        }
    }
    graph.add_factor(Box::new(PriorFactor::new(
        VariableKey::dq(0),
        values.at(&VariableKey::dq(0))?.clone(),
        NoiseModel::isotropic(noise.prior_dq0),
    )?))?;
    graph.add_factor(Box::new(PriorFactor::on_components(
        VariableKey::ddq(0),
        n,
        idxs.clone(),
        ddz_ref[0].clone(),
        NoiseModel::isotropic(config.reference_variance),
    )?))?;
    let res = solver::optimize_lm(&graph, &values, &config.lm).map_err(stage_err(stage))?;
    values = res.values;
    stage_iterations[1] = res.iterations;
    stage_costs[1] = res.cost;

    // Stage 3: velocity constraints.
    let stage = 3;
    for t in 0..=steps {
        graph.add_factor(Box::new(DepVelocityFactor::new(
            mech_arc.clone(),
            VariableKey::q(t),
            VariableKey::dq(t),
            hard.clone(),
        )?))?;
    }
    let res = solver::optimize_lm(&graph, &values, &config.lm).map_err(stage_err(stage))?;
    values = res.values;
    stage_iterations[2] = res.iterations;
    stage_costs[2] = res.cost;

    // Stage 4: generalized forces and inverse dynamics.
    let stage = 4;
    let passive: Vec<usize> = (0..n).filter(|i| !config.actuated.contains(i)).collect();
    for t in 0..=steps {
        let ext = config.external.at(t as f64 * dt, n)?;
        let (q, dq, ddq) = (
            values.at(&VariableKey::q(t))?,
            values.at(&VariableKey::dq(t))?,
            values.at(&VariableKey::ddq(t))?,
        );
        let f0 =
            initial_forces(mech, q, dq, ddq, &ext, &config.actuated).map_err(stage_err(stage))?;
        let key = VariableKey::force(t);
        graph.add_variable(key, n)?;
        values.insert(key, f0);
        if !passive.is_empty() {
            graph.add_factor(Box::new(PriorFactor::on_components(
                key,
                n,
                passive.clone(),
                DVector::zeros(passive.len()),
                hard.clone(),
            )?))?;
        }
        graph.add_factor(Box::new(PriorFactor::on_components(
            key,
            n,
            config.actuated.clone(),
            DVector::zeros(config.actuated.len()),
            NoiseModel::isotropic(config.force_variance),
        )?))?;
        graph.add_factor(Box::new(DepDynamicsFactor::inverse(
            mech_arc.clone(),
            VariableKey::q(t),
            VariableKey::dq(t),
            VariableKey::ddq(t),
            key,
            ext,
            NoiseModel::isotropic(noise.dynamics),
        )?))?;
    }
    let res = solver::optimize_lm(&graph, &values, &config.lm).map_err(stage_err(stage))?;
    values = res.values;
    stage_iterations[3] = res.iterations;
    stage_costs[3] = res.cost;

    let trajectory = collect_rows(&values, steps + 1, dt, true)?;
    Ok(InverseRun {
        trajectory,
        stage_iterations,
        stage_costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, q: &[f64]) -> TrajectoryRow {
        let v = DVector::from_column_slice(q);
        TrajectoryRow {
            t,
            q: v.clone(),
            dq: v.clone() * 0.0,
            ddq: v * 0.0,
            force: None,
        }
    }

    #[test]
    fn rmse_of_constant_offset() {
        let mut a = Trajectory::new(0.1);
        let mut b = Trajectory::new(0.1);
        for k in 0..4 {
            let t = k as f64 * 0.1;
            a.push(row(t, &[0.0, 0.0, 0.0, 0.0])).unwrap();
            b.push(row(t, &[0.0, 0.3, 0.0, 0.0])).unwrap();
        }
        assert!((rmse(&a, &b, Field::Q).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(rmse(&a, &a, Field::Q).unwrap(), 0.0);
    }

    #[test]
    fn rmse_decimates_finer_grid() {
        let mut coarse = Trajectory::new(0.2);
        let mut fine = Trajectory::new(0.1);
        for k in 0..3 {
            coarse.push(row(k as f64 * 0.2, &[k as f64])).unwrap();
        }
        for k in 0..5 {
            fine.push(row(k as f64 * 0.1, &[k as f64 / 2.0])).unwrap();
        }
        assert_eq!(rmse(&coarse, &fine, Field::Q).unwrap(), 0.0);
        let mut odd = Trajectory::new(0.15);
        odd.push(row(0.0, &[0.0])).unwrap();
        odd.push(row(0.15, &[0.0])).unwrap();
        assert!(matches!(
            rmse(&coarse, &odd, Field::Q),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let mut a = Trajectory::new(0.5);
        a.push(row(0.0, &[1.0 / 3.0, -2.0])).unwrap();
        a.push(row(0.5, &[std::f64::consts::PI, 1e-300])).unwrap();
        let text = a.to_csv_string(&["iterations=3".into()]).unwrap();
        assert!(text.starts_with("# iterations=3\nt,q0,q1,dq0,dq1,ddq0,ddq1\n"));
        let b = Trajectory::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_keys() {
        let mut n = NoiseConfig::default();
        n.set("dynamics", 1e-3).unwrap();
        assert_eq!(n.dynamics, 1e-3);
        assert!(n.set("bogus", 1.0).is_err());
        assert!(n.set("integrator", -1.0).is_err());
    }
}
