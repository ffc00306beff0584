//! Static description of a planar mechanism and the quantities derived from
//! it once: coordinate layout, constant mass matrix, gravity loads.
//!
//! Mobile points contribute two consecutive coordinates `(x, y)` to `q`, in
//! declaration order; relative coordinates (absolute link angles) follow,
//! one slot each.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{self, AssembledKinematics, BlockKind, ConstraintBlock, Coord};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseCholesky};

/// Standard gravity used throughout, acting along -y.
pub const DEFAULT_GRAVITY: f64 = 9.8;

/// Diagonal mass given to a relative coordinate that carries no body inertia.
pub const MASS_REGULARIZATION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDef {
    pub id: String,
    pub fixed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xy: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InertiaModel {
    /// Consistent mass of a uniform rod interpolated linearly between its endpoints.
    UniformRod,
    /// Half the mass lumped at each endpoint.
    PointMassesAtEnds,
    /// Rod rotating about a fixed pivot; inertia lives on the attached angle.
    RotationalOnRelativeCoord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub endpoints: [String; 2],
    pub length: f64,
    pub mass: f64,
    pub inertia_model: InertiaModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelativeCoordKind {
    AbsoluteAngle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeCoordDef {
    pub id: String,
    pub kind: RelativeCoordKind,
    /// Body id, or its index in `bodies` written as a decimal string.
    pub attached_body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia_about_pivot: Option<f64>,
    #[serde(default)]
    pub applied_torque_slot: bool,
}

/// Explicit constraint entries of the mechanism file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintDef {
    ConstantDistance {
        points: [String; 2],
        length: f64,
    },
    FixedPinnedSlider {
        point: String,
        line: [[f64; 2]; 2],
    },
    MobilePinnedSlider {
        point: String,
        line_points: [String; 2],
    },
}

/// Table-2 style noise configuration; every value is a variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_q0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_dq0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_equality: Option<f64>,
}

/// The mechanism description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismDef {
    pub points: Vec<PointDef>,
    pub bodies: Vec<BodyDef>,
    #[serde(default)]
    pub relative_coords: Vec<RelativeCoordDef>,
    #[serde(default)]
    pub constraints: Vec<ConstraintDef>,
    pub dof_idxs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<f64>,
    /// Approximate initial configuration, used for the dof rank check and
    /// as the starting guess of the position problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
}

impl MechanismDef {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// What a slot of `q` represents.
#[derive(Debug, Clone, PartialEq)]
pub enum CoordinateRole {
    PointX(usize),
    PointY(usize),
    Relative(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateLayout {
    n: usize,
    m: usize,
    /// First slot of every point; `None` for fixed points.
    point_slots: Vec<Option<usize>>,
    relative_slots: Vec<usize>,
    roles: Vec<CoordinateRole>,
    names: Vec<String>,
    dof_idxs: Vec<usize>,
}

impl CoordinateLayout {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Degrees of freedom, `n - m`.
    pub fn f(&self) -> usize {
        self.n - self.m
    }

    pub fn d(&self) -> usize {
        self.dof_idxs.len()
    }

    pub fn dof_idxs(&self) -> &[usize] {
        &self.dof_idxs
    }

    pub fn point_slot(&self, point: usize) -> Option<usize> {
        self.point_slots[point]
    }

    pub fn relative_slot(&self, coord: usize) -> usize {
        self.relative_slots[coord]
    }

    pub fn role(&self, idx: usize) -> &CoordinateRole {
        &self.roles[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `z = q({idxs})`.
    pub fn pack_dofs(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        pack(q, &self.dof_idxs)
    }

    /// Copy of `q` with the dof slots overwritten by `z`.
    pub fn scatter_dofs(&self, q: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        scatter(q, &self.dof_idxs, z)
    }
}

/// Gathers `q[idxs[k]]` into a new vector, in the order of `idxs`.
pub fn pack(q: &DVector<f64>, idxs: &[usize]) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(idxs.len());
    for (k, &i) in idxs.iter().enumerate() {
        if i >= q.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: q.len(),
            });
        }
        out[k] = q[i];
    }
    Ok(out)
}

/// Inverse of [`pack`]: writes `z` into a copy of `q`.
pub fn scatter(q: &DVector<f64>, idxs: &[usize], z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != idxs.len() {
        return Err(Error::DimensionMismatch {
            expected: idxs.len(),
            got: z.len(),
        });
    }
    let mut out = q.clone();
    for (k, &i) in idxs.iter().enumerate() {
        if i >= q.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: q.len(),
            });
        }
        out[i] = z[k];
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MassModel {
    pub m: DMatrix<f64>,
}

/// A validated mechanism: definition plus everything derived from it.
#[derive(Debug, Clone)]
pub struct Mechanism {
    def: MechanismDef,
    layout: CoordinateLayout,
    blocks: Vec<ConstraintBlock>,
    mass: MassModel,
    mass_factor: DenseCholesky,
    gravity: f64,
    /// For every body, the relative coordinate carrying its inertia, if any.
    body_rotational_coord: Vec<Option<usize>>,
    /// Index of the fixed endpoint (0 or 1) for pivoted bodies.
    body_pivot: Vec<Option<usize>>,
}

impl Mechanism {
    pub fn from_def(def: MechanismDef) -> Result<Self> {
        let point_index: HashMap<&str, usize> =
            unique_index(def.points.iter().map(|p| p.id.as_str()), "point")?;
        for p in &def.points {
            match (p.fixed, p.xy) {
                (true, None) => {
                    return Err(Error::config(format!(
                        "fixed point '{}' has no coordinates",
                        p.id
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::config(format!(
                        "mobile point '{}' must not carry coordinates",
                        p.id
                    )))
                }
                _ => {}
            }
        }
        let body_ids: Vec<String> = def
            .bodies
            .iter()
            .enumerate()
            .map(|(k, b)| b.id.clone().unwrap_or_else(|| k.to_string()))
            .collect();
        let body_index = unique_index(body_ids.iter().map(String::as_str), "body")?;
        unique_index(
            def.relative_coords.iter().map(|r| r.id.as_str()),
            "relative coordinate",
        )?;

        let lookup_point = |id: &str| -> Result<usize> {
            point_index
                .get(id)
                .copied()
                .ok_or_else(|| Error::config(format!("unknown point '{id}'")))
        };

        // Layout: mobile points first, then relative coordinates.
        let mut point_slots = Vec::with_capacity(def.points.len());
        let mut roles = Vec::new();
        let mut names = Vec::new();
        for (k, p) in def.points.iter().enumerate() {
            if p.fixed {
                point_slots.push(None);
            } else {
                point_slots.push(Some(roles.len()));
                roles.push(CoordinateRole::PointX(k));
                names.push(format!("{}.x", p.id));
                roles.push(CoordinateRole::PointY(k));
                names.push(format!("{}.y", p.id));
            }
        }
        let mut relative_slots = Vec::new();
        for (k, r) in def.relative_coords.iter().enumerate() {
            relative_slots.push(roles.len());
            roles.push(CoordinateRole::Relative(k));
            names.push(r.id.clone());
        }
        let n = roles.len();

        let coord_of = |point: usize, axis: usize| -> Coord {
            match point_slots[point] {
                Some(s) => Coord::Free(s + axis),
                None => Coord::Fixed(def.points[point].xy.expect("validated")[axis]),
            }
        };

        let mut body_endpoints = Vec::with_capacity(def.bodies.len());
        for (k, b) in def.bodies.iter().enumerate() {
            if !(b.length > 0.0) {
                return Err(Error::config(format!(
                    "body '{}' has non-positive length",
                    body_ids[k]
                )));
            }
            if !(b.mass >= 0.0) {
                return Err(Error::config(format!(
                    "body '{}' has negative mass",
                    body_ids[k]
                )));
            }
            let i = lookup_point(&b.endpoints[0])?;
            let j = lookup_point(&b.endpoints[1])?;
            if i == j {
                return Err(Error::config(format!(
                    "body '{}' connects a point to itself",
                    body_ids[k]
                )));
            }
            body_endpoints.push([i, j]);
        }

        // Relative coordinates and the bodies they attach to.
        let mut body_rotational_coord = vec![None; def.bodies.len()];
        let mut body_pivot = vec![None; def.bodies.len()];
        let mut relative_body = Vec::with_capacity(def.relative_coords.len());
        for (k, r) in def.relative_coords.iter().enumerate() {
            let b = *body_index.get(r.attached_body.as_str()).ok_or_else(|| {
                Error::config(format!(
                    "relative coordinate '{}' attaches to unknown body '{}'",
                    r.id, r.attached_body
                ))
            })?;
            let [i, j] = body_endpoints[b];
            let fixed_i = def.points[i].fixed;
            let fixed_j = def.points[j].fixed;
            if fixed_i && fixed_j {
                return Err(Error::config(format!(
                    "relative coordinate '{}' is declared on body '{}' whose endpoints are both fixed",
                    r.id, body_ids[b]
                )));
            }
            if fixed_i != fixed_j {
                body_pivot[b] = Some(if fixed_i { 0 } else { 1 });
            }
            if def.bodies[b].inertia_model == InertiaModel::RotationalOnRelativeCoord {
                if body_pivot[b].is_none() {
                    return Err(Error::config(format!(
                        "body '{}' uses rotational inertia but has no fixed pivot",
                        body_ids[b]
                    )));
                }
                if body_rotational_coord[b].replace(k).is_some() {
                    return Err(Error::config(format!(
                        "body '{}' has two rotational coordinates",
                        body_ids[b]
                    )));
                }
            }
            relative_body.push(b);
        }
        for (b, body) in def.bodies.iter().enumerate() {
            if body.inertia_model == InertiaModel::RotationalOnRelativeCoord
                && body_rotational_coord[b].is_none()
            {
                return Err(Error::config(format!(
                    "body '{}' uses rotational inertia but no relative coordinate is attached",
                    body_ids[b]
                )));
            }
        }

        // Constraint blocks: bodies, then relative coordinates, then explicit entries.
        let mut blocks = Vec::new();
        for (b, body) in def.bodies.iter().enumerate() {
            let [i, j] = body_endpoints[b];
            if def.points[i].fixed && def.points[j].fixed {
                continue;
            }
            blocks.push(ConstraintBlock::new(BlockKind::ConstantDistance {
                coords: [
                    coord_of(i, 0),
                    coord_of(i, 1),
                    coord_of(j, 0),
                    coord_of(j, 1),
                ],
                length: body.length,
            })?);
        }
        for (k, &b) in relative_body.iter().enumerate() {
            let [mut i, mut j] = body_endpoints[b];
            // Measure the angle from the pivot towards the free end.
            if body_pivot[b] == Some(1) {
                std::mem::swap(&mut i, &mut j);
            }
            blocks.push(ConstraintBlock::new(BlockKind::AbsoluteAngle {
                coords: [
                    coord_of(i, 0),
                    coord_of(i, 1),
                    coord_of(j, 0),
                    coord_of(j, 1),
                ],
                theta: relative_slots[k],
                length: def.bodies[b].length,
            })?);
        }
        for c in &def.constraints {
            let kind = match c {
                ConstraintDef::ConstantDistance { points, length } => {
                    let i = lookup_point(&points[0])?;
                    let j = lookup_point(&points[1])?;
                    BlockKind::ConstantDistance {
                        coords: [
                            coord_of(i, 0),
                            coord_of(i, 1),
                            coord_of(j, 0),
                            coord_of(j, 1),
                        ],
                        length: *length,
                    }
                }
                ConstraintDef::FixedPinnedSlider { point, line } => {
                    let p = lookup_point(point)?;
                    BlockKind::FixedPinnedSlider {
                        coords: [coord_of(p, 0), coord_of(p, 1)],
                        a: line[0],
                        b: line[1],
                    }
                }
                ConstraintDef::MobilePinnedSlider { point, line_points } => {
                    let p = lookup_point(point)?;
                    let i = lookup_point(&line_points[0])?;
                    let j = lookup_point(&line_points[1])?;
                    BlockKind::MobilePinnedSlider {
                        coords: [
                            coord_of(p, 0),
                            coord_of(p, 1),
                            coord_of(i, 0),
                            coord_of(i, 1),
                            coord_of(j, 0),
                            coord_of(j, 1),
                        ],
                    }
                }
            };
            blocks.push(ConstraintBlock::new(kind)?);
        }
        crate::constraints::check_blocks(&blocks, n)?;

        let m = blocks.len();
        if m > n {
            return Err(Error::config(format!(
                "{m} constraints for only {n} coordinates"
            )));
        }
        let mut dof_seen = vec![false; n];
        for &i in &def.dof_idxs {
            if i >= n {
                return Err(Error::config(format!(
                    "dof index {i} out of range (n = {n})"
                )));
            }
            if std::mem::replace(&mut dof_seen[i], true) {
                return Err(Error::config(format!("dof index {i} declared twice")));
            }
        }
        if def.dof_idxs.len() != n - m {
            return Err(Error::config(format!(
                "{} dofs declared but the mechanism has n - m = {} degrees of freedom",
                def.dof_idxs.len(),
                n - m
            )));
        }

        let layout = CoordinateLayout {
            n,
            m,
            point_slots,
            relative_slots,
            roles,
            names,
            dof_idxs: def.dof_idxs.clone(),
        };
        let gravity = def.gravity.unwrap_or(DEFAULT_GRAVITY);
        if !(gravity >= 0.0) {
            return Err(Error::config("gravity must be non-negative"));
        }

        let mut mech = Mechanism {
            mass: MassModel {
                m: DMatrix::zeros(n, n),
            },
            mass_factor: linalg::cholesky(&DMatrix::identity(n, n)).expect("identity"),
            def,
            layout,
            blocks,
            gravity,
            body_rotational_coord,
            body_pivot,
        };
        mech.mass = MassModel {
            m: mech.assemble_mass_matrix()?,
        };
        mech.mass_factor = linalg::cholesky(&mech.mass.m).expect("checked in assemble_mass_matrix");
        Ok(mech)
    }

    pub fn def(&self) -> &MechanismDef {
        &self.def
    }

    pub fn layout(&self) -> &CoordinateLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[ConstraintBlock] {
        &self.blocks
    }

    pub fn mass_matrix(&self) -> &DMatrix<f64> {
        &self.mass.m
    }

    pub(crate) fn mass_factor(&self) -> &DenseCholesky {
        &self.mass_factor
    }

    /// Assembled kinematics at `q` (see [`constraints::assemble`]).
    pub fn kinematics(
        &self,
        q: &DVector<f64>,
        dq: Option<&DVector<f64>>,
        v: Option<&DVector<f64>>,
        w: Option<&DVector<f64>>,
    ) -> AssembledKinematics {
        constraints::assemble_unchecked(&self.blocks, self.layout.n, q, dq, v, w)
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    /// Same mechanism under a different gravity magnitude.
    pub fn with_gravity(&self, g: f64) -> Self {
        let mut out = self.clone();
        out.gravity = g;
        out.def.gravity = Some(g);
        out
    }

    pub fn n(&self) -> usize {
        self.layout.n
    }

    pub fn m(&self) -> usize {
        self.layout.m
    }

    pub fn d(&self) -> usize {
        self.layout.d()
    }

    fn point_coord_slots(&self, point: usize) -> [Option<usize>; 2] {
        match self.layout.point_slots[point] {
            Some(s) => [Some(s), Some(s + 1)],
            None => [None, None],
        }
    }

    fn body_points(&self, body: usize) -> [usize; 2] {
        let b = &self.def.bodies[body];
        let find = |id: &str| {
            self.def
                .points
                .iter()
                .position(|p| p.id == id)
                .expect("validated")
        };
        [find(&b.endpoints[0]), find(&b.endpoints[1])]
    }

    /// Constant mass matrix summed body by body.
    pub fn assemble_mass_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.layout.n;
        let mut mm = DMatrix::zeros(n, n);
        let mut relative_has_inertia = vec![false; self.def.relative_coords.len()];
        for (b, body) in self.def.bodies.iter().enumerate() {
            let [i, j] = self.body_points(b);
            let [xi, yi] = self.point_coord_slots(i);
            let [xj, yj] = self.point_coord_slots(j);
            let slots = [xi, yi, xj, yj];
            match body.inertia_model {
                InertiaModel::UniformRod => {
                    let c = body.mass / 6.0;
                    let local = [
                        [2.0, 0.0, 1.0, 0.0],
                        [0.0, 2.0, 0.0, 1.0],
                        [1.0, 0.0, 2.0, 0.0],
                        [0.0, 1.0, 0.0, 2.0],
                    ];
                    for (r, sr) in slots.iter().enumerate() {
                        for (s, sc) in slots.iter().enumerate() {
                            if let (Some(a), Some(bb)) = (sr, sc) {
                                mm[(*a, *bb)] += c * local[r][s];
                            }
                        }
                    }
                }
                InertiaModel::PointMassesAtEnds => {
                    for s in slots.iter().flatten() {
                        mm[(*s, *s)] += body.mass / 2.0;
                    }
                }
                InertiaModel::RotationalOnRelativeCoord => {
                    let k = self.body_rotational_coord[b].expect("validated");
                    let inertia = self.def.relative_coords[k]
                        .inertia_about_pivot
                        .unwrap_or(body.mass * body.length * body.length / 3.0);
                    let s = self.layout.relative_slots[k];
                    mm[(s, s)] += inertia;
                    relative_has_inertia[k] = inertia > 0.0;
                }
            }
        }
        for (k, has) in relative_has_inertia.iter().enumerate() {
            if !has {
                let s = self.layout.relative_slots[k];
                mm[(s, s)] += MASS_REGULARIZATION;
            }
        }
        if let Err(pivot) = linalg::cholesky(&mm) {
            return Err(Error::config(format!(
                "mass matrix is singular: coordinate '{}' receives no inertia",
                self.layout.names[pivot]
            )));
        }
        Ok(mm)
    }

    /// Generalized gravity loads at `q` (consistent nodal loads on points,
    /// moment about the pivot on rotational coordinates).
    pub fn gravity_forces(&self, q: &DVector<f64>) -> DVector<f64> {
        let g = self.gravity;
        let mut f = DVector::zeros(self.layout.n);
        if g == 0.0 {
            return f;
        }
        for (b, body) in self.def.bodies.iter().enumerate() {
            let [i, j] = self.body_points(b);
            match body.inertia_model {
                InertiaModel::UniformRod | InertiaModel::PointMassesAtEnds => {
                    for p in [i, j] {
                        if let [_, Some(y)] = self.point_coord_slots(p) {
                            f[y] -= body.mass * g / 2.0;
                        }
                    }
                }
                InertiaModel::RotationalOnRelativeCoord => {
                    let k = self.body_rotational_coord[b].expect("validated");
                    let s = self.layout.relative_slots[k];
                    f[s] -= body.mass * g * body.length / 2.0 * q[s].cos();
                }
            }
        }
        f
    }

    /// Potential energy `sum_i m_i g y_cm,i`.
    pub fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let mut v = 0.0;
        for (b, body) in self.def.bodies.iter().enumerate() {
            let y_cm = match body.inertia_model {
                InertiaModel::RotationalOnRelativeCoord => {
                    let k = self.body_rotational_coord[b].expect("validated");
                    let pivot = self.body_points(b)[self.body_pivot[b].expect("validated")];
                    let y0 = self.point_y(pivot, q);
                    y0 + body.length / 2.0 * q[self.layout.relative_slots[k]].sin()
                }
                _ => {
                    let [i, j] = self.body_points(b);
                    0.5 * (self.point_y(i, q) + self.point_y(j, q))
                }
            };
            v += body.mass * self.gravity * y_cm;
        }
        v
    }

    /// Kinetic plus potential energy.
    pub fn total_energy(&self, q: &DVector<f64>, dq: &DVector<f64>) -> f64 {
        0.5 * dq.dot(&(&self.mass.m * dq)) + self.potential_energy(q)
    }

    /// Current `(x, y)` of a point, fixed or mobile.
    pub fn point_position(&self, point: usize, q: &DVector<f64>) -> [f64; 2] {
        match self.layout.point_slots[point] {
            Some(s) => [q[s], q[s + 1]],
            None => self.def.points[point].xy.expect("validated"),
        }
    }

    fn point_y(&self, point: usize, q: &DVector<f64>) -> f64 {
        self.point_position(point, q)[1]
    }

    /// Relative coordinates flagged as actuated, as slots in `q`.
    pub fn torque_slots(&self) -> Vec<usize> {
        self.def
            .relative_coords
            .iter()
            .enumerate()
            .filter(|(_, r)| r.applied_torque_slot)
            .map(|(k, _)| self.layout.relative_slots[k])
            .collect()
    }

    /// Index of a point by id.
    pub fn point_index(&self, id: &str) -> Option<usize> {
        self.def.points.iter().position(|p| p.id == id)
    }
}

fn unique_index<'a>(
    ids: impl Iterator<Item = &'a str>,
    what: &str,
) -> Result<HashMap<&'a str, usize>> {
    let mut map = HashMap::new();
    for (k, id) in ids.enumerate() {
        if map.insert(id, k).is_some() {
            return Err(Error::config(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(map)
}
