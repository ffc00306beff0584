//! Planar constraint building blocks and their assembly into `Φ`, `Φ_q`,
//! `Φ̇_q` and the tensor-vector products `Φ_qq·v`, `Φ̇_qq·w`.
//!
//! Each block contributes one scalar row. Blocks work on a short local
//! coordinate list; entries that refer to fixed points carry constants and
//! drop out of every derivative.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A local coordinate of a block: a slot of `q`, or a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coord {
    Free(usize),
    Fixed(f64),
}

impl Coord {
    fn slot(self) -> Option<usize> {
        match self {
            Coord::Free(i) => Some(i),
            Coord::Fixed(_) => None,
        }
    }

    fn value(self, q: &DVector<f64>) -> f64 {
        match self {
            Coord::Free(i) => q[i],
            Coord::Fixed(x) => x,
        }
    }

    /// Time derivative (or any direction vector) component; zero when fixed.
    fn rate(self, v: Option<&DVector<f64>>) -> f64 {
        match (self, v) {
            (Coord::Free(i), Some(v)) => v[i],
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockKind {
    /// `(xj-xi)² + (yj-yi)² - L² = 0`, coords `[xi, yi, xj, yj]`.
    ConstantDistance { coords: [Coord; 4], length: f64 },
    /// Point `[x, y]` on the fixed line through `a` and `b`.
    FixedPinnedSlider {
        coords: [Coord; 2],
        a: [f64; 2],
        b: [f64; 2],
    },
    /// Point on the line through two other points, coords `[x, y, xi, yi, xj, yj]`.
    MobilePinnedSlider { coords: [Coord; 6] },
    /// Angle of the segment i→j (length `L`) against the global x axis.
    AbsoluteAngle {
        coords: [Coord; 4],
        theta: usize,
        length: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    kind: BlockKind,
}

/// Sparse row stored as `(column, value)` pairs in increasing column order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub entries: Vec<(usize, f64)>,
}

impl SparseRow {
    fn from_local(slots: &[Option<usize>], values: &[f64]) -> Self {
        let mut entries: Vec<(usize, f64)> = slots
            .iter()
            .zip(values)
            .filter_map(|(s, &v)| s.map(|i| (i, v)))
            .collect();
        entries.sort_by_key(|e| e.0);
        SparseRow { entries }
    }

    pub fn dot(&self, v: &DVector<f64>) -> f64 {
        self.entries.iter().map(|&(i, x)| x * v[i]).sum()
    }

    pub fn to_dense(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for &(i, x) in &self.entries {
            out[i] += x;
        }
        out
    }
}

/// Row-major sparse matrix made of [`SparseRow`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    rows: Vec<SparseRow>,
}

impl SparseRows {
    pub fn new(ncols: usize, rows: Vec<SparseRow>) -> Self {
        SparseRows { ncols, rows }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.dot(v)))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), self.ncols);
        for (k, r) in self.rows.iter().enumerate() {
            for &(i, x) in &r.entries {
                out[(k, i)] += x;
            }
        }
        out
    }
}

/// Everything one block contributes at a given state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEval {
    pub phi: f64,
    pub phi_q: SparseRow,
    /// Row of `Φ̇_q = Φ_qq·q̇`.
    pub dphi_q: SparseRow,
    pub phiqq_times_v: SparseRow,
    pub dotphiqq_times_v: SparseRow,
}

struct Local {
    phi: f64,
    grad: Vec<f64>,
    hess_v: Vec<f64>,
    hess_dq: Vec<f64>,
    dhess_w: Vec<f64>,
}

impl ConstraintBlock {
    pub fn new(kind: BlockKind) -> Result<Self> {
        match &kind {
            BlockKind::ConstantDistance { length, .. }
            | BlockKind::AbsoluteAngle { length, .. } => {
                if !(*length > 0.0) {
                    return Err(Error::config("constraint length must be positive"));
                }
            }
            BlockKind::FixedPinnedSlider { a, b, .. } => {
                if a == b {
                    return Err(Error::config("fixed slider line needs two distinct points"));
                }
            }
            BlockKind::MobilePinnedSlider { .. } => {}
        }
        Ok(ConstraintBlock { kind })
    }

    pub fn kind(&self) -> &BlockKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            BlockKind::ConstantDistance { .. } => "constant-distance",
            BlockKind::FixedPinnedSlider { .. } => "fixed-pinned-slider",
            BlockKind::MobilePinnedSlider { .. } => "mobile-pinned-slider",
            BlockKind::AbsoluteAngle { .. } => "absolute-angle",
        }
    }

    fn local_coords(&self) -> Vec<Coord> {
        match &self.kind {
            BlockKind::ConstantDistance { coords, .. } => coords.to_vec(),
            BlockKind::FixedPinnedSlider { coords, .. } => coords.to_vec(),
            BlockKind::MobilePinnedSlider { coords } => coords.to_vec(),
            BlockKind::AbsoluteAngle { coords, theta, .. } => {
                let mut c = coords.to_vec();
                c.push(Coord::Free(*theta));
                c
            }
        }
    }

    /// Slots of `q` this block touches, in local order.
    pub fn involved(&self) -> Vec<usize> {
        self.local_coords()
            .into_iter()
            .filter_map(Coord::slot)
            .collect()
    }

    /// Evaluates the block. `v` multiplies `Φ_qq`, `w` multiplies `Φ̇_qq`;
    /// absent vectors are treated as zero.
    pub fn eval(
        &self,
        q: &DVector<f64>,
        dq: Option<&DVector<f64>>,
        v: Option<&DVector<f64>>,
        w: Option<&DVector<f64>>,
    ) -> BlockEval {
        let coords = self.local_coords();
        let x: Vec<f64> = coords.iter().map(|c| c.value(q)).collect();
        let dx: Vec<f64> = coords.iter().map(|c| c.rate(dq)).collect();
        let vx: Vec<f64> = coords.iter().map(|c| c.rate(v)).collect();
        let wx: Vec<f64> = coords.iter().map(|c| c.rate(w)).collect();
        let local = self.eval_local(&x, &dx, &vx, &wx);
        let slots: Vec<Option<usize>> = coords.iter().map(|c| c.slot()).collect();
        BlockEval {
            phi: local.phi,
            phi_q: SparseRow::from_local(&slots, &local.grad),
            dphi_q: SparseRow::from_local(&slots, &local.hess_dq),
            phiqq_times_v: SparseRow::from_local(&slots, &local.hess_v),
            dotphiqq_times_v: SparseRow::from_local(&slots, &local.dhess_w),
        }
    }

    fn eval_local(&self, x: &[f64], dx: &[f64], v: &[f64], w: &[f64]) -> Local {
        match &self.kind {
            BlockKind::ConstantDistance { length, .. } => {
                let (xi, yi, xj, yj) = (x[0], x[1], x[2], x[3]);
                let hess = |u: &[f64]| {
                    vec![
                        2.0 * (u[0] - u[2]),
                        2.0 * (u[1] - u[3]),
                        2.0 * (u[2] - u[0]),
                        2.0 * (u[3] - u[1]),
                    ]
                };
                Local {
                    phi: (xj - xi).powi(2) + (yj - yi).powi(2) - length * length,
                    grad: vec![
                        2.0 * (xi - xj),
                        2.0 * (yi - yj),
                        2.0 * (xj - xi),
                        2.0 * (yj - yi),
                    ],
                    hess_v: hess(v),
                    hess_dq: hess(dx),
                    dhess_w: vec![0.0; 4],
                }
            }
            BlockKind::FixedPinnedSlider { a, b, .. } => {
                let (px, py) = (x[0], x[1]);
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                Local {
                    phi: ex * (py - a[1]) - ey * (px - a[0]),
                    grad: vec![-ey, ex],
                    hess_v: vec![0.0; 2],
                    hess_dq: vec![0.0; 2],
                    dhess_w: vec![0.0; 2],
                }
            }
            BlockKind::MobilePinnedSlider { .. } => {
                let (px, py, xi, yi, xj, yj) = (x[0], x[1], x[2], x[3], x[4], x[5]);
                let hess = |u: &[f64]| {
                    vec![
                        u[3] - u[5],
                        u[4] - u[2],
                        u[5] - u[1],
                        u[0] - u[4],
                        u[1] - u[3],
                        u[2] - u[0],
                    ]
                };
                Local {
                    phi: (xj - xi) * (py - yi) - (yj - yi) * (px - xi),
                    grad: vec![yi - yj, xj - xi, yj - py, px - xj, py - yi, xi - px],
                    hess_v: hess(v),
                    hess_dq: hess(dx),
                    dhess_w: vec![0.0; 6],
                }
            }
            BlockKind::AbsoluteAngle { length, .. } => {
                let l = *length;
                let (xi, yi, xj, yj, th) = (x[0], x[1], x[2], x[3], x[4]);
                let (s, c) = th.sin_cos();
                let dth = dx[4];
                if s.abs() > FRAC_1_SQRT_2 {
                    Local {
                        phi: xj - xi - l * c,
                        grad: vec![-1.0, 0.0, 1.0, 0.0, l * s],
                        hess_v: vec![0.0, 0.0, 0.0, 0.0, l * c * v[4]],
                        hess_dq: vec![0.0, 0.0, 0.0, 0.0, l * c * dth],
                        dhess_w: vec![0.0, 0.0, 0.0, 0.0, -l * dth * s * w[4]],
                    }
                } else {
                    Local {
                        phi: yj - yi - l * s,
                        grad: vec![0.0, -1.0, 0.0, 1.0, -l * c],
                        hess_v: vec![0.0, 0.0, 0.0, 0.0, l * s * v[4]],
                        hess_dq: vec![0.0, 0.0, 0.0, 0.0, l * s * dth],
                        dhess_w: vec![0.0, 0.0, 0.0, 0.0, l * dth * c * w[4]],
                    }
                }
            }
        }
    }
}

/// Validates a block list against a coordinate count.
pub fn check_blocks(blocks: &[ConstraintBlock], n: usize) -> Result<()> {
    for (k, b) in blocks.iter().enumerate() {
        let involved = b.involved();
        for (a, &i) in involved.iter().enumerate() {
            if i >= n {
                return Err(Error::config(format!(
                    "block {k} refers to coordinate {i} but n = {n}"
                )));
            }
            if involved[..a].contains(&i) {
                return Err(Error::config(format!(
                    "block {k} uses coordinate {i} twice"
                )));
            }
        }
        if involved.is_empty() {
            return Err(Error::config(format!(
                "block {k} involves no mobile coordinate"
            )));
        }
        if let Some(j) = blocks[..k].iter().position(|other| other == b) {
            return Err(Error::config(format!("block {k} duplicates block {j}")));
        }
    }
    Ok(())
}

/// Whole-mechanism kinematic quantities at one state.
#[derive(Debug, Clone)]
pub struct AssembledKinematics {
    pub phi: DVector<f64>,
    pub phi_q: SparseRows,
    pub dphi_q: SparseRows,
    /// `Φ_qq·v` for the caller's `v` (zero rows when none was given).
    pub phiqq_v: SparseRows,
    /// `Φ̇_qq·w` for the caller's `w`.
    pub dphiqq_w: SparseRows,
    /// `-Φ_t`; identically zero for the scleronomic blocks above.
    pub b: DVector<f64>,
    /// `-Φ̇_q q̇`.
    pub c: DVector<f64>,
}

pub fn assemble(
    blocks: &[ConstraintBlock],
    n: usize,
    q: &DVector<f64>,
    dq: Option<&DVector<f64>>,
    v: Option<&DVector<f64>>,
    w: Option<&DVector<f64>>,
) -> Result<AssembledKinematics> {
    check_blocks(blocks, n)?;
    for (vec, _name) in [(Some(q), "q"), (dq, "dq"), (v, "v"), (w, "w")] {
        if let Some(x) = vec {
            if x.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: x.len(),
                });
            }
        }
    }
    Ok(assemble_unchecked(blocks, n, q, dq, v, w))
}

/// As [`assemble`] without validation; used on hot paths where the block
/// list comes from an already validated [`crate::Mechanism`].
pub(crate) fn assemble_unchecked(
    blocks: &[ConstraintBlock],
    n: usize,
    q: &DVector<f64>,
    dq: Option<&DVector<f64>>,
    v: Option<&DVector<f64>>,
    w: Option<&DVector<f64>>,
) -> AssembledKinematics {
    let m = blocks.len();
    let mut phi = DVector::zeros(m);
    let mut phi_q = Vec::with_capacity(m);
    let mut dphi_q = Vec::with_capacity(m);
    let mut phiqq_v = Vec::with_capacity(m);
    let mut dphiqq_w = Vec::with_capacity(m);
    for (k, b) in blocks.iter().enumerate() {
        let e = b.eval(q, dq, v, w);
        phi[k] = e.phi;
        phi_q.push(e.phi_q);
        dphi_q.push(e.dphi_q);
        phiqq_v.push(e.phiqq_times_v);
        dphiqq_w.push(e.dotphiqq_times_v);
    }
    let dphi_q = SparseRows::new(n, dphi_q);
    let c = match dq {
        Some(dq) => -dphi_q.mul_vec(dq),
        None => DVector::zeros(m),
    };
    AssembledKinematics {
        phi,
        phi_q: SparseRows::new(n, phi_q),
        dphi_q,
        phiqq_v: SparseRows::new(n, phiqq_v),
        dphiqq_w: SparseRows::new(n, dphiqq_w),
        b: DVector::zeros(m),
        c,
    }
}
