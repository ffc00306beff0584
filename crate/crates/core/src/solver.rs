//! Sparse nonlinear least squares over a factor graph.
//!
//! The cost is `Σ ½ eᵢᵀ Λᵢ eᵢ`. Each Levenberg-Marquardt iteration assembles
//! the normal equations `JᵀJ δ = -Jᵀr` of the whitened system into a
//! skyline (profile) matrix. Columns are ordered by `(timestep, kind)`, so
//! the chain graphs built by the pipelines give a narrow envelope and a
//! factorization cost linear in the horizon length.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Bound;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factors::{Factor, Linearization, VarKind, VariableKey};

/// Linearizations are spread over the rayon pool once a problem has at
/// least this many active factors.
const PARALLEL_THRESHOLD: usize = 128;

/// Largest damping tolerated before the solver gives up.
const MAX_DAMPING: f64 = 1e10;

/// Current estimate of every variable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values {
    map: BTreeMap<VariableKey, DVector<f64>>,
}

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, value: DVector<f64>) -> Option<DVector<f64>> {
        self.map.insert(key, value)
    }

    pub fn get(&self, key: &VariableKey) -> Option<&DVector<f64>> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &VariableKey) -> Option<&mut DVector<f64>> {
        self.map.get_mut(key)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.map.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &DVector<f64>)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.map.keys()
    }

    /// Looks up a value, failing with a configuration error when absent.
    pub fn at(&self, key: &VariableKey) -> Result<&DVector<f64>> {
        self.map
            .get(key)
            .ok_or_else(|| Error::config(format!("no value for variable {key}")))
    }
}

/// Factors plus the registry of variable dimensions.
#[derive(Debug, Default)]
pub struct FactorGraph {
    factors: Vec<Box<dyn Factor>>,
    registry: BTreeMap<VariableKey, usize>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a variable. Re-registering with the same dimension is a no-op.
    pub fn add_variable(&mut self, key: VariableKey, dim: usize) -> Result<()> {
        match self.registry.get(&key) {
            Some(&d) if d != dim => Err(Error::config(format!(
                "variable {key} registered with dimension {d}, now requested with {dim}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.registry.insert(key, dim);
                Ok(())
            }
        }
    }

    /// Appends a factor after checking that its keys are registered with the
    /// dimensions it expects. Returns the factor index.
    pub fn add_factor(&mut self, factor: Box<dyn Factor>) -> Result<usize> {
        let dims = factor.key_dims();
        for (key, &want) in factor.keys().iter().zip(&dims) {
            match self.registry.get(key) {
                None => {
                    return Err(Error::config(format!(
                        "factor references unregistered variable {key}"
                    )))
                }
                Some(&have) if have != want => {
                    return Err(Error::config(format!(
                        "factor expects {key} of dimension {want}, registry has {have}"
                    )))
                }
                _ => {}
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn factors(&self) -> &[Box<dyn Factor>] {
        &self.factors
    }

    pub fn factor(&self, index: usize) -> &dyn Factor {
        self.factors[index].as_ref()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn num_variables(&self) -> usize {
        self.registry.len()
    }

    pub fn dim(&self, key: &VariableKey) -> Option<usize> {
        self.registry.get(key).copied()
    }

    pub fn variables(&self) -> impl Iterator<Item = (&VariableKey, &usize)> {
        self.registry.iter()
    }

    /// Variables whose timestep lies in `[first, last]`.
    pub fn variables_between(
        &self,
        first: usize,
        last: usize,
    ) -> impl Iterator<Item = (&VariableKey, &usize)> {
        let lo = VariableKey {
            timestep: first,
            kind: VarKind::Q,
        };
        self.registry
            .range(lo..)
            .take_while(move |(k, _)| k.timestep <= last)
    }

    /// Total scalar dimension of all variables.
    pub fn total_dim(&self) -> usize {
        self.registry.values().sum()
    }

    /// Total scalar dimension of all factor errors.
    pub fn total_error_dim(&self) -> usize {
        self.factors.iter().map(|f| f.dim()).sum()
    }

    /// Number of connected components of the bipartite graph, counting
    /// isolated variables.
    pub fn connected_components(&self) -> usize {
        let index: HashMap<VariableKey, usize> = self
            .registry
            .keys()
            .enumerate()
            .map(|(i, k)| (*k, i))
            .collect();
        let mut parent: Vec<usize> = (0..index.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for f in &self.factors {
            let mut keys = f.keys().iter().map(|k| index[k]);
            if let Some(first) = keys.next() {
                for other in keys {
                    let (a, b) = (find(&mut parent, first), find(&mut parent, other));
                    if a != b {
                        parent[a] = b;
                    }
                }
            }
        }
        (0..parent.len())
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }

    /// Logs a warning when the graph splits into several components.
    pub fn warn_if_disconnected(&self) {
        let parts = self.connected_components();
        if parts > 1 {
            log::warn!("factor graph has {parts} disconnected components");
        }
    }

    /// Checks that `values` holds a correctly sized vector for every variable.
    pub fn check_values(&self, values: &Values) -> Result<()> {
        for (key, &dim) in &self.registry {
            let v = values.at(key)?;
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_decrease_tol: f64,
    /// Stop once `‖Jᵀr‖∞` falls below this.
    pub gradient_tol: f64,
    /// Stop once an accepted step satisfies `‖δ‖∞ ≤ step_tol·max(1, ‖x‖∞)`.
    /// Heavily weighted constraint rows put a roundoff floor under the cost,
    /// so near the optimum this test fires before the other two can.
    pub step_tol: f64,
    pub linear_solver: LinearSolver,
}

/// How each damped linear step is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    /// Cholesky factorization of the normal equations. Fast, but its accuracy
    /// degrades with the square of the Jacobian's condition number.
    #[default]
    Cholesky,
    /// Givens QR of the whitened Jacobian, accurate to the first power of the
    /// condition number. Costs a few times more per step.
    Qr,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 15,
            initial_lambda: 1e-5,
            lambda_up: 10.0,
            lambda_down: 0.1,
            relative_decrease_tol: 1e-9,
            gradient_tol: 1e-10,
            step_tol: 1e-10,
            linear_solver: LinearSolver::Cholesky,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_lambda,
            self.lambda_up,
            self.lambda_down,
            self.relative_decrease_tol,
            self.gradient_tol,
            self.step_tol,
        ];
        if self.max_iterations == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("LM parameters must be positive"));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down < 1.0) {
            return Err(Error::config(
                "LM damping factors must satisfy up > 1 > down",
            ));
        }
        Ok(())
    }
}

/// One accepted or rejected trial of the LM loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {:e}, {:e}, {:e}",
            self.iteration, self.cost, self.lambda, self.step_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub values: Values,
    pub initial_cost: f64,
    pub cost: f64,
    /// Number of iterations that produced an accepted step.
    pub iterations: usize,
    pub converged: bool,
}

/// Whitened linear system `J δ ≈ -r` in triplet form.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub nrows: usize,
    pub ncols: usize,
    /// `(row, col, value)` entries of the whitened Jacobian.
    pub entries: Vec<(usize, usize, f64)>,
    pub residual: DVector<f64>,
    /// Column block of every variable: `(key, offset, dim)`.
    pub columns: Vec<(VariableKey, usize, usize)>,
    /// First row of every factor's block.
    pub row_offsets: Vec<usize>,
}

impl LinearSystem {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            j[(r, c)] += v;
        }
        j
    }

    /// `½‖r‖²`.
    pub fn cost(&self) -> f64 {
        0.5 * self.residual.norm_squared()
    }
}

/// Column layout of the free variables of one solve.
#[derive(Debug, Clone)]
struct Ordering {
    offsets: BTreeMap<VariableKey, (usize, usize)>,
    total: usize,
}

impl Ordering {
    fn new<'a>(free: impl Iterator<Item = (&'a VariableKey, &'a usize)>) -> Self {
        let mut offsets = BTreeMap::new();
        let mut total = 0;
        for (key, &dim) in free {
            offsets.insert(*key, (total, dim));
            total += dim;
        }
        Ordering { offsets, total }
    }

    fn column_name(&self, col: usize) -> String {
        for (key, &(off, dim)) in &self.offsets {
            if col >= off && col < off + dim {
                return format!("{key}:{}", col - off);
            }
        }
        format!("column {col}")
    }
}

fn factor_values<'a>(factor: &dyn Factor, values: &'a Values) -> Result<Vec<&'a DVector<f64>>> {
    factor.keys().iter().map(|k| values.at(k)).collect()
}

fn whiten(factor: &dyn Factor, mut lin: Linearization) -> Linearization {
    let w = factor.noise().sqrt_information(factor.dim());
    for (i, wi) in w.iter().enumerate() {
        lin.error[i] *= wi;
        for jac in &mut lin.jacobians {
            jac.row_mut(i).scale_mut(*wi);
        }
    }
    lin
}

fn wrap(index: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Factor {
        index,
        source: Box::new(e),
    }
}

/// Evaluates and whitens every listed factor, in parallel for large sets.
fn linearize_factors(
    graph: &FactorGraph,
    active: &[usize],
    values: &Values,
) -> Result<Vec<Linearization>> {
    let one = |&idx: &usize| -> Result<Linearization> {
        let f = graph.factor(idx);
        let vals = factor_values(f, values).map_err(wrap(idx))?;
        let lin = f.linearize(&vals).map_err(wrap(idx))?;
        Ok(whiten(f, lin))
    };
    if active.len() >= PARALLEL_THRESHOLD {
        active.par_iter().map(one).collect()
    } else {
        active.iter().map(one).collect()
    }
}

fn factors_cost(graph: &FactorGraph, active: &[usize], values: &Values) -> Result<f64> {
    let one = |&idx: &usize| -> Result<f64> {
        let f = graph.factor(idx);
        let vals = factor_values(f, values).map_err(wrap(idx))?;
        let e = f.error(&vals).map_err(wrap(idx))?;
        Ok(f.noise().cost(&e))
    };
    let costs: Vec<f64> = if active.len() >= PARALLEL_THRESHOLD {
        active.par_iter().map(one).collect::<Result<_>>()?
    } else {
        active.iter().map(one).collect::<Result<_>>()?
    };
    Ok(costs.iter().sum())
}

/// Total cost `Σ ½ eᵀΛe` of the graph at `values`.
pub fn graph_cost(graph: &FactorGraph, values: &Values) -> Result<f64> {
    let all: Vec<usize> = (0..graph.num_factors()).collect();
    factors_cost(graph, &all, values)
}

/// Stacked whitened Jacobian and residual of the whole graph. Row blocks
/// follow factor order; column blocks follow `(timestep, kind)` order.
pub fn linearize(graph: &FactorGraph, values: &Values) -> Result<LinearSystem> {
    graph.check_values(values)?;
    let all: Vec<usize> = (0..graph.num_factors()).collect();
    let lins = linearize_factors(graph, &all, values)?;
    let ordering = Ordering::new(graph.variables());
    let mut entries = Vec::new();
    let mut row_offsets = Vec::with_capacity(lins.len());
    let mut residual = Vec::new();
    for (idx, lin) in lins.iter().enumerate() {
        let row0 = residual.len();
        row_offsets.push(row0);
        residual.extend(lin.error.iter());
        for (key, jac) in graph.factor(idx).keys().iter().zip(&lin.jacobians) {
            let (off, _) = ordering.offsets[key];
            for c in 0..jac.ncols() {
                for r in 0..jac.nrows() {
                    let v = jac[(r, c)];
                    if v != 0.0 {
                        entries.push((row0 + r, off + c, v));
                    }
                }
            }
        }
    }
    Ok(LinearSystem {
        nrows: residual.len(),
        ncols: ordering.total,
        entries,
        residual: DVector::from_vec(residual),
        columns: ordering
            .offsets
            .iter()
            .map(|(k, &(o, d))| (*k, o, d))
            .collect(),
        row_offsets,
    })
}

/// Symmetric matrix stored by its upper-triangular column profile.
///
/// Column `j` keeps rows `first[j]..=j` contiguously.
#[derive(Debug, Clone)]
pub struct SkylineMatrix {
    first: Vec<usize>,
    ptr: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineMatrix {
    /// Zero matrix with the given profile; `first[j] <= j` is required.
    pub fn new(first: Vec<usize>) -> Self {
        let mut ptr = Vec::with_capacity(first.len() + 1);
        ptr.push(0);
        for (j, &f) in first.iter().enumerate() {
            assert!(f <= j, "skyline profile must satisfy first[j] <= j");
            ptr.push(ptr[j] + j - f + 1);
        }
        let data = vec![0.0; *ptr.last().unwrap()];
        SkylineMatrix { first, ptr, data }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Number of stored entries.
    pub fn stored(&self) -> usize {
        self.data.len()
    }

    /// Adds `v` at `(i, j)` and its mirror. Entries outside the profile panic.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        assert!(
            i >= self.first[j],
            "entry ({i}, {j}) lies outside the skyline profile"
        );
        self.data[self.ptr[j] + i - self.first[j]] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if i < self.first[j] {
            0.0
        } else {
            self.data[self.ptr[j] + i - self.first[j]]
        }
    }

    pub fn diagonal(&self, j: usize) -> f64 {
        self.data[self.ptr[j + 1] - 1]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// `H = UᵀU` with `U` upper triangular in the same profile. A pivot not
    /// exceeding `tol · H_jj` fails with its column index.
    pub fn cholesky(&self, tol: f64) -> Result<SkylineCholesky, usize> {
        let n = self.dim();
        let mut u = self.data.clone();
        for j in 0..n {
            let fj = self.first[j];
            let (pj, pj1) = (self.ptr[j], self.ptr[j + 1]);
            for i in fj..j {
                let fi = self.first[i];
                let k0 = fi.max(fj);
                let pi = self.ptr[i];
                let mut s = u[pj + i - fj];
                for k in k0..i {
                    s -= u[pi + k - fi] * u[pj + k - fj];
                }
                u[pj + i - fj] = s / u[self.ptr[i + 1] - 1];
            }
            let col = &u[pj..pj1 - 1];
            let d = u[pj1 - 1] - col.iter().map(|x| x * x).sum::<f64>();
            let h = self.data[pj1 - 1];
            if !(d > tol * h.abs()) || !d.is_finite() || d <= 0.0 {
                return Err(j);
            }
            u[pj1 - 1] = d.sqrt();
        }
        Ok(SkylineCholesky {
            first: self.first.clone(),
            ptr: self.ptr.clone(),
            data: u,
        })
    }
}

/// Factor of a [`SkylineMatrix`].
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    first: Vec<usize>,
    ptr: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.first.len();
        for j in 0..n {
            let fj = self.first[j];
            let pj = self.ptr[j];
            let mut s = x[j];
            for k in fj..j {
                s -= self.data[pj + k - fj] * x[k];
            }
            x[j] = s / self.data[self.ptr[j + 1] - 1];
        }
        for j in (0..n).rev() {
            let fj = self.first[j];
            let pj = self.ptr[j];
            x[j] /= self.data[self.ptr[j + 1] - 1];
            let xj = x[j];
            for k in fj..j {
                x[k] -= self.data[pj + k - fj] * xj;
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}

/// Upper-triangular factor `R` of a sparse least-squares problem, built by
/// folding rows in one at a time with Givens rotations.
///
/// Row `i` of `R` is stored densely over columns `i..=last[i]`. `last` must
/// be non-decreasing and cover every row that is added: a row whose leading
/// column is `c` may not reach past `last[c]`. The envelope derived from a
/// skyline profile (see [`BandedQr::from_profile`]) has both properties and
/// is closed under the fill created by the rotations.
#[derive(Debug, Clone)]
pub struct BandedQr {
    last: Vec<usize>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    filled: Vec<bool>,
    work: Vec<f64>,
    /// Squared norm of the parts of the right-hand side that `R` cannot fit.
    residual_sq: f64,
}

impl BandedQr {
    pub fn new(last: Vec<usize>) -> Self {
        let n = last.len();
        for (i, w) in last.windows(2).enumerate() {
            assert!(
                w[0] <= w[1],
                "QR envelope must be non-decreasing at row {i}"
            );
        }
        for (i, &l) in last.iter().enumerate() {
            assert!(
                l >= i && l < n,
                "QR envelope row {i} must end inside the matrix"
            );
        }
        BandedQr {
            rows: last
                .iter()
                .enumerate()
                .map(|(i, &l)| vec![0.0; l - i + 1])
                .collect(),
            rhs: vec![0.0; n],
            filled: vec![false; n],
            work: vec![0.0; n],
            residual_sq: 0.0,
            last,
        }
    }

    /// Envelope of the Cholesky factor of a matrix with skyline `first`.
    pub fn from_profile(first: &[usize]) -> Self {
        let n = first.len();
        let mut last: Vec<usize> = (0..n).collect();
        for (j, &f) in first.iter().enumerate() {
            last[f] = last[f].max(j);
        }
        for i in 1..n {
            last[i] = last[i].max(last[i - 1]);
        }
        Self::new(last)
    }

    pub fn dim(&self) -> usize {
        self.last.len()
    }

    /// Adds the equation `Σ a_k x_{c_k} = b`. Column indices need not be sorted.
    pub fn add_row(&mut self, entries: &[(usize, f64)], b: f64) {
        let Some(c0) = entries.iter().filter(|e| e.1 != 0.0).map(|e| e.0).min() else {
            self.residual_sq += b * b;
            return;
        };
        let mut hi = self.last[c0];
        self.work[c0..=hi].iter_mut().for_each(|w| *w = 0.0);
        for &(c, v) in entries {
            assert!(
                c <= hi,
                "row entry at column {c} lies outside the QR envelope of column {c0}"
            );
            self.work[c] += v;
        }
        let mut b = b;
        // Work entries past `hi` are zero, so the sweep can stop there.
        let mut c = c0;
        while c <= hi {
            let x = self.work[c];
            if x == 0.0 {
                c += 1;
                continue;
            }
            let last = self.last[c];
            if last > hi {
                self.work[hi + 1..=last].iter_mut().for_each(|w| *w = 0.0);
                hi = last;
            }
            let row = &mut self.rows[c];
            if !self.filled[c] {
                row.copy_from_slice(&self.work[c..=last]);
                self.rhs[c] = b;
                self.filled[c] = true;
                return;
            }
            let r = row[0];
            let rho = r.hypot(x);
            let (cs, sn) = (r / rho, x / rho);
            for (k, rk) in row.iter_mut().enumerate() {
                let (a, w) = (*rk, self.work[c + k]);
                *rk = cs * a + sn * w;
                self.work[c + k] = cs * w - sn * a;
            }
            let rb = self.rhs[c];
            self.rhs[c] = cs * rb + sn * b;
            b = cs * b - sn * rb;
            self.work[c] = 0.0;
            c += 1;
        }
        self.residual_sq += b * b;
    }

    /// Least-squares solution of the rows added so far. A diagonal entry
    /// of `R` not exceeding `tol` times the largest one fails with its column.
    pub fn solve(&self, tol: f64) -> Result<DVector<f64>, usize> {
        let n = self.dim();
        let scale = self.rows.iter().map(|r| r[0].abs()).fold(0.0, f64::max);
        let mut x = DVector::zeros(n);
        for i in (0..n).rev() {
            let row = &self.rows[i];
            if !self.filled[i] || !(row[0].abs() > tol * scale) {
                return Err(i);
            }
            let mut s = self.rhs[i];
            for (k, r) in row.iter().enumerate().skip(1) {
                s -= r * x[i + k];
            }
            x[i] = s / row[0];
        }
        Ok(x)
    }

    /// `‖Ax − b‖²` at the least-squares solution.
    pub fn residual_norm_squared(&self) -> f64 {
        self.residual_sq
    }
}

/// Normal equations of a set of factors restricted to the free variables,
/// plus the whitened rows themselves when the QR path needs them.
struct NormalEquations {
    h: Option<SkylineMatrix>,
    g: DVector<f64>,
    cost: f64,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
}

fn profile(graph: &FactorGraph, active: &[usize], ordering: &Ordering) -> Vec<usize> {
    let mut first: Vec<usize> = (0..ordering.total).collect();
    for &idx in active {
        let blocks: Vec<(usize, usize)> = graph
            .factor(idx)
            .keys()
            .iter()
            .filter_map(|k| ordering.offsets.get(k).copied())
            .collect();
        let Some(min) = blocks.iter().map(|b| b.0).min() else {
            continue;
        };
        for (off, dim) in blocks {
            for c in off..off + dim {
                first[c] = first[c].min(min);
            }
        }
    }
    first
}

fn build_normal_equations(
    graph: &FactorGraph,
    active: &[usize],
    ordering: &Ordering,
    first: &[usize],
    values: &Values,
    solver: LinearSolver,
) -> Result<NormalEquations> {
    let lins = linearize_factors(graph, active, values)?;
    let mut h = match solver {
        LinearSolver::Cholesky => Some(SkylineMatrix::new(first.to_vec())),
        LinearSolver::Qr => None,
    };
    let mut g = DVector::zeros(ordering.total);
    let mut cost = 0.0;
    let mut rows = Vec::new();
    for (&idx, lin) in active.iter().zip(&lins) {
        cost += 0.5 * lin.error.norm_squared();
        let blocks: Vec<(usize, &DMatrix<f64>)> = graph
            .factor(idx)
            .keys()
            .iter()
            .zip(&lin.jacobians)
            .filter_map(|(k, j)| ordering.offsets.get(k).map(|&(off, _)| (off, j)))
            .collect();
        for (a, &(off_a, ja)) in blocks.iter().enumerate() {
            let ga = ja.tr_mul(&lin.error);
            for (c, v) in ga.iter().enumerate() {
                g[off_a + c] += v;
            }
            let Some(h) = h.as_mut() else { continue };
            for &(off_b, jb) in &blocks[a..] {
                let hab = ja.tr_mul(jb);
                for ca in 0..hab.nrows() {
                    for cb in 0..hab.ncols() {
                        let (i, j) = (off_a + ca, off_b + cb);
                        // Diagonal blocks are visited once; keep only their upper half.
                        if off_a == off_b && i > j {
                            continue;
                        }
                        h.add(i, j, hab[(ca, cb)]);
                    }
                }
            }
        }
        if solver == LinearSolver::Qr && !blocks.is_empty() {
            for r in 0..lin.error.len() {
                let entries: Vec<(usize, f64)> = blocks
                    .iter()
                    .flat_map(|&(off, j)| (0..j.ncols()).map(move |c| (off + c, j[(r, c)])))
                    .filter(|e| e.1 != 0.0)
                    .collect();
                rows.push((entries, -lin.error[r]));
            }
        }
    }
    // Folding rows in order of their leading column keeps rotations local.
    rows.sort_by_key(|(e, _)| e.iter().map(|x| x.0).min().unwrap_or(usize::MAX));
    Ok(NormalEquations { h, g, cost, rows })
}

/// Solves the damped step `(JᵀJ + λI) δ = −Jᵀr`; failure reports the column
/// where the factorization broke down.
fn damped_step(
    current: &NormalEquations,
    first: &[usize],
    lambda: f64,
    solver: LinearSolver,
) -> std::result::Result<DVector<f64>, usize> {
    match solver {
        LinearSolver::Cholesky => {
            let mut damped = current.h.clone().expect("normal equations were assembled");
            // Identity damping. Scaling by diag(H) would let the large weights of
            // constraint rows freeze motion along the constraint manifold.
            for j in 0..first.len() {
                damped.add(j, j, lambda);
            }
            let chol = damped.cholesky(1e-14)?;
            Ok(-chol.solve(&current.g))
        }
        LinearSolver::Qr => {
            let mut qr = BandedQr::from_profile(first);
            let s = lambda.sqrt();
            // Damping rows join the stream at their own column. Appended after
            // the data they would sweep through all of R.
            let mut next = 0;
            for (entries, b) in &current.rows {
                let lead = entries.iter().map(|e| e.0).min().unwrap_or(first.len());
                while next < lead.min(first.len()) {
                    qr.add_row(&[(next, s)], 0.0);
                    next += 1;
                }
                qr.add_row(entries, *b);
            }
            for j in next..first.len() {
                qr.add_row(&[(j, s)], 0.0);
            }
            qr.solve(1e-15)
        }
    }
}

/// Levenberg-Marquardt over `active` factors, moving only `free` variables.
/// Variables connected to active factors but absent from `free` are held
/// at their current values.
fn optimize_subset(
    graph: &FactorGraph,
    active: &[usize],
    free: &BTreeMap<VariableKey, usize>,
    values: &mut Values,
    config: &LmConfig,
    mut sink: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<(f64, f64, usize, bool)> {
    config.validate()?;
    let ordering = Ordering::new(free.iter());
    let first = profile(graph, active, &ordering);
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    let mut current = build_normal_equations(
        graph,
        active,
        &ordering,
        &first,
        values,
        config.linear_solver,
    )?;
    let initial_cost = current.cost;

    for iter in 1..=config.max_iterations {
        if current.cost == 0.0 || current.g.amax() < config.gradient_tol {
            converged = true;
            break;
        }
        // Trials are written into `values` in place; only the free entries are
        // saved, so a step costs O(window) rather than O(history).
        let saved: Vec<(VariableKey, DVector<f64>)> = ordering
            .offsets
            .keys()
            .map(|k| {
                (
                    *k,
                    values.get(k).expect("free variable has a value").clone(),
                )
            })
            .collect();
        let restore = |values: &mut Values| {
            for (k, v) in &saved {
                *values.get_mut(k).expect("free variable has a value") = v.clone();
            }
        };
        // Inner loop: raise the damping until a step lowers the cost.
        let accepted = loop {
            let step = match damped_step(&current, &first, lambda, config.linear_solver) {
                Ok(step) => step,
                Err(pivot) => {
                    lambda *= config.lambda_up;
                    if lambda > MAX_DAMPING {
                        restore(values);
                        return Err(Error::SolverDiverged(format!(
                            "damped linear system singular at {} even with damping {lambda:e}",
                            ordering.column_name(pivot)
                        )));
                    }
                    continue;
                }
            };
            for (key, base) in &saved {
                let (off, dim) = ordering.offsets[key];
                *values.get_mut(key).expect("free variable has a value") =
                    base + step.rows(off, dim);
            }
            let trial_cost = match factors_cost(graph, active, values) {
                Ok(c) => c,
                Err(e) => {
                    restore(values);
                    return Err(e);
                }
            };
            let record = IterationRecord {
                iteration: iter,
                cost: trial_cost,
                lambda,
                step_norm: step.norm(),
            };
            if let Some(s) = sink.as_mut() {
                s(&record);
            }
            if trial_cost.is_finite() && trial_cost <= current.cost {
                lambda = (lambda * config.lambda_down).max(f64::MIN_POSITIVE);
                let scale = saved.iter().map(|(_, v)| v.amax()).fold(1.0, f64::max);
                let small = step.amax() <= config.step_tol * scale;
                break Some((trial_cost, small));
            }
            restore(values);
            // A trial that moves the cost only at roundoff level means there is
            // nothing left to gain.
            if (trial_cost - current.cost).abs() <= config.relative_decrease_tol * current.cost {
                break None;
            }
            lambda *= config.lambda_up;
            if lambda > MAX_DAMPING {
                break None;
            }
        };
        let Some((trial_cost, small_step)) = accepted else {
            // No descent available at any damping: the current point is a minimum
            // to working precision.
            converged = true;
            break;
        };
        iterations += 1;
        let old_cost = current.cost;
        current = build_normal_equations(
            graph,
            active,
            &ordering,
            &first,
            values,
            config.linear_solver,
        )?;
        debug_assert!((current.cost - trial_cost).abs() <= 1e-9 * trial_cost.max(1.0));
        if small_step
            || trial_cost == 0.0
            || (old_cost - trial_cost) < config.relative_decrease_tol * old_cost
        {
            converged = true;
            break;
        }
    }
    Ok((initial_cost, current.cost, iterations, converged))
}

/// Batch optimization of the whole graph starting from `init`.
pub fn optimize_lm(graph: &FactorGraph, init: &Values, config: &LmConfig) -> Result<LmResult> {
    optimize_lm_with_sink(graph, init, config, None)
}

/// [`optimize_lm`] reporting every LM trial to `sink`.
pub fn optimize_lm_with_sink(
    graph: &FactorGraph,
    init: &Values,
    config: &LmConfig,
    sink: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<LmResult> {
    graph.check_values(init)?;
    graph.warn_if_disconnected();
    let mut values = init.clone();
    let active: Vec<usize> = (0..graph.num_factors()).collect();
    let free: BTreeMap<VariableKey, usize> = graph.variables().map(|(k, d)| (*k, *d)).collect();
    let (initial_cost, cost, iterations, converged) =
        optimize_subset(graph, &active, &free, &mut values, config, sink)?;
    Ok(LmResult {
        values,
        initial_cost,
        cost,
        iterations,
        converged,
    })
}

/// Outcome of one fixed-lag window solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReport {
    pub timestep: usize,
    pub iterations: usize,
    pub cost: f64,
    pub converged: bool,
}

/// Sliding-window smoother: each step re-solves the variables of the last
/// `window` timesteps. Older variables keep their last estimates and enter
/// the factors that straddle the window boundary as constants.
#[derive(Debug)]
pub struct FixedLagSmoother {
    graph: FactorGraph,
    values: Values,
    window: usize,
    config: LmConfig,
    /// Factor indices grouped by the latest timestep they touch.
    by_last_step: BTreeMap<usize, Vec<usize>>,
    reports: Vec<WindowReport>,
}

impl FixedLagSmoother {
    pub fn new(window: usize, config: LmConfig) -> Result<Self> {
        if window < 2 {
            return Err(Error::config(
                "fixed-lag window must span at least 2 timesteps",
            ));
        }
        config.validate()?;
        Ok(FixedLagSmoother {
            graph: FactorGraph::new(),
            values: Values::new(),
            window,
            config,
            by_last_step: BTreeMap::new(),
            reports: Vec::new(),
        })
    }

    pub fn add_variable(&mut self, key: VariableKey, init: DVector<f64>) -> Result<()> {
        self.graph.add_variable(key, init.len())?;
        self.values.insert(key, init);
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Box<dyn Factor>) -> Result<usize> {
        let last = factor.keys().iter().map(|k| k.timestep).max().unwrap_or(0);
        let idx = self.graph.add_factor(factor)?;
        self.by_last_step.entry(last).or_default().push(idx);
        Ok(idx)
    }

    /// Adds the variables and factors of timestep `t`, then solves the
    /// window ending at `t`.
    pub fn fixed_lag_step(
        &mut self,
        t: usize,
        variables: Vec<(VariableKey, DVector<f64>)>,
        factors: Vec<Box<dyn Factor>>,
    ) -> Result<WindowReport> {
        for (key, init) in variables {
            self.add_variable(key, init)?;
        }
        for f in factors {
            self.add_factor(f)?;
        }
        self.solve_window(t)
    }

    /// Optimizes the variables with timestep in `[t + 1 - window, t]`.
    pub fn solve_window(&mut self, t: usize) -> Result<WindowReport> {
        let start = (t + 1).saturating_sub(self.window);
        let free: BTreeMap<VariableKey, usize> = self
            .graph
            .variables_between(start, t)
            .map(|(k, d)| (*k, *d))
            .collect();
        let active: Vec<usize> = self
            .by_last_step
            .range((Bound::Included(start), Bound::Included(t)))
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let (_, cost, iterations, converged) = optimize_subset(
            &self.graph,
            &active,
            &free,
            &mut self.values,
            &self.config,
            None,
        )?;
        let report = WindowReport {
            timestep: t,
            iterations,
            cost,
            converged,
        };
        self.reports.push(report);
        Ok(report)
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Values {
        &mut self.values
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn reports(&self) -> &[WindowReport] {
        &self.reports
    }

    pub fn into_parts(self) -> (FactorGraph, Values) {
        (self.graph, self.values)
    }
}

/// Marginal covariance blocks `Σ_kk` of `(JᵀΛJ)⁻¹` for the requested keys.
pub fn marginal_covariance(
    graph: &FactorGraph,
    values: &Values,
    keys: &[VariableKey],
) -> Result<BTreeMap<VariableKey, DMatrix<f64>>> {
    graph.check_values(values)?;
    let free: BTreeMap<VariableKey, usize> = graph.variables().map(|(k, d)| (*k, *d)).collect();
    let ordering = Ordering::new(free.iter());
    let active: Vec<usize> = (0..graph.num_factors()).collect();
    let first = profile(graph, &active, &ordering);
    let normal = build_normal_equations(
        graph,
        &active,
        &ordering,
        &first,
        values,
        LinearSolver::Cholesky,
    )?;
    let h = normal.h.expect("normal equations were assembled");
    let chol = match h.cholesky(1e-12) {
        Ok(c) => c,
        Err(pivot) => return Err(Error::RankDeficient(null_directions(&h, &ordering, pivot))),
    };
    let mut out = BTreeMap::new();
    let requested: BTreeSet<VariableKey> = keys.iter().copied().collect();
    for key in requested {
        let &(off, dim) = ordering
            .offsets
            .get(&key)
            .ok_or_else(|| Error::config(format!("unknown variable {key}")))?;
        let mut block = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let mut e = vec![0.0; ordering.total];
            e[off + c] = 1.0;
            chol.solve_in_place(&mut e);
            for r in 0..dim {
                block[(r, c)] = e[off + r];
            }
        }
        out.insert(key, block);
    }
    Ok(out)
}

/// Names the coordinates dominating each near-null eigenvector of `h`.
fn null_directions(h: &SkylineMatrix, ordering: &Ordering, pivot: usize) -> Vec<String> {
    if h.dim() > 4000 {
        return vec![ordering.column_name(pivot)];
    }
    let eig = SymmetricEigen::new(h.to_dense());
    let max = eig.eigenvalues.amax();
    let mut names = Vec::new();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-12 * max {
            let v = eig.eigenvectors.column(k);
            names.push(ordering.column_name(v.iamax()));
        }
    }
    if names.is_empty() {
        names.push(ordering.column_name(pivot));
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{NoiseModel, PriorFactor};
    use approx::assert_relative_eq;

    fn scalar(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn skyline_matches_dense_cholesky() {
        // Banded SPD matrix with a ragged profile.
        let first = vec![0, 0, 1, 1, 3];
        let mut h = SkylineMatrix::new(first.clone());
        for j in 0..5 {
            h.add(j, j, 4.0 + j as f64);
            for i in first[j]..j {
                h.add(i, j, 0.5 + 0.1 * (i + j) as f64);
            }
        }
        let b = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.5, 3.0]);
        let x = h.cholesky(1e-14).unwrap().solve(&b);
        assert_relative_eq!(h.to_dense() * x, b, epsilon = 1e-12);
    }

    #[test]
    fn banded_qr_matches_dense_least_squares() {
        // Overdetermined banded system with rows in arbitrary order.
        let n = 6;
        let first = vec![0, 0, 1, 2, 2, 4];
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        for j in 0..n {
            for i in first[j]..=j {
                rows.push((
                    vec![(i, 1.0 + 0.3 * i as f64), (j, 2.0 - 0.1 * j as f64)],
                    (i * 7 + j) as f64 % 5.0 - 2.0,
                ));
            }
        }
        rows.reverse();
        let lambda: f64 = 0.25;
        let mut qr = BandedQr::from_profile(&first);
        for (e, b) in &rows {
            qr.add_row(e, *b);
        }
        for j in 0..n {
            qr.add_row(&[(j, lambda.sqrt())], 0.0);
        }
        let x = qr.solve(1e-15).unwrap();

        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, (e, v)) in rows.iter().enumerate() {
            for &(c, w) in e {
                a[(r, c)] += w;
            }
            b[r] = *v;
        }
        let lhs = a.transpose() * &a + DMatrix::identity(n, n) * lambda;
        let expect = lhs.cholesky().unwrap().solve(&(a.transpose() * &b));
        assert_relative_eq!(x.clone(), expect, epsilon = 1e-12);
        let resid = (&a * &x - &b).norm_squared() + lambda * x.norm_squared();
        assert_relative_eq!(qr.residual_norm_squared(), resid, epsilon = 1e-10);
    }

    #[test]
    fn banded_qr_reports_missing_column() {
        let mut qr = BandedQr::from_profile(&[0, 0, 1]);
        qr.add_row(&[(0, 1.0), (1, 1.0)], 1.0);
        qr.add_row(&[(0, 2.0), (1, 2.0)], 2.0);
        qr.add_row(&[(2, 1.0)], 0.0);
        // Column 1 is only ever a copy of column 0.
        assert_eq!(qr.solve(1e-12).unwrap_err(), 1);
    }

    #[test]
    fn skyline_reports_singular_pivot() {
        let mut h = SkylineMatrix::new(vec![0, 0]);
        h.add(0, 0, 1.0);
        h.add(0, 1, 1.0);
        h.add(1, 1, 1.0);
        assert_eq!(h.cholesky(1e-12).unwrap_err(), 1);
    }

    #[test]
    fn disconnected_graph_counts_components() {
        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::q(0), 1).unwrap();
        g.add_variable(VariableKey::q(1), 1).unwrap();
        g.add_factor(Box::new(
            PriorFactor::new(VariableKey::q(0), scalar(0.0), NoiseModel::isotropic(1.0)).unwrap(),
        ))
        .unwrap();
        assert_eq!(g.connected_components(), 2);
    }

    #[test]
    fn registry_rejects_dimension_conflicts() {
        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::q(0), 2).unwrap();
        assert!(g.add_variable(VariableKey::q(0), 3).is_err());
        let p =
            PriorFactor::new(VariableKey::q(0), scalar(0.0), NoiseModel::isotropic(1.0)).unwrap();
        assert!(g.add_factor(Box::new(p)).is_err());
        let p =
            PriorFactor::new(VariableKey::dq(0), scalar(0.0), NoiseModel::isotropic(1.0)).unwrap();
        assert!(g.add_factor(Box::new(p)).is_err());
    }

    #[test]
    fn iteration_record_line() {
        let r = IterationRecord {
            iteration: 2,
            cost: 0.5,
            lambda: 1e-5,
            step_norm: 0.25,
        };
        assert_eq!(r.to_string(), "2, 5e-1, 1e-5, 2.5e-1");
    }
}
