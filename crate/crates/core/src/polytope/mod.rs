//! Convex polytopes `{v : A v <= r}`: Chebyshev centers and approximately
//! uniform sampling by hit-and-run.

mod lp;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lp::{Columns, LpOutcome};

/// Feasibility tolerance used when checking LP solutions.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Chords shorter than this mean the walker has numerically left the interior.
pub const MIN_CHORD: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("polytope is empty")]
    Infeasible,
    #[error("polytope is unbounded")]
    Unbounded,
    #[error("polytope has no interior (Chebyshev radius {radius:e})")]
    Degenerate { radius: f64 },
    #[error("linear program did not converge")]
    LpFailure,
    #[error("walker repeatedly lost the interior ({restarts} restarts)")]
    WalkFailure { restarts: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    Bound,
    Positivity,
    Bias,
}

/// `m` linear inequalities over `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    dim: usize,
    a: Vec<f64>,
    r: Vec<f64>,
    labels: Vec<Option<ConstraintKind>>,
}

impl Polytope {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "polytope dimension must be positive");
        Polytope { dim, a: Vec::new(), r: Vec::new(), labels: Vec::new() }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        let mut p = Self::new(dim);
        p.a.reserve(rows * dim);
        p.r.reserve(rows);
        p.labels.reserve(rows);
        p
    }

    /// Unit box `[lo, hi]^d`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        let mut p = Self::with_capacity(dim, 2 * dim);
        for j in 0..dim {
            let mut row = vec![0.0; dim];
            row[j] = 1.0;
            p.push(&row, hi, None);
            row[j] = -1.0;
            p.push(&row, -lo, None);
        }
        p
    }

    /// Appends `row . v <= bound`.
    pub fn push(&mut self, row: &[f64], bound: f64, label: Option<ConstraintKind>) {
        assert_eq!(row.len(), self.dim);
        assert!(row.iter().all(|v| v.is_finite()), "constraint rows must be finite");
        self.a.extend_from_slice(row);
        self.r.push(bound);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_constraints(&self) -> usize {
        self.r.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.dim..(i + 1) * self.dim]
    }

    pub fn bound(&self, i: usize) -> f64 {
        self.r[i]
    }

    pub fn label(&self, i: usize) -> Option<ConstraintKind> {
        self.labels[i]
    }

    /// `max_i (a_i . v - r_i)`; nonpositive inside the polytope.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim);
        (0..self.n_constraints())
            .map(|i| dot(self.row(i), v) - self.r[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, v: &[f64], slack: f64) -> bool {
        self.max_violation(v) <= slack
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Unit-norm constraint directions with antiparallel rows stored once.
/// Constraint `i` reads `sign[i] * U[dir[i]] . v <= bound[i]`.
#[derive(Debug, Clone)]
struct NormalizedRows {
    dim: usize,
    n_dirs: usize,
    /// Column-major `n_dirs x dim`.
    cols: Vec<f64>,
    dir: Vec<u32>,
    sign: Vec<f64>,
    bound: Vec<f64>,
}

impl NormalizedRows {
    fn new(p: &Polytope) -> Result<Self, PolytopeError> {
        let d = p.dim;
        let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
        let mut rows: Vec<f64> = Vec::new();
        let (mut dir, mut sign, mut bound) = (Vec::new(), Vec::new(), Vec::new());
        let mut unit = vec![0.0; d];
        for i in 0..p.n_constraints() {
            let row = p.row(i);
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                if p.r[i] < 0.0 {
                    return Err(PolytopeError::Infeasible);
                }
                continue;
            }
            let first = row.iter().find(|v| **v != 0.0).copied().unwrap_or(1.0);
            let s = if first > 0.0 { 1.0 } else { -1.0 };
            for (u, a) in unit.iter_mut().zip(row) {
                *u = s * a / norm;
            }
            let key: Vec<u64> = unit.iter().map(|v| v.to_bits()).collect();
            let next = index.len() as u32;
            let k = *index.entry(key).or_insert_with(|| {
                rows.extend_from_slice(&unit);
                next
            });
            dir.push(k);
            sign.push(s);
            bound.push(p.r[i] / norm);
        }
        let n_dirs = index.len();
        let mut cols = vec![0.0; n_dirs * d];
        for k in 0..n_dirs {
            for j in 0..d {
                cols[j * n_dirs + k] = rows[k * d + j];
            }
        }
        Ok(NormalizedRows { dim: d, n_dirs, cols, dir, sign, bound })
    }

    fn n_constraints(&self) -> usize {
        self.bound.len()
    }

    /// `out[k] = U[k] . v` for every stored direction.
    fn directions_dot(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let col = &self.cols[j * self.n_dirs..(j + 1) * self.n_dirs];
            for (o, c) in out.iter_mut().zip(col) {
                *o += vj * c;
            }
        }
    }

    fn column(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n_dirs..(j + 1) * self.n_dirs]
    }
}

/// Center and radius of the largest inscribed ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorPoint {
    pub point: Vec<f64>,
    pub radius: f64,
}

/// Dual of the Chebyshev-ball LP, in standard form. Columns `0..m` are the
/// normalized constraints `(sign_i u_i, 1)` with cost `bound_i`; column `m`
/// is the surplus `(0, ..., 0, -1)` with cost 0 (keeps the radius nonnegative).
struct ChebyshevDual<'a> {
    rows: &'a NormalizedRows,
    scratch: std::cell::RefCell<Vec<f64>>,
}

impl Columns for ChebyshevDual<'_> {
    fn n_rows(&self) -> usize {
        self.rows.dim + 1
    }

    fn n_cols(&self) -> usize {
        self.rows.n_constraints() + 1
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.rows.n_constraints() {
            self.rows.bound[j]
        } else {
            0.0
        }
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        let d = self.rows.dim;
        let m = self.rows.n_constraints();
        if j == m {
            out[..d].iter_mut().for_each(|v| *v = 0.0);
            out[d] = -1.0;
            return;
        }
        let k = self.rows.dir[j] as usize;
        let s = self.rows.sign[j];
        for c in 0..d {
            out[c] = s * self.rows.column(c)[k];
        }
        out[d] = 1.0;
    }

    fn price(&self, pi: &[f64], out: &mut [f64]) {
        let d = self.rows.dim;
        let m = self.rows.n_constraints();
        let mut scratch = self.scratch.borrow_mut();
        self.rows.directions_dot(&pi[..d], &mut scratch);
        for j in 0..m {
            out[j] = self.rows.sign[j] * scratch[self.rows.dir[j] as usize] + pi[d];
        }
        out[m] = -pi[d];
    }
}

/// Dual of the Chebyshev-ball LP priced through structured row products.
/// Column `j` is constraint `keep[j]` scaled to unit norm.
struct StructuredDual<'a> {
    p: &'a Polytope,
    ops: &'a dyn RowProducts,
    keep: Vec<usize>,
    inv_norm: Vec<f64>,
    scratch: std::cell::RefCell<Vec<f64>>,
}

impl Columns for StructuredDual<'_> {
    fn n_rows(&self) -> usize {
        self.p.dim + 1
    }

    fn n_cols(&self) -> usize {
        self.keep.len() + 1
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.keep.len() {
            self.p.r[self.keep[j]] * self.inv_norm[j]
        } else {
            0.0
        }
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        let d = self.p.dim;
        if j == self.keep.len() {
            out[..d].iter_mut().for_each(|v| *v = 0.0);
            out[d] = -1.0;
            return;
        }
        for (o, a) in out.iter_mut().zip(self.p.row(self.keep[j])) {
            *o = a * self.inv_norm[j];
        }
        out[d] = 1.0;
    }

    fn price(&self, pi: &[f64], out: &mut [f64]) {
        let d = self.p.dim;
        let mut scratch = self.scratch.borrow_mut();
        self.ops.products(&pi[..d], &mut scratch);
        for (j, &i) in self.keep.iter().enumerate() {
            out[j] = scratch[i] * self.inv_norm[j] + pi[d];
        }
        out[self.keep.len()] = -pi[d];
    }
}

/// Chebyshev center by the simplex method on the dual of
/// `max radius  s.t.  a_i . v + radius |a_i| <= r_i`.
pub fn chebyshev_center(p: &Polytope) -> Result<InteriorPoint, PolytopeError> {
    chebyshev_center_with(p, None)
}

/// As [`chebyshev_center`], pricing with `ops` when given.
pub fn chebyshev_center_with(p: &Polytope, ops: Option<&dyn RowProducts>) -> Result<InteriorPoint, PolytopeError> {
    let d = p.dim;
    let mut rhs = vec![0.0; d + 1];
    rhs[d] = 1.0;
    let outcome = match ops {
        None => {
            let rows = NormalizedRows::new(p)?;
            if rows.n_constraints() == 0 {
                return Err(PolytopeError::Unbounded);
            }
            let dual = ChebyshevDual { rows: &rows, scratch: std::cell::RefCell::new(vec![0.0; rows.n_dirs]) };
            lp::solve(&dual, &rhs, 50 * (rows.n_constraints() + d + 1))
        }
        Some(ops) => {
            let mut keep = Vec::new();
            let mut inv_norm = Vec::new();
            for i in 0..p.n_constraints() {
                let norm = dot(p.row(i), p.row(i)).sqrt();
                if norm == 0.0 {
                    if p.r[i] < 0.0 {
                        return Err(PolytopeError::Infeasible);
                    }
                    continue;
                }
                keep.push(i);
                inv_norm.push(1.0 / norm);
            }
            if keep.is_empty() {
                return Err(PolytopeError::Unbounded);
            }
            let max_iter = 50 * (keep.len() + d + 1);
            let dual = StructuredDual { p, ops, keep, inv_norm, scratch: std::cell::RefCell::new(vec![0.0; p.n_constraints()]) };
            lp::solve(&dual, &rhs, max_iter)
        }
    };
    match outcome {
        // Dual unbounded: the primal is infeasible.
        LpOutcome::Unbounded => Err(PolytopeError::Infeasible),
        // Dual infeasible: no finite radius bound, or an empty polytope with
        // an unbounded recession direction; either way unusable.
        LpOutcome::Infeasible => Err(PolytopeError::Unbounded),
        LpOutcome::IterationLimit => Err(PolytopeError::LpFailure),
        LpOutcome::Optimal { duals, .. } => {
            let point = duals[..d].to_vec();
            // The LP radius can carry roundoff; use the exact distance to the nearest facet.
            let mut radius = f64::INFINITY;
            for i in 0..p.n_constraints() {
                let row = p.row(i);
                let norm = dot(row, row).sqrt();
                if norm > 0.0 {
                    radius = radius.min((p.r[i] - dot(row, &point)) / norm);
                }
            }
            if !radius.is_finite() || (duals[d] - radius).abs() > 1e-6 * (1.0 + radius.abs()) {
                return Err(PolytopeError::LpFailure);
            }
            if radius <= 1e-12 {
                return Err(PolytopeError::Degenerate { radius });
            }
            Ok(InteriorPoint { point, radius })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitAndRunConfig {
    /// Steps discarded before the first kept point; `None` means `max(1000, 100 d)`.
    pub burn_in: Option<usize>,
    /// Steps between kept points; `None` means `10 d`.
    pub thin: Option<usize>,
    /// Probability of moving along a coordinate axis instead of a uniform direction.
    pub axis_probability: f64,
    /// Recompute slacks from scratch every this many steps.
    pub refresh_every: usize,
    pub max_restarts: usize,
}

impl Default for HitAndRunConfig {
    fn default() -> Self {
        HitAndRunConfig { burn_in: None, thin: None, axis_probability: 0.2, refresh_every: 100, max_restarts: 100 }
    }
}

impl HitAndRunConfig {
    pub fn burn_in_for(&self, dim: usize) -> usize {
        self.burn_in.unwrap_or_else(|| (100 * dim).max(1000))
    }

    pub fn thin_for(&self, dim: usize) -> usize {
        self.thin.unwrap_or(10 * dim).max(1)
    }
}

/// Evaluates `A v` for every constraint row of a polytope whose rows have
/// exploitable structure, in the polytope's row order.
pub trait RowProducts: Send + Sync {
    fn products(&self, v: &[f64], out: &mut [f64]);
}

enum Backend<'a> {
    Dense(NormalizedRows),
    Structured { ops: &'a dyn RowProducts, bound: Vec<f64> },
}

impl Backend<'_> {
    fn n_constraints(&self) -> usize {
        match self {
            Backend::Dense(rows) => rows.n_constraints(),
            Backend::Structured { bound, .. } => bound.len(),
        }
    }

    fn bound(&self, i: usize) -> f64 {
        match self {
            Backend::Dense(rows) => rows.bound[i],
            Backend::Structured { bound, .. } => bound[i],
        }
    }

    /// `out[i] = a_i . v`, with the dense backend working on unit-norm rows.
    fn products(&self, v: &[f64], axis: Option<usize>, scratch: &mut [f64], out: &mut [f64]) {
        match self {
            Backend::Dense(rows) => {
                match axis {
                    Some(j) => scratch.copy_from_slice(rows.column(j)),
                    None => rows.directions_dot(v, scratch),
                }
                for i in 0..rows.n_constraints() {
                    out[i] = rows.sign[i] * scratch[rows.dir[i] as usize];
                }
            }
            Backend::Structured { ops, .. } => ops.products(v, out),
        }
    }
}

/// Hit-and-run chain over a fixed polytope.
pub struct HitAndRun<'a> {
    backend: Backend<'a>,
    dim: usize,
    start: Vec<f64>,
    config: HitAndRunConfig,
    point: Vec<f64>,
    slack: Vec<f64>,
    along: Vec<f64>,
    scratch: Vec<f64>,
    dir: Vec<f64>,
    steps_since_refresh: usize,
    restarts: usize,
}

impl<'a> HitAndRun<'a> {
    pub fn new(p: &Polytope, start: &InteriorPoint, config: HitAndRunConfig) -> Result<Self, PolytopeError> {
        let rows = NormalizedRows::new(p)?;
        let n_dirs = rows.n_dirs;
        Self::build(p, Backend::Dense(rows), n_dirs, start, config)
    }

    /// Chain whose row products come from `ops`, which must agree with `p` row for row.
    pub fn with_products(p: &Polytope, ops: &'a dyn RowProducts, start: &InteriorPoint, config: HitAndRunConfig) -> Result<Self, PolytopeError> {
        let bound = p.r.clone();
        Self::build(p, Backend::Structured { ops, bound }, 0, start, config)
    }

    fn build(p: &Polytope, backend: Backend<'a>, n_dirs: usize, start: &InteriorPoint, config: HitAndRunConfig) -> Result<Self, PolytopeError> {
        if start.point.len() != p.dim() {
            return Err(PolytopeError::Dimension { expected: p.dim(), got: start.point.len() });
        }
        let m = backend.n_constraints();
        let mut chain = HitAndRun {
            backend,
            dim: p.dim(),
            scratch: vec![0.0; n_dirs],
            slack: vec![0.0; m],
            along: vec![0.0; m],
            dir: vec![0.0; p.dim()],
            start: start.point.clone(),
            config,
            point: start.point.clone(),
            steps_since_refresh: 0,
            restarts: 0,
        };
        chain.refresh();
        if chain.slack.iter().any(|&s| s <= 0.0) {
            return Err(PolytopeError::Degenerate { radius: 0.0 });
        }
        Ok(chain)
    }

    pub fn point(&self) -> &[f64] {
        &self.point
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    fn refresh(&mut self) {
        self.backend.products(&self.point, None, &mut self.scratch, &mut self.slack);
        for i in 0..self.slack.len() {
            self.slack[i] = self.backend.bound(i) - self.slack[i];
        }
        self.steps_since_refresh = 0;
    }

    fn restart(&mut self) -> Result<(), PolytopeError> {
        self.restarts += 1;
        if self.restarts > self.config.max_restarts {
            return Err(PolytopeError::WalkFailure { restarts: self.restarts });
        }
        self.point.copy_from_slice(&self.start);
        self.refresh();
        Ok(())
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), PolytopeError> {
        let d = self.dim;
        let axis = if rng.random::<f64>() < self.config.axis_probability { Some(rng.random_range(0..d)) } else { None };
        match axis {
            Some(j) => {
                self.dir.iter_mut().for_each(|v| *v = 0.0);
                self.dir[j] = 1.0;
            }
            None => {
                let mut norm2 = 0.0;
                for v in self.dir.iter_mut() {
                    *v = rng.sample(StandardNormal);
                    norm2 += *v * *v;
                }
                let inv = 1.0 / norm2.sqrt();
                self.dir.iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.backend.products(&self.dir, axis, &mut self.scratch, &mut self.along);

        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (&a, &s) in self.along.iter().zip(&self.slack) {
            if a > 0.0 {
                hi = hi.min(s / a);
            } else if a < 0.0 {
                lo = lo.max(s / a);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(PolytopeError::Unbounded);
        }
        if hi - lo < MIN_CHORD || lo > 0.0 || hi < 0.0 {
            return self.restart();
        }
        let t = lo + (hi - lo) * rng.random::<f64>();
        for (x, u) in self.point.iter_mut().zip(&self.dir) {
            *x += t * u;
        }
        self.steps_since_refresh += 1;
        if self.steps_since_refresh >= self.config.refresh_every {
            self.refresh();
            if self.slack.iter().any(|&s| s <= 0.0) {
                return self.restart();
            }
        } else {
            for (s, a) in self.slack.iter_mut().zip(&self.along) {
                *s -= t * a;
            }
        }
        Ok(())
    }

    /// Runs `burn_in` steps, then records `count` points spaced `thin` steps apart.
    pub fn sample<R: Rng + ?Sized>(&mut self, count: usize, burn_in: usize, thin: usize, rng: &mut R) -> Result<Vec<Vec<f64>>, PolytopeError> {
        for _ in 0..burn_in {
            self.step(rng)?;
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..thin.max(1) {
                self.step(rng)?;
            }
            self.refresh();
            if self.slack.iter().any(|&s| s <= 0.0) {
                self.restart()?;
            }
            out.push(self.point.clone());
        }
        Ok(out)
    }
}

pub fn hit_and_run_sample<R: Rng + ?Sized>(
    p: &Polytope,
    start: &InteriorPoint,
    count: usize,
    burn_in: usize,
    thin: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, PolytopeError> {
    let mut chain = HitAndRun::new(p, start, HitAndRunConfig::default())?;
    chain.sample(count, burn_in, thin, rng)
}

/// Chebyshev center followed by one hit-and-run draw with the configured walk length.
pub fn sample_uniform_point<R: Rng + ?Sized>(p: &Polytope, config: &HitAndRunConfig, rng: &mut R) -> Result<(Vec<f64>, InteriorPoint), PolytopeError> {
    sample_uniform_point_with(p, None, config, rng)
}

/// As [`sample_uniform_point`], optionally walking with structured row products.
pub fn sample_uniform_point_with<R: Rng + ?Sized>(
    p: &Polytope,
    ops: Option<&dyn RowProducts>,
    config: &HitAndRunConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, InteriorPoint), PolytopeError> {
    let center = chebyshev_center_with(p, ops)?;
    let d = p.dim();
    let mut chain = match ops {
        Some(ops) => HitAndRun::with_products(p, ops, &center, *config)?,
        None => HitAndRun::new(p, &center, *config)?,
    };
    let mut pts = chain.sample(1, config.burn_in_for(d), config.thin_for(d), rng)?;
    Ok((pts.pop().expect("one sample requested"), center))
}
