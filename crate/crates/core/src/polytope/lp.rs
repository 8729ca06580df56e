//! Dense revised simplex for `min c'y  s.t.  G y = h, y >= 0`.
//!
//! The constraint matrix is never materialized: callers expose its columns
//! through [`Columns`], which lets the pricing step (`pi' G` for every
//! column) use whatever structure the caller has. The basis inverse is kept
//! explicitly (the number of equality rows is small) and refactored from
//! scratch every [`REFACTOR_EVERY`] pivots.

use nalgebra::DMatrix;

const REFACTOR_EVERY: usize = 64;
const OPT_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-7;
/// Primal feasibility relaxation used by the ratio test.
const HARRIS_RELAX: f64 = 1e-9;
/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_LIMIT: usize = 50;

pub trait Columns {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn cost(&self, j: usize) -> f64;
    /// Writes column `j` into `out` (length `n_rows`).
    fn column(&self, j: usize, out: &mut [f64]);
    /// Writes `pi' G_j` for every column into `out` (length `n_cols`).
    fn price(&self, pi: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { y: Vec<f64>, duals: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
    IterationLimit,
}

struct Tableau<'a, C: Columns> {
    cols: &'a C,
    rhs: Vec<f64>,
    /// +1 or -1 per row; rows with negative rhs are flipped so artificials start feasible.
    row_sign: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    binv: DMatrix<f64>,
    xb: Vec<f64>,
    pivots_since_refactor: usize,
}

impl<'a, C: Columns> Tableau<'a, C> {
    fn n(&self) -> usize {
        self.cols.n_cols()
    }

    fn p(&self) -> usize {
        self.rhs.len()
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        let n = self.n();
        if j >= n {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[j - n] = 1.0;
        } else {
            self.cols.column(j, out);
            for (v, s) in out.iter_mut().zip(&self.row_sign) {
                *v *= s;
            }
        }
    }

    fn refactor(&mut self) -> bool {
        let p = self.p();
        let mut b = DMatrix::zeros(p, p);
        let mut col = vec![0.0; p];
        for (i, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for r in 0..p {
                b[(r, i)] = col[r];
            }
        }
        match b.lu().try_inverse() {
            Some(inv) => {
                self.binv = inv;
                let h = nalgebra::DVector::from_column_slice(&self.rhs);
                let x = &self.binv * h;
                for (xb, v) in self.xb.iter_mut().zip(x.iter()) {
                    *xb = if *v < 0.0 && *v > -1e-9 { 0.0 } else { *v };
                }
                self.pivots_since_refactor = 0;
                true
            }
            None => false,
        }
    }

    fn pivot(&mut self, row: usize, entering: usize, w: &[f64]) {
        let p = self.p();
        let piv = w[row];
        let theta = self.xb[row] / piv;
        for i in 0..p {
            if i == row {
                continue;
            }
            self.xb[i] -= theta * w[i];
            if self.xb[i] < 0.0 && self.xb[i] > -1e-8 {
                self.xb[i] = 0.0;
            }
        }
        self.xb[row] = theta;
        for c in 0..p {
            self.binv[(row, c)] /= piv;
        }
        for i in 0..p {
            if i == row || w[i] == 0.0 {
                continue;
            }
            let f = w[i];
            for c in 0..p {
                let v = self.binv[(row, c)];
                self.binv[(i, c)] -= f * v;
            }
        }
        self.is_basic[self.basis[row]] = false;
        self.basis[row] = entering;
        self.is_basic[entering] = true;
        self.pivots_since_refactor += 1;
    }

    /// Smallest ratio, ties broken by the smallest basic index.
    fn bland_ratio(&self, w: &[f64]) -> usize {
        let mut leave = usize::MAX;
        let mut best = f64::INFINITY;
        for i in 0..self.p() {
            if w[i] > PIVOT_TOL {
                let ratio = self.xb[i].max(0.0) / w[i];
                if leave == usize::MAX
                    || ratio < best - 1e-12
                    || (ratio <= best + 1e-12 && self.basis[i] < self.basis[leave])
                {
                    best = ratio;
                    leave = i;
                }
            }
        }
        leave
    }

    /// Two-pass Harris test: bound the step with slightly relaxed feasibility,
    /// then take the largest pivot among rows within that bound.
    fn harris_ratio(&self, w: &[f64]) -> usize {
        let mut bound = f64::INFINITY;
        for i in 0..self.p() {
            if w[i] > PIVOT_TOL {
                bound = bound.min((self.xb[i].max(0.0) + HARRIS_RELAX) / w[i]);
            }
        }
        let mut leave = usize::MAX;
        for i in 0..self.p() {
            if w[i] > PIVOT_TOL && self.xb[i].max(0.0) / w[i] <= bound && (leave == usize::MAX || w[i] > w[leave]) {
                leave = i;
            }
        }
        leave
    }

    /// Runs simplex iterations with the given cost vector. Artificial columns
    /// may enter only when `allow_artificial`.
    fn optimize(&mut self, cost: &dyn Fn(usize) -> f64, allow_artificial: bool, max_iter: usize) -> Result<(), LpOutcome> {
        let n = self.n();
        let p = self.p();
        let mut prices = vec![0.0; n];
        let mut pi = vec![0.0; p];
        let mut w = vec![0.0; p];
        let mut col = vec![0.0; p];
        let mut degenerate_run = 0usize;
        for _ in 0..max_iter {
            if self.pivots_since_refactor >= REFACTOR_EVERY && !self.refactor() {
                return Err(LpOutcome::IterationLimit);
            }
            // pi' = c_B' B^{-1}, expressed in the original (unflipped) row space for pricing.
            for k in 0..p {
                let mut s = 0.0;
                for i in 0..p {
                    s += cost(self.basis[i]) * self.binv[(i, k)];
                }
                pi[k] = s;
            }
            let signed: Vec<f64> = pi.iter().zip(&self.row_sign).map(|(a, s)| a * s).collect();
            self.cols.price(&signed, &mut prices);

            let bland = degenerate_run >= DEGENERATE_LIMIT;
            let mut entering = usize::MAX;
            let mut best = -OPT_TOL;
            for j in 0..n {
                if self.is_basic[j] {
                    continue;
                }
                let d = cost(j) - prices[j];
                if d < best {
                    entering = j;
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            if allow_artificial && entering == usize::MAX {
                for k in 0..p {
                    if !self.is_basic[n + k] && cost(n + k) - pi[k] < -OPT_TOL {
                        entering = n + k;
                        break;
                    }
                }
            }
            if entering == usize::MAX {
                return Ok(());
            }

            self.column(entering, &mut col);
            for i in 0..p {
                let mut s = 0.0;
                for r in 0..p {
                    s += self.binv[(i, r)] * col[r];
                }
                w[i] = s;
            }
            let leave = if bland { self.bland_ratio(&w) } else { self.harris_ratio(&w) };
            if leave == usize::MAX {
                return Err(LpOutcome::Unbounded);
            }
            let best_ratio = self.xb[leave].max(0.0) / w[leave];
            if best_ratio <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            let wc = w.clone();
            self.pivot(leave, entering, &wc);
        }
        Err(LpOutcome::IterationLimit)
    }
}

/// Two-phase revised simplex.
pub fn solve<C: Columns>(cols: &C, rhs: &[f64], max_iter: usize) -> LpOutcome {
    let n = cols.n_cols();
    let p = cols.n_rows();
    assert_eq!(rhs.len(), p);
    let row_sign: Vec<f64> = rhs.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let h: Vec<f64> = rhs.iter().zip(&row_sign).map(|(v, s)| v * s).collect();
    let mut is_basic = vec![false; n + p];
    for k in 0..p {
        is_basic[n + k] = true;
    }
    let mut t = Tableau {
        cols,
        rhs: h.clone(),
        row_sign,
        basis: (n..n + p).collect(),
        is_basic,
        binv: DMatrix::identity(p, p),
        xb: h,
        pivots_since_refactor: 0,
    };

    let phase1 = |j: usize| if j >= n { 1.0 } else { 0.0 };
    match t.optimize(&phase1, true, max_iter) {
        Ok(()) => {}
        Err(LpOutcome::Unbounded) => return LpOutcome::Infeasible,
        Err(other) => return other,
    }
    t.refactor();
    let scale = 1.0 + t.rhs.iter().map(|v| v.abs()).sum::<f64>();
    let infeas: f64 = t.basis.iter().zip(&t.xb).filter(|(&j, _)| j >= n).map(|(_, &x)| x).sum();
    if infeas > 1e-8 * scale {
        return LpOutcome::Infeasible;
    }

    // Drive zero-level artificials out of the basis where a real column can replace them.
    let mut row_vec = vec![0.0; p];
    let mut prices = vec![0.0; n];
    let mut col = vec![0.0; p];
    for r in 0..p {
        if t.basis[r] < n {
            continue;
        }
        for k in 0..p {
            row_vec[k] = t.binv[(r, k)] * t.row_sign[k];
        }
        cols.price(&row_vec, &mut prices);
        let mut best = usize::MAX;
        let mut best_abs = 1e-7;
        for j in 0..n {
            if !t.is_basic[j] && prices[j].abs() > best_abs {
                best_abs = prices[j].abs();
                best = j;
            }
        }
        if best != usize::MAX {
            t.column(best, &mut col);
            let mut w = vec![0.0; p];
            for i in 0..p {
                w[i] = (0..p).map(|c| t.binv[(i, c)] * col[c]).sum();
            }
            t.pivot(r, best, &w);
        }
    }

    let phase2 = |j: usize| if j >= n { 0.0 } else { cols.cost(j) };
    if let Err(outcome) = t.optimize(&phase2, false, max_iter) {
        return outcome;
    }
    t.refactor();

    let mut y = vec![0.0; n];
    for (i, &j) in t.basis.iter().enumerate() {
        if j < n {
            y[j] = t.xb[i].max(0.0);
        }
    }
    let mut duals = vec![0.0; p];
    for k in 0..p {
        let mut s = 0.0;
        for i in 0..p {
            s += phase2(t.basis[i]) * t.binv[(i, k)];
        }
        duals[k] = s * t.row_sign[k];
    }
    let objective = y.iter().enumerate().map(|(j, v)| v * cols.cost(j)).sum();
    LpOutcome::Optimal { y, duals, objective }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dense {
        g: Vec<Vec<f64>>, // rows
        c: Vec<f64>,
    }

    impl Columns for Dense {
        fn n_rows(&self) -> usize {
            self.g.len()
        }
        fn n_cols(&self) -> usize {
            self.c.len()
        }
        fn cost(&self, j: usize) -> f64 {
            self.c[j]
        }
        fn column(&self, j: usize, out: &mut [f64]) {
            for (o, row) in out.iter_mut().zip(&self.g) {
                *o = row[j];
            }
        }
        fn price(&self, pi: &[f64], out: &mut [f64]) {
            for (j, o) in out.iter_mut().enumerate() {
                *o = self.g.iter().zip(pi).map(|(row, p)| row[j] * p).sum();
            }
        }
    }

    #[test]
    fn small_standard_form() {
        // min -x1 - 2 x2  s.t. x1 + x2 + s1 = 4, x1 + 3 x2 + s2 = 6
        // optimum x = (3, 1), objective -5.
        let lp = Dense { g: vec![vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 3.0, 0.0, 1.0]], c: vec![-1.0, -2.0, 0.0, 0.0] };
        match solve(&lp, &[4.0, 6.0], 100) {
            LpOutcome::Optimal { y, objective, .. } => {
                assert!((objective + 5.0).abs() < 1e-12);
                assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        // x1 + x2 = -1 with x >= 0 is infeasible.
        let lp = Dense { g: vec![vec![1.0, 1.0]], c: vec![1.0, 1.0] };
        assert_eq!(solve(&lp, &[-1.0], 100), LpOutcome::Infeasible);
        // min -x1 s.t. x1 - x2 = 0 is unbounded.
        let lp = Dense { g: vec![vec![1.0, -1.0]], c: vec![-1.0, 0.0] };
        assert_eq!(solve(&lp, &[0.0], 100), LpOutcome::Unbounded);
    }
}
