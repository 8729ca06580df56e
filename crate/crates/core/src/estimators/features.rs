//! Design rows for the parametric learners and covariate-pattern aggregation.

use super::linalg::Matrix;
use crate::datagen::Dataset;
use std::collections::HashMap;

/// `[1, t, x...]` for outcome models, `[1, x...]` when `t` is `None`.
pub fn main_effects_row(x: &[f64], t: Option<f64>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if let Some(t) = t {
        out.push(t);
    }
    out.extend_from_slice(x);
}

/// Intercept, every raw column, and every product of two distinct raw columns.
pub fn pairwise_row(raw: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(raw);
    for i in 0..raw.len() {
        for j in i + 1..raw.len() {
            out.push(raw[i] * raw[j]);
        }
    }
}

pub fn expand(raw: &Matrix, f: impl Fn(&[f64], &mut Vec<f64>)) -> Matrix {
    let mut buf = Vec::new();
    let mut data = Vec::new();
    let mut cols = 0;
    for i in 0..raw.rows() {
        f(raw.row(i), &mut buf);
        cols = buf.len();
        data.extend_from_slice(&buf);
    }
    if raw.rows() == 0 {
        f(&vec![0.0; raw.cols()], &mut buf);
        cols = buf.len();
    }
    Matrix::from_vec(raw.rows(), cols, data)
}

/// What a nuisance model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// `P(Y = 1 | T, X)`; raw features are `[t, x...]`.
    Outcome,
    /// `P(T = 1 | X)`; raw features are `[x...]`.
    Treatment,
}

/// Rows collapsed onto distinct covariate patterns. Every learner in the library
/// depends on the data only through these per-pattern counts, so fitting on the
/// collapsed table gives the same model as fitting on the rows.
#[derive(Debug, Clone)]
pub struct PatternSet {
    /// Raw features of each pattern.
    pub features: Matrix,
    pub count: Vec<f64>,
    /// Number of positive responses in each pattern.
    pub positives: Vec<f64>,
    /// Pattern key: the cell id for treatment, `2 * cell + t` for outcome.
    pub keys: Vec<usize>,
}

pub fn pattern_key(target: Target, cell: usize, t: u8) -> usize {
    match target {
        Target::Outcome => 2 * cell + t as usize,
        Target::Treatment => cell,
    }
}

impl PatternSet {
    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.count.iter().sum()
    }

    pub fn mean_response(&self) -> Vec<f64> {
        self.positives.iter().zip(&self.count).map(|(s, n)| s / n).collect()
    }

    /// Collapses the listed rows. Patterns come out sorted by key, so the result
    /// does not depend on row order.
    pub fn from_rows(data: &Dataset, rows: &[usize], target: Target) -> PatternSet {
        let mut index: HashMap<usize, usize> = HashMap::new();
        let mut keys = Vec::new();
        let mut first_row = Vec::new();
        let mut count = Vec::new();
        let mut positives = Vec::new();
        for &i in rows {
            let key = pattern_key(target, data.cell[i] as usize, data.t[i]);
            let response = match target {
                Target::Outcome => data.y[i],
                Target::Treatment => data.t[i],
            } as f64;
            let slot = *index.entry(key).or_insert_with(|| {
                keys.push(key);
                first_row.push(i);
                count.push(0.0);
                positives.push(0.0);
                keys.len() - 1
            });
            count[slot] += 1.0;
            positives[slot] += response;
        }
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&s| keys[s]);
        let width = raw_width(data, target);
        let mut feats = Vec::with_capacity(order.len() * width);
        let mut buf = Vec::with_capacity(width);
        for &s in &order {
            let i = first_row[s];
            raw_features(data, i, target.then_t(data.t[i] as f64), &mut buf);
            feats.extend_from_slice(&buf);
        }
        PatternSet {
            features: Matrix::from_vec(order.len(), width, feats),
            count: order.iter().map(|&s| count[s]).collect(),
            positives: order.iter().map(|&s| positives[s]).collect(),
            keys: order.iter().map(|&s| keys[s]).collect(),
        }
    }
}

impl Target {
    fn then_t(self, t: f64) -> Option<f64> {
        match self {
            Target::Outcome => Some(t),
            Target::Treatment => None,
        }
    }
}

pub fn raw_width(data: &Dataset, target: Target) -> usize {
    data.u + data.h + usize::from(target == Target::Outcome)
}

/// `[t?, x_bin..., x_num...]` for row `i`, with `t` overridden by the caller.
pub fn raw_features(data: &Dataset, i: usize, t: Option<f64>, out: &mut Vec<f64>) {
    out.clear();
    if let Some(t) = t {
        out.push(t);
    }
    out.extend(data.x_bin_row(i).iter().map(|&b| b as f64));
    out.extend_from_slice(data.x_num_row(i));
}

/// Distinct cells among `rows`, each with a representative row, sorted by cell id.
pub fn distinct_cells(data: &Dataset, rows: &[usize]) -> Vec<(usize, usize)> {
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for &i in rows {
        seen.entry(data.cell[i] as usize).or_insert(i);
    }
    let mut out: Vec<(usize, usize)> = seen.into_iter().collect();
    out.sort_unstable();
    out
}

/// Raw feature rows for the given representative rows, with treatment set to `t`.
pub fn query_matrix(data: &Dataset, reps: &[(usize, usize)], target: Target, t: f64) -> Matrix {
    let width = raw_width(data, target);
    let mut feats = Vec::with_capacity(reps.len() * width);
    let mut buf = Vec::with_capacity(width);
    for &(_, i) in reps {
        raw_features(data, i, target.then_t(t), &mut buf);
        feats.extend_from_slice(&buf);
    }
    Matrix::from_vec(reps.len(), width, feats)
}
