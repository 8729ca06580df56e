//! Weighted logistic regression by Newton-Raphson (IRLS) with step halving.

use super::linalg::{dot, expit, solve_spd, Matrix};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("logistic fit did not converge in {iterations} iterations (max score {score:e})")]
    NonConvergence { iterations: usize, score: f64 },
    #[error("design, response and weights disagree in length")]
    Shape,
    #[error("all weights are zero")]
    NoWeight,
}

#[derive(Debug, Clone)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest component of the weight-normalized score.
    pub tol: f64,
    /// Coefficients beyond this magnitude are taken as a sign of separation.
    pub separation_bound: f64,
    /// Ridge penalty used after separation or a singular information matrix.
    pub ridge: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { max_iter: 200, tol: 1e-9, separation_bound: 30.0, ridge: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    /// Penalty actually used: zero for a plain maximum-likelihood fit.
    pub ridge: f64,
    /// Weighted mean information `X' W X / sum(w)` at the solution, penalty included, row-major.
    pub information: Vec<f64>,
}

impl LogisticFit {
    pub fn ridged(&self) -> bool {
        self.ridge > 0.0
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        expit(dot(row, &self.coef))
    }

    pub fn predict(&self, design: &Matrix) -> Vec<f64> {
        (0..design.rows()).map(|i| self.predict_row(design.row(i))).collect()
    }
}

/// Maximizes the weighted Bernoulli log-likelihood `sum w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`
/// with fractional responses allowed.
pub fn fit_logistic_irls(design: &Matrix, response: &[f64], weights: &[f64]) -> Result<LogisticFit, FitError> {
    fit_logistic_with(design, response, weights, None, &LogisticOptions::default())
}

pub fn fit_logistic_with(
    design: &Matrix,
    response: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
    opts: &LogisticOptions,
) -> Result<LogisticFit, FitError> {
    let n = design.rows();
    if response.len() != n || weights.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(FitError::Shape);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FitError::NoWeight);
    }
    match newton(design, response, weights, offset, total, 0.0, opts) {
        Ok(fit) => Ok(fit),
        Err(Stop::Separated | Stop::Singular) => {
            newton(design, response, weights, offset, total, opts.ridge, opts).map_err(|s| match s {
                Stop::NotConverged(it, score) => FitError::NonConvergence { iterations: it, score },
                _ => FitError::NonConvergence { iterations: opts.max_iter, score: f64::NAN },
            })
        }
        Err(Stop::NotConverged(it, score)) => Err(FitError::NonConvergence { iterations: it, score }),
    }
}

enum Stop {
    Separated,
    Singular,
    NotConverged(usize, f64),
}

fn objective(
    design: &Matrix,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    beta: &[f64],
    total: f64,
    ridge: f64,
) -> f64 {
    let mut ll = 0.0;
    for i in 0..design.rows() {
        if w[i] == 0.0 {
            continue;
        }
        let eta = dot(design.row(i), beta) + offset.map_or(0.0, |o| o[i]);
        // y*eta - log(1 + e^eta), evaluated stably
        let log1p_exp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        ll += w[i] * (y[i] * eta - log1p_exp);
    }
    ll / total - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Returns the normalized score and information at `beta`.
fn derivatives(
    design: &Matrix,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    beta: &[f64],
    total: f64,
    ridge: f64,
) -> (Vec<f64>, Vec<f64>) {
    let p = design.cols();
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    for i in 0..design.rows() {
        if w[i] == 0.0 {
            continue;
        }
        let row = design.row(i);
        let mu = expit(dot(row, beta) + offset.map_or(0.0, |o| o[i]));
        let r = w[i] * (y[i] - mu);
        let v = w[i] * mu * (1.0 - mu);
        for a in 0..p {
            let xa = row[a];
            if xa == 0.0 {
                continue;
            }
            score[a] += r * xa;
            let vx = v * xa;
            for b in 0..=a {
                info[a * p + b] += vx * row[b];
            }
        }
    }
    for a in 0..p {
        score[a] = score[a] / total - ridge * beta[a];
        for b in 0..=a {
            info[a * p + b] /= total;
            info[b * p + a] = info[a * p + b];
        }
        info[a * p + a] += ridge;
    }
    (score, info)
}

fn newton(
    design: &Matrix,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    total: f64,
    ridge: f64,
    opts: &LogisticOptions,
) -> Result<LogisticFit, Stop> {
    let p = design.cols();
    let mut beta = vec![0.0; p];
    let mut current = objective(design, y, w, offset, &beta, total, ridge);
    let mut last_score = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let (score, info) = derivatives(design, y, w, offset, &beta, total, ridge);
        let max_score = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        last_score = max_score;
        if max_score <= opts.tol {
            return Ok(LogisticFit { coef: beta, iterations: it, ridge, information: info });
        }
        if it == opts.max_iter {
            break;
        }
        let Some(step) = solve_spd(&info, &score) else {
            if ridge == 0.0 {
                return Err(Stop::Singular);
            }
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let value = objective(design, y, w, offset, &trial, total, ridge);
            if value >= current - 1e-15 * current.abs().max(1.0) {
                beta = trial;
                current = value;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // no ascent possible at machine precision: accept the current point if the score is tiny
            if max_score <= opts.tol * 1e3 {
                return Ok(LogisticFit { coef: beta, iterations: it, ridge, information: info });
            }
            break;
        }
        if ridge == 0.0 && beta.iter().any(|b| b.abs() > opts.separation_bound) {
            return Err(Stop::Separated);
        }
    }
    Err(Stop::NotConverged(opts.max_iter, last_score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::linalg::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intercept_only_matches_closed_form() {
        let x = Matrix::from_vec(4, 1, vec![1.0; 4]);
        let fit = fit_logistic_irls(&x, &[1.0, 0.0, 0.0, 0.0], &[1.0; 4]).unwrap();
        assert!((fit.coef[0] - logit(0.25)).abs() < 1e-9);
        assert!((fit.coef[0] + 1.0986).abs() < 1e-4);
        assert!(!fit.ridged());
    }

    #[test]
    fn saturated_binary_fit_reproduces_cell_means() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, (i % 2) as f64]).collect();
        let y = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let x = Matrix::from_rows(&rows);
        let fit = fit_logistic_irls(&x, &y, &[1.0; 10]).unwrap();
        let p = fit.predict(&x);
        // even rows: y = 1,0,1,0,0 -> 0.4; odd rows: 1,1,0,1,0 -> 0.6
        assert!((p[0] - 0.4).abs() < 1e-9);
        assert!((p[1] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let fit = fit_logistic_irls(&x, &[0.0, 0.0, 1.0, 1.0], &[1.0; 4]).unwrap();
        assert!(fit.ridged());
        assert!(fit.predict_row(&[1.0, 1.0]) > 0.99);
    }

    #[test]
    fn collinear_design_uses_ridge() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let fit = fit_logistic_irls(&x, &[1.0, 0.0, 0.0], &[1.0; 3]).unwrap();
        assert!(fit.ridged());
        assert!((fit.predict_row(&[1.0, 1.0]) - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn weights_equal_replication() {
        let x = Matrix::from_rows(&[vec![1.0, 0.2], vec![1.0, 0.9], vec![1.0, 0.5]]);
        let a = fit_logistic_irls(&x, &[1.0, 0.0, 1.0], &[2.0, 1.0, 3.0]).unwrap();
        let xr = Matrix::from_rows(&[
            vec![1.0, 0.2],
            vec![1.0, 0.2],
            vec![1.0, 0.9],
            vec![1.0, 0.5],
            vec![1.0, 0.5],
            vec![1.0, 0.5],
        ]);
        let b = fit_logistic_irls(&xr, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0], &[1.0; 6]).unwrap();
        for (u, v) in a.coef.iter().zip(&b.coef) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn recovers_known_coefficients() {
        let truth = [-0.5, 1.2, -0.8];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let r = vec![1.0, rng.random::<f64>(), if rng.random::<bool>() { 1.0 } else { 0.0 }];
            let p = expit(dot(&r, &truth));
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            rows.push(r);
        }
        let x = Matrix::from_rows(&rows);
        let fit = fit_logistic_irls(&x, &y, &vec![1.0; n]).unwrap();
        let cov = nalgebra::DMatrix::from_row_slice(3, 3, &fit.information).try_inverse().unwrap();
        for j in 0..3 {
            let se = (cov[(j, j)] / n as f64).sqrt();
            assert!((fit.coef[j] - truth[j]).abs() <= 4.0 * se, "coef {j}: {} vs {}", fit.coef[j], truth[j]);
        }
    }

    #[test]
    fn offset_shifts_intercept() {
        let x = Matrix::from_vec(4, 1, vec![1.0; 4]);
        let off = [0.7; 4];
        let fit = fit_logistic_with(&x, &[1.0, 0.0, 0.0, 0.0], &[1.0; 4], Some(&off), &LogisticOptions::default())
            .unwrap();
        assert!((fit.coef[0] + 0.7 - logit(0.25)).abs() < 1e-9);
    }
}
