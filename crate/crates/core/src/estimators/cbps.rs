//! Just-identified covariate balancing propensity scores and the weighted
//! difference-in-means they feed.

use super::features::{expand, main_effects_row, PatternSet, Target};
use super::glm::fit_logistic_irls;
use super::linalg::{dot, expit, solve_spd, Matrix};
use super::{EstimateError, EstimateResult};
use crate::datagen::Dataset;
use std::collections::BTreeMap;

pub const CBPS_MAX_ITER: usize = 100;
pub const CBPS_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CbpsFit {
    pub coef: Vec<f64>,
    /// Fitted propensities per design row, before truncation.
    pub propensity: Vec<f64>,
    /// Largest absolute balance moment at `coef`.
    pub balance_residual: f64,
    pub iterations: usize,
    /// Newton did not converge and the logistic maximum-likelihood fit was used.
    pub fallback: bool,
}

/// Mean balance moments `(1/n) sum w_r [s_r / pi_r - (n_r - s_r) / (1 - pi_r)] x_r` over
/// design rows carrying `count` observations of which `treated` are treated.
fn moments(design: &Matrix, count: &[f64], treated: &[f64], beta: &[f64], n: f64) -> (Vec<f64>, Vec<f64>) {
    let p = design.cols();
    let mut f = vec![0.0; p];
    let mut neg_jac = vec![0.0; p * p];
    for r in 0..design.rows() {
        let x = design.row(r);
        let pi = expit(dot(x, beta));
        let (s, c) = (treated[r], count[r] - treated[r]);
        let (mut m, mut d) = (0.0, 0.0);
        if s > 0.0 {
            m += s / pi;
            d += s * (1.0 - pi) / pi;
        }
        if c > 0.0 {
            m -= c / (1.0 - pi);
            d += c * pi / (1.0 - pi);
        }
        for a in 0..p {
            f[a] += m * x[a] / n;
            for b in 0..p {
                neg_jac[a * p + b] += d * x[a] * x[b] / n;
            }
        }
    }
    (f, neg_jac)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_finite() { m.max(x.abs()) } else { f64::INFINITY })
}

/// Solves the balance equations by damped Newton from the logistic MLE. Rows of
/// `design` may carry several observations (`count`) of which `treated` are treated.
pub fn fit_cbps(design: &Matrix, count: &[f64], treated: &[f64]) -> Result<CbpsFit, EstimateError> {
    let n: f64 = count.iter().sum();
    let response: Vec<f64> = treated.iter().zip(count).map(|(s, c)| s / c).collect();
    let mle = fit_logistic_irls(design, &response, count).map_err(EstimateError::Fit)?;
    let mut beta = mle.coef.clone();
    let (mut f, mut jac) = moments(design, count, treated, &beta, n);
    let mut norm = max_abs(&f);
    let mut iterations = 0;
    while norm > CBPS_TOL && iterations < CBPS_MAX_ITER {
        iterations += 1;
        let Some(step) = solve_spd(&jac, &f) else { break };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let (tf, tj) = moments(design, count, treated, &trial, n);
            let tn = max_abs(&tf);
            if tn.is_finite() && tn < norm {
                beta = trial;
                f = tf;
                jac = tj;
                norm = tn;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let converged = norm <= CBPS_TOL;
    if !converged {
        beta = mle.coef;
        norm = max_abs(&moments(design, count, treated, &beta, n).0);
    }
    let propensity = (0..design.rows()).map(|r| expit(dot(design.row(r), &beta))).collect();
    Ok(CbpsFit { coef: beta, propensity, balance_residual: norm, iterations, fallback: !converged })
}

/// Hajek-normalized inverse-probability-weighted contrast with balancing
/// propensities truncated to `[g_trunc, 1 - g_trunc]`.
pub fn iptw_estimate(data: &Dataset, g_trunc: f64) -> Result<EstimateResult, EstimateError> {
    let n1 = data.n_treated();
    let n0 = data.n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(EstimateError::MissingArm);
    }
    if n1 < 2 || n0 < 2 {
        return Err(EstimateError::Degenerate("fewer than two rows in a treatment arm".into()));
    }
    let rows: Vec<usize> = (0..data.n).collect();
    let cells = PatternSet::from_rows(data, &rows, Target::Treatment);
    let design = expand(&cells.features, |r, out| main_effects_row(r, None, out));
    let fit = fit_cbps(&design, &cells.count, &cells.positives)?;
    let by_cell: std::collections::HashMap<usize, f64> =
        cells.keys.iter().zip(&fit.propensity).map(|(&k, &p)| (k, p.clamp(g_trunc, 1.0 - g_trunc))).collect();

    let pi: Vec<f64> = (0..data.n).map(|i| by_cell[&(data.cell[i] as usize)]).collect();
    let (mut sw1, mut swy1, mut sw0, mut swy0) = (0.0, 0.0, 0.0, 0.0);
    let mut max_w: f64 = 0.0;
    for i in 0..data.n {
        let y = data.y[i] as f64;
        if data.t[i] == 1 {
            let w = 1.0 / pi[i];
            sw1 += w;
            swy1 += w * y;
            max_w = max_w.max(w);
        } else {
            let w = 1.0 / (1.0 - pi[i]);
            sw0 += w;
            swy0 += w * y;
            max_w = max_w.max(w);
        }
    }
    let mu1 = swy1 / sw1;
    let mu0 = swy0 / sw0;
    let point = mu1 - mu0;
    let mut var = 0.0;
    for i in 0..data.n {
        let y = data.y[i] as f64;
        let term = if data.t[i] == 1 { (y - mu1) / (pi[i] * sw1) } else { -(y - mu0) / ((1.0 - pi[i]) * sw0) };
        var += term * term;
    }
    let mut diag = BTreeMap::new();
    diag.insert("balance_residual".into(), fit.balance_residual);
    diag.insert("cbps_fallback".into(), f64::from(u8::from(fit.fallback)));
    diag.insert("cbps_iterations".into(), fit.iterations as f64);
    diag.insert("max_weight".into(), max_w);
    Ok(EstimateResult::new("iptw_cbps", point, var.sqrt(), diag))
}
