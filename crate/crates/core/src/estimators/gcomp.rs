//! Substitution estimator from a main-effects logistic outcome model.

use super::features::{expand, main_effects_row, PatternSet, Target};
use super::glm::fit_logistic_irls;
use super::linalg::{dot, expit, sample_sd, solve_spd};
use super::{EstimateError, EstimateResult};
use crate::datagen::Dataset;
use std::collections::BTreeMap;

/// Averages `m(1, x) - m(0, x)` over the sample. The standard error uses the
/// delta method with the estimated coefficient covariance.
pub fn gcomp_estimate(data: &Dataset) -> Result<EstimateResult, EstimateError> {
    let n1 = data.n_treated();
    if n1 == 0 || n1 == data.n {
        return Err(EstimateError::MissingArm);
    }
    let mut diag = BTreeMap::new();
    if data.y.iter().all(|&y| y == data.y[0]) {
        diag.insert("constant_outcome".into(), 1.0);
        return Ok(EstimateResult::new("gcomp", 0.0, 0.0, diag));
    }
    let rows: Vec<usize> = (0..data.n).collect();
    let patterns = PatternSet::from_rows(data, &rows, Target::Outcome);
    let design = expand(&patterns.features, |r, out| main_effects_row(r, None, out));
    let fit = fit_logistic_irls(&design, &patterns.mean_response(), &patterns.count).map_err(EstimateError::Fit)?;
    let p = fit.coef.len();

    let n = data.n as f64;
    let mut x1 = Vec::with_capacity(p);
    let mut x0 = Vec::with_capacity(p);
    let mut raw = Vec::with_capacity(p);
    let mut contrast = Vec::with_capacity(data.n);
    let mut grad = vec![0.0; p];
    let mut fitted_obs = Vec::with_capacity(data.n);
    let mut design_obs: Vec<Vec<f64>> = Vec::with_capacity(data.n);
    for i in 0..data.n {
        raw.clear();
        raw.extend(data.x_bin_row(i).iter().map(|&b| b as f64));
        raw.extend_from_slice(data.x_num_row(i));
        main_effects_row(&raw, Some(1.0), &mut x1);
        main_effects_row(&raw, Some(0.0), &mut x0);
        let m1 = expit(dot(&x1, &fit.coef));
        let m0 = expit(dot(&x0, &fit.coef));
        contrast.push(m1 - m0);
        for a in 0..p {
            grad[a] += (m1 * (1.0 - m1) * x1[a] - m0 * (1.0 - m0) * x0[a]) / n;
        }
        let (m_obs, x_obs) = if data.t[i] == 1 { (m1, x1.clone()) } else { (m0, x0.clone()) };
        fitted_obs.push(m_obs);
        design_obs.push(x_obs);
    }
    let point = contrast.iter().sum::<f64>() / n;
    let direction = solve_spd(&fit.information, &grad).ok_or_else(|| EstimateError::Degenerate("singular information".into()))?;
    let values: Vec<f64> = (0..data.n)
        .map(|i| contrast[i] - point + dot(&direction, &design_obs[i]) * (data.y[i] as f64 - fitted_obs[i]))
        .collect();
    let se = sample_sd(&values) / n.sqrt();
    diag.insert("ridge".into(), fit.ridge);
    diag.insert("irls_iterations".into(), fit.iterations as f64);
    Ok(EstimateResult::new("gcomp", point, se, diag))
}
