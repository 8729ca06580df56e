//! Ensemble nuisance fits and the influence-function based estimators built on
//! them: the one-step correction, TMLE and cross-fitted TMLE.

use super::features::Target;
use super::linalg::{expit, logit, sample_sd};
use super::superlearner::{default_folds, stratified_folds, superlearner_fit, SuperLearnerConfig, SuperLearnerFit};
use super::{EstimateError, EstimateResult, EstimatorConfig};
use crate::datagen::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Residual allowed on the mean influence function after targeting.
pub const EIF_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fluctuation {
    /// Separate fluctuation parameters for the treated and control clever covariates.
    TwoEpsilon,
    /// One parameter on `(2t - 1) / g(t | x)`.
    SingleEpsilon,
}

/// Per-row nuisance predictions, already truncated.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    /// `P(T = 1 | X_i)`.
    pub g_hat: Vec<f64>,
    /// `[m(0, X_i), m(1, X_i)]`.
    pub m_hat: [Vec<f64>; 2],
    /// Outer fold of each row when predictions are out of fold.
    pub fold_assignment: Option<Vec<usize>>,
    pub g_weights: Vec<(String, f64)>,
    pub m_weights: Vec<(String, f64)>,
}

impl NuisanceFit {
    fn diagnostics(&self, diag: &mut BTreeMap<String, f64>) {
        for (name, w) in &self.g_weights {
            diag.insert(format!("g_weight.{name}"), *w);
        }
        for (name, w) in &self.m_weights {
            diag.insert(format!("m_weight.{name}"), *w);
        }
        diag.insert("g_min".into(), self.g_hat.iter().copied().fold(f64::INFINITY, f64::min));
        diag.insert("g_max".into(), self.g_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

fn weights_of(fit: &SuperLearnerFit) -> Vec<(String, f64)> {
    fit.names.iter().zip(&fit.weights).map(|(n, w)| (n.to_string(), *w)).collect()
}

fn check_arms(data: &Dataset, rows: &[usize]) -> Result<(), EstimateError> {
    let treated = rows.iter().filter(|&&i| data.t[i] == 1).count();
    if treated == 0 || treated == rows.len() {
        Err(EstimateError::MissingArm)
    } else {
        Ok(())
    }
}

struct RowPredictions {
    g: Vec<f64>,
    m0: Vec<f64>,
    m1: Vec<f64>,
    g_fit: SuperLearnerFit,
    m_fit: SuperLearnerFit,
}

fn fit_and_predict<R: Rng + ?Sized>(
    data: &Dataset,
    train: &[usize],
    predict: &[usize],
    sl: &SuperLearnerConfig,
    rng: &mut R,
) -> Result<RowPredictions, EstimateError> {
    check_arms(data, train)?;
    let folds = default_folds(train.len());
    let m_fit = superlearner_fit(data, train, Target::Outcome, folds, sl, rng)?;
    let g_fit = superlearner_fit(data, train, Target::Treatment, folds, sl, rng)?;
    Ok(RowPredictions {
        g: g_fit.predict_rows(data, predict, 1.0),
        m0: m_fit.predict_rows(data, predict, 0.0),
        m1: m_fit.predict_rows(data, predict, 1.0),
        g_fit,
        m_fit,
    })
}

/// Ensembles trained and evaluated on the full sample.
pub fn fit_nuisance<R: Rng + ?Sized>(data: &Dataset, config: &EstimatorConfig, rng: &mut R) -> Result<NuisanceFit, EstimateError> {
    let rows: Vec<usize> = (0..data.n).collect();
    let p = fit_and_predict(data, &rows, &rows, &config.superlearner, rng)?;
    let (gt, mt) = (config.g_truncation, config.m_truncation);
    Ok(NuisanceFit {
        g_hat: p.g.iter().map(|g| g.clamp(gt, 1.0 - gt)).collect(),
        m_hat: [p.m0.iter().map(|m| m.clamp(mt, 1.0 - mt)).collect(), p.m1.iter().map(|m| m.clamp(mt, 1.0 - mt)).collect()],
        fold_assignment: None,
        g_weights: weights_of(&p.g_fit),
        m_weights: weights_of(&p.m_fit),
    })
}

/// Each row's predictions come from ensembles trained on the other `v` - 1
/// folds. Learner weights are averaged over folds.
pub fn fit_crossfit_nuisance<R: Rng + ?Sized>(
    data: &Dataset,
    v: usize,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<NuisanceFit, EstimateError> {
    if v < 2 {
        return Err(EstimateError::Degenerate(format!("cross-fitting needs at least two folds, got {v}")));
    }
    let rows: Vec<usize> = (0..data.n).collect();
    check_arms(data, &rows)?;
    let fold = stratified_folds(data, &rows, v, rng);
    let seeds: Vec<u64> = (0..v).map(|_| rng.random()).collect();
    let (gt, mt) = (config.g_truncation, config.m_truncation);
    let mut g_hat = vec![f64::NAN; data.n];
    let mut m_hat = [vec![f64::NAN; data.n], vec![f64::NAN; data.n]];
    let mut g_weights: Vec<(String, f64)> = Vec::new();
    let mut m_weights: Vec<(String, f64)> = Vec::new();
    let accumulate = |acc: &mut Vec<(String, f64)>, fit: &SuperLearnerFit| {
        if acc.is_empty() {
            *acc = fit.names.iter().map(|n| (n.to_string(), 0.0)).collect();
        }
        for (slot, w) in acc.iter_mut().zip(&fit.weights) {
            slot.1 += w / v as f64;
        }
    };
    for (k, &seed) in seeds.iter().enumerate() {
        let train: Vec<usize> = rows.iter().copied().filter(|&i| fold[i] != k).collect();
        let held: Vec<usize> = rows.iter().copied().filter(|&i| fold[i] == k).collect();
        if held.is_empty() {
            continue;
        }
        let p = fit_and_predict(data, &train, &held, &config.superlearner, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for (j, &i) in held.iter().enumerate() {
            g_hat[i] = p.g[j].clamp(gt, 1.0 - gt);
            m_hat[0][i] = p.m0[j].clamp(mt, 1.0 - mt);
            m_hat[1][i] = p.m1[j].clamp(mt, 1.0 - mt);
        }
        accumulate(&mut g_weights, &p.g_fit);
        accumulate(&mut m_weights, &p.m_fit);
    }
    Ok(NuisanceFit { g_hat, m_hat, fold_assignment: Some(fold), g_weights, m_weights })
}

/// Influence value of the treatment-effect contrast at one observation.
pub fn compute_eif(t: u8, y: u8, g1: f64, m0: f64, m1: f64, theta: f64) -> f64 {
    let (t, y) = (t as f64, y as f64);
    t / g1 * (y - m1) - (1.0 - t) / (1.0 - g1) * (y - m0) + m1 - m0 - theta
}

fn eif_values(data: &Dataset, g: &[f64], m0: &[f64], m1: &[f64], theta: f64) -> Vec<f64> {
    (0..data.n).map(|i| compute_eif(data.t[i], data.y[i], g[i], m0[i], m1[i], theta)).collect()
}

pub fn aipw_estimate(data: &Dataset, nuisance: &NuisanceFit) -> Result<EstimateResult, EstimateError> {
    let n = data.n as f64;
    let [m0, m1] = &nuisance.m_hat;
    let plug_in = (0..data.n).map(|i| m1[i] - m0[i]).sum::<f64>() / n;
    let correction = eif_values(data, &nuisance.g_hat, m0, m1, plug_in).iter().sum::<f64>() / n;
    let point = plug_in + correction;
    let eif = eif_values(data, &nuisance.g_hat, m0, m1, point);
    let mut diag = BTreeMap::new();
    diag.insert("plug_in".into(), plug_in);
    nuisance.diagnostics(&mut diag);
    Ok(EstimateResult::new("aipw", point, sample_sd(&eif) / n.sqrt(), diag))
}

/// Root of a decreasing score by Newton steps safeguarded with a bisection bracket.
fn solve_decreasing(score: impl Fn(f64) -> (f64, f64), scale: f64) -> Option<f64> {
    let (f0, _) = score(0.0);
    if f0 == 0.0 {
        return Some(0.0);
    }
    let dir = f0.signum();
    let mut far = dir;
    let mut lo_hi = None;
    for _ in 0..60 {
        let (f, _) = score(far);
        if !f.is_finite() {
            return None;
        }
        if f.signum() != dir {
            lo_hi = Some(if dir > 0.0 { (0.0, far) } else { (far, 0.0) });
            break;
        }
        far *= 2.0;
    }
    let (mut lo, mut hi) = lo_hi?;
    let mut x = 0.0;
    for _ in 0..200 {
        let (f, d) = score(x);
        if f.abs() <= 1e-13 * scale {
            return Some(x);
        }
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = if d < 0.0 { x - f / d } else { f64::NAN };
        x = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return Some(x);
        }
    }
    Some(x)
}

struct Targeted {
    m0: Vec<f64>,
    m1: Vec<f64>,
    eps: [f64; 2],
    mode: Fluctuation,
}

fn fluctuate(data: &Dataset, nuisance: &NuisanceFit, mode: Fluctuation) -> Option<Targeted> {
    let g = &nuisance.g_hat;
    let [m0, m1] = &nuisance.m_hat;
    let off0: Vec<f64> = m0.iter().map(|&m| logit(m)).collect();
    let off1: Vec<f64> = m1.iter().map(|&m| logit(m)).collect();
    let n = data.n as f64;
    // clever covariate of each arm's prediction
    let h1 = |i: usize| 1.0 / g[i];
    let h0 = |i: usize| -1.0 / (1.0 - g[i]);
    let arm_score = |arm: u8, eps: f64| {
        let (mut f, mut d) = (0.0, 0.0);
        for i in 0..data.n {
            if data.t[i] != arm {
                continue;
            }
            let (h, off) = if arm == 1 { (h1(i), off1[i]) } else { (h0(i), off0[i]) };
            let mu = expit(off + eps * h);
            f += h * (data.y[i] as f64 - mu);
            d -= h * h * mu * (1.0 - mu);
        }
        (f, d)
    };
    let eps = match mode {
        Fluctuation::TwoEpsilon => [solve_decreasing(|e| arm_score(0, e), n)?, solve_decreasing(|e| arm_score(1, e), n)?],
        Fluctuation::SingleEpsilon => {
            let e = solve_decreasing(
                |e| {
                    let (a, da) = arm_score(0, e);
                    let (b, db) = arm_score(1, e);
                    (a + b, da + db)
                },
                n,
            )?;
            [e, e]
        }
    };
    Some(Targeted {
        m0: (0..data.n).map(|i| expit(off0[i] + eps[0] * h0(i))).collect(),
        m1: (0..data.n).map(|i| expit(off1[i] + eps[1] * h1(i))).collect(),
        eps,
        mode,
    })
}

fn targeted_estimate(id: &str, data: &Dataset, nuisance: &NuisanceFit, mode: Fluctuation) -> Result<EstimateResult, EstimateError> {
    let fallback = match mode {
        Fluctuation::TwoEpsilon => Some(Fluctuation::SingleEpsilon),
        Fluctuation::SingleEpsilon => None,
    };
    let fit = fluctuate(data, nuisance, mode)
        .or_else(|| fallback.and_then(|f| fluctuate(data, nuisance, f)))
        .ok_or_else(|| EstimateError::Targeting("no root for the fluctuation score".into()))?;
    let n = data.n as f64;
    let point = (0..data.n).map(|i| fit.m1[i] - fit.m0[i]).sum::<f64>() / n;
    let eif = eif_values(data, &nuisance.g_hat, &fit.m0, &fit.m1, point);
    let residual = eif.iter().sum::<f64>() / n;
    if !(residual.abs() <= EIF_TOLERANCE) {
        return Err(EstimateError::Targeting(format!("mean influence function {residual:e} after targeting")));
    }
    let mut diag = BTreeMap::new();
    diag.insert("eif_mean".into(), residual);
    diag.insert("epsilon_control".into(), fit.eps[0]);
    diag.insert("epsilon_treated".into(), fit.eps[1]);
    diag.insert("single_epsilon".into(), f64::from(u8::from(fit.mode == Fluctuation::SingleEpsilon)));
    nuisance.diagnostics(&mut diag);
    Ok(EstimateResult::new(id, point, sample_sd(&eif) / n.sqrt(), diag))
}

/// TMLE with nuisances fitted on the full sample.
pub fn tmle_estimate(data: &Dataset, nuisance: &NuisanceFit, mode: Fluctuation) -> Result<EstimateResult, EstimateError> {
    targeted_estimate("tmle", data, nuisance, mode)
}

/// TMLE with out-of-fold nuisances and one pooled fluctuation.
pub fn cvtmle_estimate<R: Rng + ?Sized>(
    data: &Dataset,
    v_folds: usize,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<EstimateResult, EstimateError> {
    let nuisance = fit_crossfit_nuisance(data, v_folds, config, rng)?;
    targeted_estimate("cvtmle", data, &nuisance, config.fluctuation)
}
