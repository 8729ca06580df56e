//! Learners and average-treatment-effect estimators.

pub mod cbps;
pub mod features;
pub mod gbdt;
pub mod gcomp;
pub mod glm;
pub mod linalg;
pub mod superlearner;
pub mod targeted;

use crate::datagen::Dataset;
use crate::seed::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::OnceLock;
use thiserror::Error;

pub use cbps::{fit_cbps, iptw_estimate};
pub use gcomp::gcomp_estimate;
pub use superlearner::{superlearner_fit, SuperLearnerConfig};
pub use targeted::{aipw_estimate, compute_eif, cvtmle_estimate, fit_nuisance, tmle_estimate, Fluctuation, NuisanceFit};

/// Two-sided 95% standard normal quantile.
pub const Z_975: f64 = 1.959964;

/// Registry ids in their canonical order.
pub const ESTIMATOR_IDS: [&str; 5] = ["gcomp", "iptw_cbps", "aipw", "tmle", "cvtmle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimator_id: String,
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateResult {
    pub fn new(id: &str, point: f64, se: f64, diagnostics: BTreeMap<String, f64>) -> Self {
        EstimateResult {
            estimator_id: id.to_string(),
            point,
            se,
            ci_low: point - Z_975 * se,
            ci_high: point + Z_975 * se,
            diagnostics,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("a treatment arm is empty")]
    MissingArm,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Fit(#[from] glm::FitError),
    #[error(transparent)]
    Learner(#[from] superlearner::SuperLearnerError),
    #[error("targeting failed: {0}")]
    Targeting(String),
    #[error("unknown estimator id {0:?}")]
    UnknownEstimator(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Propensities are clamped to `[g_truncation, 1 - g_truncation]`.
    pub g_truncation: f64,
    /// Outcome predictions are clamped to `[m_truncation, 1 - m_truncation]`.
    pub m_truncation: f64,
    pub fluctuation: Fluctuation,
    pub superlearner: SuperLearnerConfig,
    /// Cross-fitting folds; `None` picks ten at 500 rows or more and five below.
    pub cv_folds: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            g_truncation: 0.001,
            m_truncation: 1e-6,
            fluctuation: Fluctuation::TwoEpsilon,
            superlearner: SuperLearnerConfig::default(),
            cv_folds: None,
        }
    }
}

pub fn is_known_estimator(id: &str) -> bool {
    ESTIMATOR_IDS.contains(&id)
}

/// Runs registry estimators on one dataset. The full-sample nuisance fit is
/// shared by `aipw` and `tmle` and every random stream is derived from `seed`,
/// so results do not depend on which estimators run or in what order.
pub struct EstimationContext<'a> {
    data: &'a Dataset,
    config: &'a EstimatorConfig,
    seed: u64,
    nuisance: OnceLock<Result<NuisanceFit, EstimateError>>,
}

impl<'a> EstimationContext<'a> {
    pub fn new(data: &'a Dataset, config: &'a EstimatorConfig, seed: u64) -> Self {
        EstimationContext { data, config, seed, nuisance: OnceLock::new() }
    }

    fn rng(&self, stage: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "estimators", 0, 0, stage))
    }

    pub fn nuisance(&self) -> Result<&NuisanceFit, EstimateError> {
        self.nuisance
            .get_or_init(|| fit_nuisance(self.data, self.config, &mut self.rng("nuisance")))
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn estimate(&self, id: &str) -> Result<EstimateResult, EstimateError> {
        match id {
            "gcomp" => gcomp_estimate(self.data),
            "iptw_cbps" => iptw_estimate(self.data, self.config.g_truncation),
            "aipw" => aipw_estimate(self.data, self.nuisance()?),
            "tmle" => tmle_estimate(self.data, self.nuisance()?, self.config.fluctuation),
            "cvtmle" => {
                let v = self.config.cv_folds.unwrap_or_else(|| superlearner::default_folds(self.data.n));
                cvtmle_estimate(self.data, v, self.config, &mut self.rng("cvtmle"))
            }
            other => Err(EstimateError::UnknownEstimator(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_dataset;
    use crate::mechanisms::tests::two_cell_dgp;

    #[test]
    fn interval_is_symmetric() {
        let r = EstimateResult::new("x", 0.3, 0.05, BTreeMap::new());
        assert!((r.ci_high - r.ci_low - 2.0 * Z_975 * 0.05).abs() < 1e-15);
        assert!(r.ci_low <= r.point && r.point <= r.ci_high);
        assert!(r.covers(0.3));
    }

    #[test]
    fn registry_runs_every_estimator() {
        let dgp = two_cell_dgp(&[0.5, 0.5], &[0.4, 0.6], [[0.3, 0.5], [0.6, 0.7]]);
        let data = sample_dataset(&dgp, 400, 3);
        let config = EstimatorConfig::default();
        let ctx = EstimationContext::new(&data, &config, 11);
        for id in ESTIMATOR_IDS {
            let r = ctx.estimate(id).unwrap();
            assert_eq!(r.estimator_id, id);
            assert!(r.se > 0.0 && r.point.is_finite());
        }
        assert!(matches!(ctx.estimate("bart"), Err(EstimateError::UnknownEstimator(_))));
    }

    #[test]
    fn order_of_calls_does_not_matter() {
        let dgp = two_cell_dgp(&[0.3, 0.7], &[0.2, 0.7], [[0.1, 0.4], [0.5, 0.8]]);
        let data = sample_dataset(&dgp, 300, 8);
        let config = EstimatorConfig::default();
        let a = EstimationContext::new(&data, &config, 5);
        let tmle_first = a.estimate("tmle").unwrap();
        let b = EstimationContext::new(&data, &config, 5);
        b.estimate("cvtmle").unwrap();
        b.estimate("aipw").unwrap();
        assert_eq!(b.estimate("tmle").unwrap(), tmle_first);
    }
}
