//! Per-DGP Monte Carlo summaries, cross-DGP reliability curves and positivity strata.

use crate::estimators::EstimateResult;
use crate::mechanisms::DgpTruth;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpMetrics {
    pub dgp_id: String,
    pub estimator_id: String,
    pub n: usize,
    pub bias: f64,
    pub coverage: f64,
    pub mse: f64,
    pub n_reps: usize,
    pub n_failures: usize,
}

/// Bias, coverage and mean squared error over the successful replicates.
/// Returns `None` when no replicate succeeded.
pub fn dgp_metrics(
    dgp_id: &str,
    estimator_id: &str,
    n: usize,
    estimates: &[EstimateResult],
    n_failures: usize,
    truth: f64,
) -> Option<DgpMetrics> {
    if estimates.is_empty() {
        return None;
    }
    let s = estimates.len() as f64;
    let mut points: Vec<f64> = estimates.iter().map(|e| e.point).collect();
    // summation order fixed so the result is permutation invariant
    points.sort_by(f64::total_cmp);
    let bias = points.iter().sum::<f64>() / s - truth;
    let mse = points.iter().map(|p| (p - truth) * (p - truth)).sum::<f64>() / s;
    let coverage = estimates.iter().filter(|e| e.covers(truth)).count() as f64 / s;
    Some(DgpMetrics {
        dgp_id: dgp_id.to_string(),
        estimator_id: estimator_id.to_string(),
        n,
        bias,
        coverage,
        mse,
        n_reps: estimates.len(),
        n_failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    Bias,
    Mse,
}

impl CurveMetric {
    pub fn of(self, m: &DgpMetrics) -> f64 {
        match self {
            CurveMetric::Bias => m.bias.abs(),
            CurveMetric::Mse => m.mse.abs(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurveMetric::Bias => "bias",
            CurveMetric::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub estimator_id: String,
    pub n: usize,
    pub metric: CurveMetric,
    pub thresholds: Vec<f64>,
    pub exceedance: Vec<f64>,
}

/// Empirical survival function `P(|metric| > b)` across DGPs at each threshold.
pub fn reliability_curve(metrics: &[DgpMetrics], metric: CurveMetric, thresholds: &[f64]) -> ReliabilityCurve {
    let j = metrics.len() as f64;
    let values: Vec<f64> = metrics.iter().map(|m| metric.of(m)).collect();
    let exceedance = thresholds
        .iter()
        .map(|&b| if metrics.is_empty() { 0.0 } else { values.iter().filter(|&&v| v > b).count() as f64 / j })
        .collect();
    ReliabilityCurve {
        estimator_id: metrics.first().map(|m| m.estimator_id.clone()).unwrap_or_default(),
        n: metrics.first().map_or(0, |m| m.n),
        metric,
        thresholds: thresholds.to_vec(),
        exceedance,
    }
}

/// Linear-interpolation quantile at `p` of sorted data, interpolating between
/// order statistics at positions `p * (len - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `count` evenly spaced thresholds from 0 up to the 99th percentile of the observed values.
pub fn default_thresholds(values: &[f64], count: usize) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).filter(|x| x.is_finite()).collect();
    if v.is_empty() || count < 2 {
        return vec![0.0; count.min(1)];
    }
    v.sort_by(f64::total_cmp);
    let top = quantile_sorted(&v, 0.99);
    (0..count).map(|i| top * i as f64 / (count - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

pub fn coverage_summary(coverages: &[f64]) -> Option<CoverageSummary> {
    if coverages.is_empty() {
        return None;
    }
    let mut v = coverages.to_vec();
    v.sort_by(f64::total_cmp);
    Some(CoverageSummary { median: quantile_sorted(&v, 0.5), q25: quantile_sorted(&v, 0.25), q75: quantile_sorted(&v, 0.75) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivityLabel {
    Minimal,
    Moderate,
    Severe,
}

impl PositivityLabel {
    pub fn name(self) -> &'static str {
        match self {
            PositivityLabel::Minimal => "minimal",
            PositivityLabel::Moderate => "moderate",
            PositivityLabel::Severe => "severe",
        }
    }
}

/// Cut points on the positivity index separating the three strata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivityThresholds {
    pub moderate_above: f64,
    pub severe_above: f64,
}

impl Default for PositivityThresholds {
    fn default() -> Self {
        PositivityThresholds { moderate_above: 10.0, severe_above: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivityStratum {
    pub label: PositivityLabel,
    /// Half-open index interval `(lower, upper]`; the minimal stratum also contains its lower end.
    pub lower: f64,
    pub upper: f64,
}

pub fn positivity_stratum(truth: &DgpTruth, q: f64, cuts: &PositivityThresholds) -> PositivityStratum {
    stratum_of(truth.positivity_index, q, cuts)
}

pub fn stratum_of(index: f64, q: f64, cuts: &PositivityThresholds) -> PositivityStratum {
    if index <= cuts.moderate_above {
        PositivityStratum { label: PositivityLabel::Minimal, lower: 1.0, upper: cuts.moderate_above }
    } else if index <= cuts.severe_above {
        PositivityStratum { label: PositivityLabel::Moderate, lower: cuts.moderate_above, upper: cuts.severe_above }
    } else {
        PositivityStratum { label: PositivityLabel::Severe, lower: cuts.severe_above, upper: q.max(cuts.severe_above) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn est(point: f64, half: f64) -> EstimateResult {
        EstimateResult::new("e", point, half / crate::estimators::Z_975, BTreeMap::new())
    }

    fn metric(bias: f64) -> DgpMetrics {
        DgpMetrics { dgp_id: "d".into(), estimator_id: "e".into(), n: 10, bias, coverage: 1.0, mse: bias * bias, n_reps: 1, n_failures: 0 }
    }

    #[test]
    fn exact_estimates() {
        let m = dgp_metrics("d", "e", 10, &[est(0.3, 0.1), est(0.3, 0.2)], 0, 0.3).unwrap();
        assert_eq!((m.bias, m.coverage, m.mse), (0.0, 1.0, 0.0));
    }

    #[test]
    fn symmetric_misses() {
        let m = dgp_metrics("d", "e", 10, &[est(0.4, 0.05), est(0.2, 0.05)], 1, 0.3).unwrap();
        assert!(m.bias.abs() < 1e-15);
        assert_eq!(m.coverage, 0.0);
        assert!((m.mse - 0.01).abs() < 1e-15);
        assert_eq!(m.n_failures, 1);
        assert!(dgp_metrics("d", "e", 10, &[], 3, 0.3).is_none());
    }

    #[test]
    fn exceedance_hand_count() {
        let curve = reliability_curve(&[metric(0.05), metric(-0.2), metric(0.0)], CurveMetric::Bias, &[0.0, 0.1, 0.5]);
        assert_eq!(curve.exceedance, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn coverage_quantiles() {
        let s = coverage_summary(&[1.0, 0.9, 0.95]).unwrap();
        assert!((s.median - 0.95).abs() < 1e-15);
        assert!((s.q25 - 0.925).abs() < 1e-15);
        assert!((s.q75 - 0.975).abs() < 1e-15);
        let flat = coverage_summary(&[0.8; 4]).unwrap();
        assert_eq!((flat.median, flat.q25, flat.q75), (0.8, 0.8, 0.8));
    }

    #[test]
    fn strata() {
        let cuts = PositivityThresholds::default();
        assert_eq!(stratum_of(1.0, 1000.0, &cuts).label, PositivityLabel::Minimal);
        assert_eq!(stratum_of(10.0, 1000.0, &cuts).label, PositivityLabel::Minimal);
        assert_eq!(stratum_of(50.0, 1000.0, &cuts).label, PositivityLabel::Moderate);
        assert_eq!(stratum_of(999.0, 1000.0, &cuts).label, PositivityLabel::Severe);
    }

    #[test]
    fn thresholds_span_the_99th_percentile() {
        let values: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let t = default_thresholds(&values, 200);
        assert_eq!(t.len(), 200);
        assert_eq!(t[0], 0.0);
        assert!((t[199] - 99.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mse_decomposes(points in prop::collection::vec(-1.0f64..1.0, 1..40), truth in -0.5f64..0.5) {
            let ests: Vec<EstimateResult> = points.iter().map(|&p| est(p, 0.1)).collect();
            let m = dgp_metrics("d", "e", 10, &ests, 0, truth).unwrap();
            let s = points.len() as f64;
            let mean = points.iter().sum::<f64>() / s;
            let var = points.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / s;
            prop_assert!((m.mse - (m.bias * m.bias + var)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.coverage));
            let mut rev = ests.clone();
            rev.reverse();
            prop_assert_eq!(dgp_metrics("d", "e", 10, &rev, 0, truth).unwrap(), m);
        }

        #[test]
        fn exceedance_is_a_survival_function(biases in prop::collection::vec(-1.0f64..1.0, 1..30)) {
            let metrics: Vec<DgpMetrics> = biases.iter().map(|&b| metric(b)).collect();
            let th: Vec<f64> = (0..50).map(|i| i as f64 / 40.0).collect();
            let c = reliability_curve(&metrics, CurveMetric::Bias, &th);
            let j = metrics.len() as f64;
            for w in c.exceedance.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            for &e in &c.exceedance {
                prop_assert!((0.0..=1.0).contains(&e));
                prop_assert!(((e * j).round() - e * j).abs() < 1e-9);
            }
            let nonzero = biases.iter().filter(|b| **b != 0.0).count() as f64 / j;
            prop_assert_eq!(c.exceedance[0], nonzero);
        }
    }
}
