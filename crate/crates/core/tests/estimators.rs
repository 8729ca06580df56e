use ate_universe::datagen::{sample_dataset, Dataset};
use ate_universe::estimators::{aipw_estimate, compute_eif, tmle_estimate, EstimationContext, EstimatorConfig, Fluctuation, NuisanceFit};
use ate_universe::mechanisms::{asymptotic_bias_dr, asymptotic_bias_gcomp, Dgp};
use ate_universe::universe::PriorConfig;
use proptest::prelude::*;

fn one_binary(t: &[u8], y: &[u8], x: &[u8]) -> Dataset {
    Dataset::from_columns(1, 0, 0, x.iter().map(|&v| u32::from(v)).collect(), vec![], t.to_vec(), y.to_vec())
}

fn fixed_nuisance(g: Vec<f64>, m0: Vec<f64>, m1: Vec<f64>) -> NuisanceFit {
    NuisanceFit { g_hat: g, m_hat: [m0, m1], fold_assignment: None, g_weights: vec![], m_weights: vec![] }
}

fn prior(hte: bool) -> PriorConfig {
    PriorConfig { u: 1, h: 0, c: 1, k: 1, hte, q: 1000.0, b: 0.0, eta: 1.0, rho: 1.0, tol: 0.01 }
}

fn rows() -> impl Strategy<Value = Vec<(u8, u8, u8, f64, f64, f64)>> {
    prop::collection::vec((0u8..2, 0u8..2, 0u8..2, 0.05f64..0.95, 0.02f64..0.98, 0.02f64..0.98), 8..80)
        .prop_filter("both arms present", |r| r.iter().any(|x| x.0 == 1) && r.iter().any(|x| x.0 == 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn targeting_solves_the_influence_equation(rows in rows(), single in any::<bool>()) {
        let t: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let x: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let data = one_binary(&t, &y, &x);
        let nuis = fixed_nuisance(rows.iter().map(|r| r.3).collect(), rows.iter().map(|r| r.4).collect(), rows.iter().map(|r| r.5).collect());
        let mode = if single { Fluctuation::SingleEpsilon } else { Fluctuation::TwoEpsilon };
        let fit = tmle_estimate(&data, &nuis, mode).unwrap();
        prop_assert!(fit.diagnostics["eif_mean"].abs() <= 1e-6);
        prop_assert!(fit.point.abs() <= 1.0 && fit.se >= 0.0);
    }

    #[test]
    fn aipw_is_the_plug_in_plus_the_mean_influence(rows in rows()) {
        let t: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let x: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let data = one_binary(&t, &y, &x);
        let nuis = fixed_nuisance(rows.iter().map(|r| r.3).collect(), rows.iter().map(|r| r.4).collect(), rows.iter().map(|r| r.5).collect());
        let n = rows.len() as f64;
        let plug: f64 = rows.iter().map(|r| r.5 - r.4).sum::<f64>() / n;
        let eif: f64 = rows.iter().map(|r| compute_eif(r.0, r.1, r.3, r.4, r.5, plug)).sum::<f64>() / n;
        let fit = aipw_estimate(&data, &nuis).unwrap();
        prop_assert!((fit.point - (plug + eif)).abs() <= 1e-12);
    }

    #[test]
    fn doubly_robust_bias_is_a_product_of_errors(
        p in 0.1f64..0.9,
        g in prop::array::uniform2(0.05f64..0.95),
        g_bar in prop::array::uniform2(0.05f64..0.95),
        m in prop::array::uniform4(0.0f64..1.0),
        m_bar in prop::array::uniform4(0.0f64..1.0),
    ) {
        let dgp = Dgp::from_tables(prior(true), vec![p, 1.0 - p], g.to_vec(), [vec![m[0], m[1]], vec![m[2], m[3]]]);
        let mb = [vec![m_bar[0], m_bar[1]], vec![m_bar[2], m_bar[3]]];
        prop_assert_eq!(asymptotic_bias_dr(&dgp, &dgp.treatment.g_table, &mb), 0.0);
        prop_assert_eq!(asymptotic_bias_dr(&dgp, &g_bar, &dgp.outcome.m_table), 0.0);
        let scaled: Vec<f64> = dgp.outcome.m_table.iter().flat_map(|t| t.iter().map(|v| v * 0.5)).collect();
        let half = [scaled[..2].to_vec(), scaled[2..].to_vec()];
        let homogeneous = asymptotic_bias_dr(&dgp, &g_bar, &half);
        let zero = [vec![0.0, 0.0], vec![0.0, 0.0]];
        let doubled = asymptotic_bias_dr(&dgp, &g_bar, &zero);
        prop_assert!((doubled - 2.0 * homogeneous).abs() <= 1e-12);
    }
}

#[test]
fn gcomp_limit_vanishes_for_a_logit_additive_outcome() {
    let expit = |v: f64| 1.0 / (1.0 + (-v).exp());
    let m0 = vec![expit(-0.4), expit(-0.4 + 1.1)];
    let m1 = vec![expit(-0.4 + 0.7), expit(-0.4 + 1.1 + 0.7)];
    let dgp = Dgp::from_tables(prior(false), vec![0.35, 0.65], vec![0.3, 0.8], [m0, m1]);
    assert!(asymptotic_bias_gcomp(&dgp).unwrap().abs() < 1e-9);
}

#[test]
fn gcomp_limit_is_nonzero_under_interaction() {
    let dgp = Dgp::from_tables(prior(true), vec![0.3, 0.7], vec![0.2, 0.6], [vec![0.2, 0.3], vec![0.9, 0.35]]);
    let bias = asymptotic_bias_gcomp(&dgp).unwrap();
    assert!(bias.abs() > 1e-3, "{bias}");
}

#[test]
fn estimates_reproduce_from_the_seed() {
    let dgp = Dgp::from_tables(prior(true), vec![0.4, 0.6], vec![0.3, 0.7], [vec![0.2, 0.5], vec![0.6, 0.7]]);
    let data = sample_dataset(&dgp, 500, 12);
    let config = EstimatorConfig::default();
    for id in ["aipw", "tmle", "cvtmle"] {
        let a = EstimationContext::new(&data, &config, 99).estimate(id).unwrap();
        let b = EstimationContext::new(&data, &config, 99).estimate(id).unwrap();
        assert_eq!(a, b, "{id}");
    }
}
