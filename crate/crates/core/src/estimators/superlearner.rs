//! Cross-validated convex stacking over a small library of binary classifiers.

use super::features::{distinct_cells, expand, main_effects_row, pairwise_row, query_matrix, PatternSet, Target};
use super::gbdt::{fit_gbdt, GbdtModel, GbdtParams};
use super::glm::{fit_logistic_irls, FitError, LogisticFit};
use super::linalg::Matrix;
use crate::datagen::Dataset;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Learner {
    MainLogistic,
    PairwiseLogistic,
    Boosting(GbdtParams),
}

impl Learner {
    pub fn name(&self) -> &'static str {
        match self {
            Learner::MainLogistic => "main_logistic",
            Learner::PairwiseLogistic => "pairwise_logistic",
            Learner::Boosting(_) => "gbdt",
        }
    }

    pub fn fit(&self, train: &PatternSet, seed: u64) -> Result<FittedLearner, FitError> {
        let response = train.mean_response();
        match self {
            Learner::MainLogistic => {
                let design = expand(&train.features, |r, out| main_effects_row(r, None, out));
                Ok(FittedLearner::Logistic { fit: fit_logistic_irls(&design, &response, &train.count)?, pairwise: false })
            }
            Learner::PairwiseLogistic => {
                let design = expand(&train.features, pairwise_row);
                Ok(FittedLearner::Logistic { fit: fit_logistic_irls(&design, &response, &train.count)?, pairwise: true })
            }
            Learner::Boosting(params) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(FittedLearner::Boosting(fit_gbdt(train, params, &mut rng)))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum FittedLearner {
    Logistic { fit: LogisticFit, pairwise: bool },
    Boosting(GbdtModel),
}

impl FittedLearner {
    pub fn predict(&self, raw: &Matrix) -> Vec<f64> {
        match self {
            FittedLearner::Logistic { fit, pairwise } => {
                let design =
                    if *pairwise { expand(raw, pairwise_row) } else { expand(raw, |r, out| main_effects_row(r, None, out)) };
                fit.predict(&design)
            }
            FittedLearner::Boosting(m) => m.predict(raw),
        }
    }

    pub fn ridged(&self) -> bool {
        matches!(self, FittedLearner::Logistic { fit, .. } if fit.ridged())
    }
}

pub fn default_library() -> Vec<Learner> {
    vec![Learner::MainLogistic, Learner::PairwiseLogistic, Learner::Boosting(GbdtParams::default())]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperLearnerConfig {
    pub library: Vec<Learner>,
    pub meta_iterations: usize,
}

impl Default for SuperLearnerConfig {
    fn default() -> Self {
        SuperLearnerConfig { library: default_library(), meta_iterations: 2000 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuperLearnerError {
    #[error("need at least two folds, got {0}")]
    TooFewFolds(usize),
    #[error("no training rows")]
    Empty,
    #[error("every library member failed: {0}")]
    AllFailed(String),
}

/// Folds ten at 500 rows or more, five below.
pub fn default_folds(n: usize) -> usize {
    if n >= 500 {
        10
    } else {
        5
    }
}

/// Assigns `rows` to `v` folds, shuffling each treatment arm separately and
/// dealing it round robin so every fold gets a near-equal share of both arms.
/// Returns a fold id parallel to `rows`.
pub fn stratified_folds<R: Rng + ?Sized>(data: &Dataset, rows: &[usize], v: usize, rng: &mut R) -> Vec<usize> {
    let mut fold = vec![0; rows.len()];
    let mut offset = 0;
    for arm in [0u8, 1] {
        let mut members: Vec<usize> = (0..rows.len()).filter(|&k| data.t[rows[k]] == arm).collect();
        members.shuffle(rng);
        for (j, &k) in members.iter().enumerate() {
            fold[k] = (offset + j) % v;
        }
        offset += members.len();
    }
    fold
}

/// A fitted ensemble: surviving learners refitted on all training rows with their meta-weights.
#[derive(Debug, Clone)]
pub struct SuperLearnerFit {
    pub target: Target,
    pub names: Vec<&'static str>,
    /// One weight per library member; dropped members get zero.
    pub weights: Vec<f64>,
    /// Cross-validated mean log-loss per member, `NaN` for dropped members.
    pub cv_loss: Vec<f64>,
    pub ensemble_cv_loss: f64,
    pub dropped: Vec<&'static str>,
    pub ridged: Vec<&'static str>,
    models: Vec<Option<FittedLearner>>,
}

impl SuperLearnerFit {
    pub fn predict(&self, raw: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; raw.rows()];
        for (w, m) in self.weights.iter().zip(&self.models) {
            if let (true, Some(m)) = (*w > 0.0, m) {
                for (o, p) in out.iter_mut().zip(m.predict(raw)) {
                    *o += w * p;
                }
            }
        }
        out
    }

    pub fn weight_of(&self, name: &str) -> f64 {
        self.names.iter().zip(&self.weights).find(|(n, _)| **n == name).map_or(0.0, |(_, w)| *w)
    }

    /// Predictions for every row of `data`, with treatment set to `t` for
    /// outcome ensembles (ignored for treatment ensembles).
    pub fn predict_rows(&self, data: &Dataset, rows: &[usize], t: f64) -> Vec<f64> {
        let reps = distinct_cells(data, rows);
        let preds = self.predict(&query_matrix(data, &reps, self.target, t));
        let lookup: std::collections::HashMap<usize, f64> = reps.iter().map(|r| r.0).zip(preds).collect();
        rows.iter().map(|&i| lookup[&(data.cell[i] as usize)]).collect()
    }
}

const LOSS_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP)
}

/// Out-of-fold predictions gathered per validation pattern.
struct Validation {
    count: Vec<f64>,
    positives: Vec<f64>,
    /// `preds[k][e]` for learner `k` and entry `e`.
    preds: Vec<Vec<f64>>,
}

impl Validation {
    fn loss_of(&self, p: impl Fn(usize) -> f64) -> f64 {
        let mut total = 0.0;
        let mut n = 0.0;
        for e in 0..self.count.len() {
            let q = clamp_prob(p(e));
            total -= self.positives[e] * q.ln() + (self.count[e] - self.positives[e]) * (1.0 - q).ln();
            n += self.count[e];
        }
        total / n
    }

    fn blend(&self, alpha: &[f64], e: usize) -> f64 {
        alpha.iter().zip(&self.preds).map(|(a, p)| a * p[e]).sum()
    }
}

/// Exponentiated-gradient descent on the cross-validated log-loss over the
/// simplex, keeping the best iterate.
fn meta_weights(val: &Validation, iterations: usize) -> (Vec<f64>, f64) {
    let k = val.preds.len();
    let mut alpha = vec![1.0 / k as f64; k];
    let mut best = (alpha.clone(), val.loss_of(|e| val.blend(&alpha, e)));
    let n: f64 = val.count.iter().sum();
    let mut step = 1.0;
    for _ in 0..iterations {
        let mut grad = vec![0.0; k];
        for e in 0..val.count.len() {
            let q = clamp_prob(val.blend(&alpha, e));
            let d = -(val.positives[e] / q - (val.count[e] - val.positives[e]) / (1.0 - q)) / n;
            for j in 0..k {
                grad[j] += d * val.preds[j][e];
            }
        }
        // only differences between components move the iterate
        let lo = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lo;
        if !(scale > 0.0) {
            break;
        }
        let mut next: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a * (-step * g / scale).exp()).collect();
        let z: f64 = next.iter().sum();
        next.iter_mut().for_each(|a| *a /= z);
        let loss = val.loss_of(|e| val.blend(&next, e));
        if loss < best.1 {
            best = (next.clone(), loss);
            alpha = next;
        } else {
            step *= 0.5;
            if step < 1e-10 {
                break;
            }
        }
    }
    best
}

/// V-fold cross-validated stacking of `config.library` on the listed rows.
pub fn superlearner_fit<R: Rng + ?Sized>(
    data: &Dataset,
    rows: &[usize],
    target: Target,
    folds: usize,
    config: &SuperLearnerConfig,
    rng: &mut R,
) -> Result<SuperLearnerFit, SuperLearnerError> {
    if folds < 2 {
        return Err(SuperLearnerError::TooFewFolds(folds));
    }
    if rows.is_empty() {
        return Err(SuperLearnerError::Empty);
    }
    let lib = &config.library;
    let fold = stratified_folds(data, rows, folds, rng);
    // seeds drawn in a fixed order so results do not depend on fitting order
    let cv_seeds: Vec<Vec<u64>> = (0..folds).map(|_| lib.iter().map(|_| rng.random()).collect()).collect();
    let full_seeds: Vec<u64> = lib.iter().map(|_| rng.random()).collect();

    let mut failed = vec![false; lib.len()];
    let mut val = Validation { count: Vec::new(), positives: Vec::new(), preds: vec![Vec::new(); lib.len()] };
    for v in 0..folds {
        let train: Vec<usize> = rows.iter().zip(&fold).filter(|(_, f)| **f != v).map(|(r, _)| *r).collect();
        let held: Vec<usize> = rows.iter().zip(&fold).filter(|(_, f)| **f == v).map(|(r, _)| *r).collect();
        if held.is_empty() || train.is_empty() {
            continue;
        }
        let train_set = PatternSet::from_rows(data, &train, target);
        let held_set = PatternSet::from_rows(data, &held, target);
        val.count.extend_from_slice(&held_set.count);
        val.positives.extend_from_slice(&held_set.positives);
        for (k, learner) in lib.iter().enumerate() {
            let preds = match learner.fit(&train_set, cv_seeds[v][k]) {
                Ok(m) if !failed[k] => m.predict(&held_set.features),
                Ok(_) => vec![f64::NAN; held_set.len()],
                Err(err) => {
                    log::debug!("{} failed in fold {v}: {err}", learner.name());
                    failed[k] = true;
                    vec![f64::NAN; held_set.len()]
                }
            };
            val.preds[k].extend(preds);
        }
    }

    let full = PatternSet::from_rows(data, rows, target);
    let mut models: Vec<Option<FittedLearner>> = vec![None; lib.len()];
    for (k, learner) in lib.iter().enumerate() {
        if failed[k] {
            continue;
        }
        match learner.fit(&full, full_seeds[k]) {
            Ok(m) => models[k] = Some(m),
            Err(err) => {
                log::debug!("{} failed on the full data: {err}", learner.name());
                failed[k] = true;
            }
        }
    }
    let alive: Vec<usize> = (0..lib.len()).filter(|&k| !failed[k]).collect();
    if alive.is_empty() {
        return Err(SuperLearnerError::AllFailed(lib.iter().map(|l| l.name()).collect::<Vec<_>>().join(",")));
    }
    let sub = Validation {
        count: val.count.clone(),
        positives: val.positives.clone(),
        preds: alive.iter().map(|&k| val.preds[k].clone()).collect(),
    };
    let mut cv_loss = vec![f64::NAN; lib.len()];
    for (j, &k) in alive.iter().enumerate() {
        cv_loss[k] = sub.loss_of(|e| sub.preds[j][e]);
    }
    let (mut alpha, mut ensemble_loss) = meta_weights(&sub, config.meta_iterations);
    // a single member can beat an interior iterate that stopped early
    for (j, &k) in alive.iter().enumerate() {
        if cv_loss[k] < ensemble_loss {
            ensemble_loss = cv_loss[k];
            alpha = vec![0.0; alive.len()];
            alpha[j] = 1.0;
        }
    }
    let mut weights = vec![0.0; lib.len()];
    for (j, &k) in alive.iter().enumerate() {
        weights[k] = alpha[j];
    }
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    Ok(SuperLearnerFit {
        target,
        names: lib.iter().map(|l| l.name()).collect(),
        weights,
        cv_loss,
        ensemble_cv_loss: ensemble_loss,
        dropped: (0..lib.len()).filter(|&k| failed[k]).map(|k| lib[k].name()).collect(),
        ridged: models.iter().zip(lib).filter(|(m, _)| m.as_ref().is_some_and(|m| m.ridged())).map(|(_, l)| l.name()).collect(),
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::linalg::expit;

    /// Main-effects logistic outcome on two binary and one ordinal covariate.
    fn logistic_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut cell, mut xn, mut t, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let bin: u32 = rng.random_range(0..4);
            let k: u32 = rng.random_range(0..5);
            let z = k as f64 / 4.0;
            let x1 = (bin & 1) as f64;
            let x2 = (bin >> 1) as f64;
            let ti = u8::from(rng.random::<f64>() < expit(-0.3 + 0.8 * x1 - 0.5 * z));
            let yi = u8::from(rng.random::<f64>() < expit(-0.5 + 1.0 * ti as f64 + 0.7 * x1 - 0.9 * x2 + 1.2 * z));
            cell.push(bin + 4 * k);
            xn.push(z);
            t.push(ti);
            y.push(yi);
        }
        Dataset::from_columns(2, 1, seed, cell, xn, t, y)
    }

    #[test]
    fn folds_are_balanced_by_arm() {
        let data = logistic_data(997, 1);
        let rows: Vec<usize> = (0..data.n).collect();
        let fold = stratified_folds(&data, &rows, 10, &mut ChaCha8Rng::seed_from_u64(0));
        for arm in [0u8, 1] {
            let mut sizes = [0usize; 10];
            for (k, &f) in fold.iter().enumerate() {
                if data.t[k] == arm {
                    sizes[f] += 1;
                }
            }
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn weights_live_on_the_simplex_and_beat_every_member() {
        for seed in 0..4 {
            let data = logistic_data(600, seed);
            let rows: Vec<usize> = (0..data.n).collect();
            for target in [Target::Outcome, Target::Treatment] {
                let fit = superlearner_fit(&data, &rows, target, 5, &SuperLearnerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap();
                assert!(fit.weights.iter().all(|&w| w >= 0.0));
                assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                let best = fit.cv_loss.iter().copied().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
                assert!(fit.ensemble_cv_loss <= best + 1e-8);
            }
        }
    }

    #[test]
    fn deterministic_given_rng() {
        let data = logistic_data(300, 9);
        let rows: Vec<usize> = (0..data.n).collect();
        let run = || {
            let fit = superlearner_fit(&data, &rows, Target::Outcome, 5, &SuperLearnerConfig::default(), &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
            (fit.weights.clone(), fit.predict_rows(&data, &rows, 1.0))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tiny_samples_still_give_simplex_weights() {
        let data = Dataset::from_columns(1, 0, 0, vec![0, 1, 0, 1, 0, 1], vec![], vec![0, 1, 0, 1, 1, 0], vec![0, 1, 1, 1, 0, 0]);
        let rows: Vec<usize> = (0..data.n).collect();
        let fit = superlearner_fit(&data, &rows, Target::Treatment, 2, &SuperLearnerConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            superlearner_fit(&data, &rows, Target::Treatment, 1, &SuperLearnerConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)),
            Err(SuperLearnerError::TooFewFolds(1))
        ));
    }

    #[test]
    fn picks_the_correct_parametric_model() {
        // the main-effects member should carry at least half the weight in >= 80% of replicates
        let mut hits = 0;
        let reps = 50;
        for seed in 0..reps {
            let data = logistic_data(5000, 100 + seed);
            let rows: Vec<usize> = (0..data.n).collect();
            let fit =
                superlearner_fit(&data, &rows, Target::Outcome, 10, &SuperLearnerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap();
            if fit.weight_of("main_logistic") >= 0.5 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.8 * reps as f64, "{hits}/{reps}");
    }
}
