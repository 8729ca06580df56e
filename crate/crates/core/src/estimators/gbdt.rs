//! Gradient-boosted depth-limited regression trees on the logistic loss, fitted
//! on collapsed covariate patterns with Newton leaf values and holdout early stopping.

use super::features::PatternSet;
use super::linalg::{expit, logit, Matrix};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Fraction of training rows held out for early stopping.
    pub holdout: f64,
    /// Rounds without holdout improvement before stopping.
    pub patience: usize,
    /// L2 penalty on leaf values.
    pub l2: f64,
    pub min_leaf_rows: f64,
    pub max_bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams { n_trees: 200, learning_rate: 0.1, max_depth: 2, holdout: 0.2, patience: 20, l2: 1.0, min_leaf_rows: 5.0, max_bins: 64 }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Split { feature: usize, cut: f64, left: usize, right: usize },
    Leaf(f64),
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split { feature, cut, left, right } => i = if x[feature] <= cut { left } else { right },
                Node::Leaf(v) => return v,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GbdtModel {
    base: f64,
    trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict_logit(&self, x: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, raw: &Matrix) -> Vec<f64> {
        (0..raw.rows()).map(|i| expit(self.predict_logit(raw.row(i)))).collect()
    }
}

/// Candidate thresholds per feature: midpoints between distinct observed values,
/// thinned to at most `max_bins - 1` by quantile.
fn feature_cuts(x: &Matrix, max_bins: usize) -> Vec<Vec<f64>> {
    (0..x.cols())
        .map(|f| {
            let mut vals: Vec<f64> = (0..x.rows()).map(|i| x.get(i, f)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let mids: Vec<f64> = vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            if mids.len() < max_bins {
                mids
            } else {
                let keep = max_bins - 1;
                (0..keep).map(|k| mids[(k * mids.len()) / keep]).collect()
            }
        })
        .collect()
}

/// Per-pattern training data split into fitting and holdout parts.
struct Split {
    count: Vec<f64>,
    positives: Vec<f64>,
    hold_count: Vec<f64>,
    hold_positives: Vec<f64>,
}

fn holdout_split<R: Rng + ?Sized>(train: &PatternSet, fraction: f64, rng: &mut R) -> Split {
    let n = train.len();
    let mut s = Split { count: vec![0.0; n], positives: vec![0.0; n], hold_count: vec![0.0; n], hold_positives: vec![0.0; n] };
    for p in 0..n {
        let rows = train.count[p].round() as usize;
        let pos = train.positives[p].round() as usize;
        for r in 0..rows {
            let held = rng.random::<f64>() < fraction;
            let y = if r < pos { 1.0 } else { 0.0 };
            if held {
                s.hold_count[p] += 1.0;
                s.hold_positives[p] += y;
            } else {
                s.count[p] += 1.0;
                s.positives[p] += y;
            }
        }
    }
    s
}

fn log_loss(count: &[f64], positives: &[f64], f: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0.0;
    for p in 0..count.len() {
        if count[p] == 0.0 {
            continue;
        }
        // n log(1 + e^f) - s f
        let softplus = if f[p] > 0.0 { f[p] + (-f[p]).exp().ln_1p() } else { f[p].exp().ln_1p() };
        total += count[p] * softplus - positives[p] * f[p];
        rows += count[p];
    }
    total / rows
}

struct Grower<'a> {
    bins: &'a [Vec<u16>],
    cuts: &'a [Vec<f64>],
    params: &'a GbdtParams,
}

impl Grower<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -self.params.learning_rate * g / (h + self.params.l2)
    }

    fn grow(&self, members: &[usize], grad: &[f64], hess: &[f64], count: &[f64], depth: usize, nodes: &mut Vec<Node>) -> usize {
        let (g, h): (f64, f64) = members.iter().fold((0.0, 0.0), |(a, b), &p| (a + grad[p], b + hess[p]));
        let me = nodes.len();
        nodes.push(Node::Leaf(self.leaf_value(g, h)));
        if depth == self.params.max_depth {
            return me;
        }
        let l2 = self.params.l2;
        let parent = g * g / (h + l2);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, cuts) in self.cuts.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let nb = cuts.len() + 1;
            let mut hg = vec![0.0; nb];
            let mut hh = vec![0.0; nb];
            let mut hc = vec![0.0; nb];
            for &p in members {
                let b = self.bins[f][p] as usize;
                hg[b] += grad[p];
                hh[b] += hess[p];
                hc[b] += count[p];
            }
            let total_c: f64 = hc.iter().sum();
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0.0);
            for b in 0..cuts.len() {
                gl += hg[b];
                hl += hh[b];
                cl += hc[b];
                let cr = total_c - cl;
                if cl < self.params.min_leaf_rows || cr < self.params.min_leaf_rows {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                let gain = gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, feature, b)) = best else {
            return me;
        };
        let (left_m, right_m): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&p| self.bins[feature][p] as usize <= b);
        let left = self.grow(&left_m, grad, hess, count, depth + 1, nodes);
        let right = self.grow(&right_m, grad, hess, count, depth + 1, nodes);
        nodes[me] = Node::Split { feature, cut: self.cuts[feature][b], left, right };
        me
    }
}

pub fn fit_gbdt<R: Rng + ?Sized>(train: &PatternSet, params: &GbdtParams, rng: &mut R) -> GbdtModel {
    let x = &train.features;
    let n = train.len();
    let split = holdout_split(train, params.holdout, rng);
    let has_holdout = split.hold_count.iter().sum::<f64>() > 0.0 && split.count.iter().sum::<f64>() > 0.0;
    let (count, positives) = if has_holdout { (&split.count, &split.positives) } else { (&train.count, &train.positives) };
    let rows: f64 = count.iter().sum();
    let mean = (positives.iter().sum::<f64>() / rows).clamp(1e-6, 1.0 - 1e-6);
    let base = logit(mean);

    let cuts = feature_cuts(x, params.max_bins);
    let bins: Vec<Vec<u16>> = cuts
        .iter()
        .enumerate()
        .map(|(f, c)| (0..n).map(|p| c.partition_point(|&cut| cut < x.get(p, f)) as u16).collect())
        .collect();
    let grower = Grower { bins: &bins, cuts: &cuts, params };
    let members: Vec<usize> = (0..n).filter(|&p| count[p] > 0.0).collect();

    let mut f_train = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees: Vec<Tree> = Vec::with_capacity(params.n_trees);
    let mut best_loss = if has_holdout { log_loss(&split.hold_count, &split.hold_positives, &f_train) } else { f64::INFINITY };
    let mut best_len = 0;
    for _ in 0..params.n_trees {
        for p in 0..n {
            let mu = expit(f_train[p]);
            grad[p] = count[p] * mu - positives[p];
            hess[p] = count[p] * mu * (1.0 - mu);
        }
        let mut nodes = Vec::with_capacity(7);
        grower.grow(&members, &grad, &hess, count, 0, &mut nodes);
        let tree = Tree { nodes };
        for p in 0..n {
            f_train[p] += tree.predict(x.row(p));
        }
        trees.push(tree);
        if has_holdout {
            let loss = log_loss(&split.hold_count, &split.hold_positives, &f_train);
            if loss < best_loss - 1e-12 {
                best_loss = loss;
                best_len = trees.len();
            } else if trees.len() - best_len >= params.patience {
                break;
            }
        } else {
            best_len = trees.len();
        }
    }
    trees.truncate(best_len);
    GbdtModel { base, trees }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patterns(rows: &[(Vec<f64>, f64, f64)]) -> PatternSet {
        PatternSet {
            features: Matrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()),
            count: rows.iter().map(|r| r.1).collect(),
            positives: rows.iter().map(|r| r.2).collect(),
            keys: (0..rows.len()).collect(),
        }
    }

    #[test]
    fn learns_a_step_function() {
        let set = patterns(&[
            (vec![0.0, 0.0], 400.0, 40.0),
            (vec![0.0, 1.0], 400.0, 40.0),
            (vec![1.0, 0.0], 400.0, 360.0),
            (vec![1.0, 1.0], 400.0, 360.0),
        ]);
        let model = fit_gbdt(&set, &GbdtParams::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let p = model.predict(&set.features);
        assert!((p[0] - 0.1).abs() < 0.05 && (p[2] - 0.9).abs() < 0.05, "{p:?}");
        assert!(model.n_trees() > 10);
    }

    #[test]
    fn pure_noise_stops_early() {
        let set = patterns(&[(vec![0.0], 500.0, 250.0), (vec![1.0], 500.0, 250.0)]);
        let model = fit_gbdt(&set, &GbdtParams::default(), &mut ChaCha8Rng::seed_from_u64(2));
        assert!(model.n_trees() < 200);
        for p in model.predict(&set.features) {
            assert!((p - 0.5).abs() < 0.06);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let set = patterns(&[(vec![0.2], 30.0, 10.0), (vec![0.5], 30.0, 20.0), (vec![0.9], 30.0, 25.0)]);
        let a = fit_gbdt(&set, &GbdtParams::default(), &mut ChaCha8Rng::seed_from_u64(3)).predict(&set.features);
        let b = fit_gbdt(&set, &GbdtParams::default(), &mut ChaCha8Rng::seed_from_u64(3)).predict(&set.features);
        assert_eq!(a, b);
    }

    #[test]
    fn cuts_are_thinned() {
        let x = Matrix::from_rows(&(0..500).map(|i| vec![i as f64]).collect::<Vec<_>>());
        let cuts = feature_cuts(&x, 64);
        assert_eq!(cuts[0].len(), 63);
        assert!(cuts[0].windows(2).all(|w| w[0] < w[1]));
    }
}
