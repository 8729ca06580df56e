//! Prior configuration, the discrete covariate support, the interaction
//! index set and the covariate distribution.
//!
//! Covariates are `u` binary coordinates and `h` ordinal coordinates, each
//! ordinal one supported on the grid `{0, 1/(c-1), ..., 1}`. Support cells
//! are numbered with the binary coordinates varying fastest:
//!
//! ```text
//! id = bin_index + 2^u * num_index
//! bin_index = sum_j x_bin[j] * 2^j
//! num_index = sum_j level[j] * c^j      (x_num[j] = level[j] / (c - 1))
//! ```
//!
//! so cell ids are stable across runs and across serialized artifacts.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest support the exact truth computations are allowed to enumerate.
pub const DEFAULT_MAX_CELLS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UniverseError {
    #[error("invalid prior configuration: {0}")]
    InvalidConfig(String),
    #[error("support has {cells} cells, above the limit of {limit}")]
    SupportTooLarge { cells: u128, limit: usize },
}

/// Hyperparameters of the distribution universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Number of binary confounders.
    pub u: usize,
    /// Number of ordinal confounders.
    pub h: usize,
    /// Support size of each ordinal confounder.
    pub c: usize,
    /// Maximum interaction order among the binary confounders.
    pub k: usize,
    /// Treatment effect heterogeneity.
    pub hte: bool,
    /// Positivity bound on `P(T=t) / P(T=t | X=x)`.
    pub q: f64,
    /// Target confounding bias on the probability scale.
    pub b: f64,
    /// Gaussian-process variance scale.
    pub eta: f64,
    /// Gaussian-process inverse squared length scale.
    pub rho: f64,
    /// Allowed deviation of the realized confounding bias from `b`.
    pub tol: f64,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), UniverseError> {
        let fail = |msg: &str| Err(UniverseError::InvalidConfig(msg.to_string()));
        if self.u + self.h == 0 {
            return fail("need at least one confounder (u + h >= 1)");
        }
        if self.h >= 1 && self.c < 2 {
            return fail("ordinal confounders need c >= 2");
        }
        if self.k < 1 || self.k > self.u {
            return fail("interaction order must satisfy 1 <= k <= u");
        }
        if !(self.q >= 1.0) || !self.q.is_finite() {
            return fail("positivity bound q must be a finite number >= 1");
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return fail("tol must be positive");
        }
        if !(self.b.abs() <= 1.0) {
            return fail("|b| must be at most 1");
        }
        if !(self.eta > 0.0) || !(self.rho > 0.0) || !self.eta.is_finite() || !self.rho.is_finite() {
            return fail("eta and rho must be positive and finite");
        }
        Ok(())
    }

    /// Number of support cells, `2^u * c^h`, without overflow.
    pub fn cell_count(&self) -> u128 {
        let bins = 1u128.checked_shl(self.u as u32).unwrap_or(u128::MAX);
        let nums = (self.c.max(1) as u128).checked_pow(self.h as u32).unwrap_or(u128::MAX);
        bins.saturating_mul(nums)
    }
}

/// All covariate combinations of the universe in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportTable {
    pub u: usize,
    pub h: usize,
    pub c: usize,
    /// Grid points of the ordinal block, indexed by `num_index` (`c^h` points, each of length `h`).
    pub num_grid: Vec<Vec<f64>>,
}

impl SupportTable {
    pub fn enumerate(config: &PriorConfig) -> Result<Self, UniverseError> {
        Self::enumerate_with_limit(config, DEFAULT_MAX_CELLS)
    }

    pub fn enumerate_with_limit(config: &PriorConfig, limit: usize) -> Result<Self, UniverseError> {
        config.validate()?;
        Self::from_shape(config.u, config.h, config.c, limit)
    }

    /// Builds the support directly from its shape; `c` is ignored when `h = 0`.
    pub fn from_shape(u: usize, h: usize, c: usize, limit: usize) -> Result<Self, UniverseError> {
        let c = if h == 0 { 1 } else { c };
        let cells = (1u128 << u).saturating_mul((c as u128).saturating_pow(h as u32));
        if cells > limit as u128 {
            return Err(UniverseError::SupportTooLarge { cells, limit });
        }
        let n_num = c.pow(h as u32);
        let step = if c > 1 { 1.0 / (c - 1) as f64 } else { 0.0 };
        let num_grid = (0..n_num)
            .map(|idx| {
                let mut rest = idx;
                (0..h)
                    .map(|_| {
                        let level = rest % c;
                        rest /= c;
                        level as f64 * step
                    })
                    .collect()
            })
            .collect();
        Ok(SupportTable { u, h, c, num_grid })
    }

    pub fn len(&self) -> usize {
        self.n_bin() * self.n_num()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct binary patterns, `2^u`.
    pub fn n_bin(&self) -> usize {
        1 << self.u
    }

    /// Number of ordinal grid points, `c^h`.
    pub fn n_num(&self) -> usize {
        self.num_grid.len()
    }

    /// Splits a cell id into `(bin_index, num_index)`.
    #[inline]
    pub fn split(&self, id: usize) -> (usize, usize) {
        (id % self.n_bin(), id / self.n_bin())
    }

    #[inline]
    pub fn join(&self, bin_index: usize, num_index: usize) -> usize {
        bin_index + self.n_bin() * num_index
    }

    pub fn bin_coords(&self, bin_index: usize) -> Vec<u8> {
        (0..self.u).map(|j| ((bin_index >> j) & 1) as u8).collect()
    }

    pub fn decode(&self, id: usize) -> Cell {
        let (b, n) = self.split(id);
        Cell { bin: self.bin_coords(b), num: self.num_grid[n].clone() }
    }

    /// Inverse of [`decode`](Self::decode). Returns `None` for coordinates
    /// outside the support.
    pub fn encode(&self, cell: &Cell) -> Option<usize> {
        if cell.bin.len() != self.u || cell.num.len() != self.h {
            return None;
        }
        let mut bin_index = 0usize;
        for (j, &v) in cell.bin.iter().enumerate() {
            match v {
                0 => {}
                1 => bin_index |= 1 << j,
                _ => return None,
            }
        }
        let mut num_index = 0usize;
        let mut scale = 1usize;
        for &v in &cell.num {
            let level = (v * (self.c - 1) as f64).round();
            if !(0.0..self.c as f64).contains(&level) || (level / (self.c - 1) as f64 - v).abs() > 1e-9 {
                return None;
            }
            num_index += level as usize * scale;
            scale *= self.c;
        }
        Some(self.join(bin_index, num_index))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len()).map(|id| self.decode(id))
    }
}

/// One covariate combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub bin: Vec<u8>,
    pub num: Vec<f64>,
}

/// Binary interaction patterns `l` with at most `k` ones, stored as bit masks
/// (bit `j` set when `l_j = 1`). Ordered by number of ones, then by the
/// combination order of the set positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSet {
    pub u: usize,
    pub masks: Vec<u32>,
}

impl InteractionSet {
    pub fn build(u: usize, k: usize) -> Self {
        assert!(u < 32, "at most 31 binary confounders are supported");
        let k = k.min(u);
        let mut masks = Vec::new();
        for order in 0..=k {
            push_combinations(u, order, 0, 0, &mut masks);
        }
        InteractionSet { u, masks }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn vector(&self, idx: usize) -> Vec<u8> {
        (0..self.u).map(|j| ((self.masks[idx] >> j) & 1) as u8).collect()
    }

    /// `prod_j x_bin[j]^{l_j}`, i.e. 1 when every coordinate of `l` is set in the cell.
    #[inline]
    pub fn indicator(&self, idx: usize, bin_index: usize) -> f64 {
        let m = self.masks[idx] as usize;
        if bin_index & m == m {
            1.0
        } else {
            0.0
        }
    }
}

// Emits masks in lexicographic order of the chosen positions.
fn push_combinations(u: usize, remaining: usize, start: usize, acc: u32, out: &mut Vec<u32>) {
    if remaining == 0 {
        out.push(acc);
        return;
    }
    for j in start..u {
        if u - j < remaining {
            break;
        }
        push_combinations(u, remaining - 1, j + 1, acc | (1 << j), out);
    }
}

/// `P(X = x)` indexed by cell id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePmf {
    pub probs: Vec<f64>,
}

impl CovariatePmf {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// One draw from the flat Dirichlet over the support simplex.
pub fn sample_covariate_pmf<R: Rng + ?Sized>(support: &SupportTable, rng: &mut R) -> CovariatePmf {
    let mut probs: Vec<f64> = (0..support.len()).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    CovariatePmf { probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(u: usize, h: usize, c: usize) -> PriorConfig {
        PriorConfig { u, h, c, k: u.max(1).min(u), hte: false, q: 10.0, b: 0.0, eta: 1.0, rho: 1.0, tol: 0.01 }
    }

    #[test]
    fn support_sizes() {
        assert_eq!(SupportTable::enumerate(&config(1, 0, 2)).unwrap().len(), 2);
        let s = SupportTable::enumerate(&config(5, 1, 100)).unwrap();
        assert_eq!(s.len(), 3200);
        let s = SupportTable::enumerate(&config(2, 1, 3)).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s.num_grid, vec![vec![0.0], vec![0.5], vec![1.0]]);
    }

    #[test]
    fn binary_coordinates_vary_fastest() {
        let s = SupportTable::enumerate(&config(2, 1, 3)).unwrap();
        let cells: Vec<Cell> = s.cells().collect();
        assert_eq!(cells[0].bin, vec![0, 0]);
        assert_eq!(cells[1].bin, vec![1, 0]);
        assert_eq!(cells[2].bin, vec![0, 1]);
        assert_eq!(cells[3].bin, vec![1, 1]);
        assert_eq!(cells[3].num, vec![0.0]);
        assert_eq!(cells[4].num, vec![0.5]);
        assert_eq!(cells[4].bin, vec![0, 0]);
    }

    #[test]
    fn support_guard() {
        let cfg = config(20, 2, 100);
        let err = SupportTable::enumerate(&cfg).unwrap_err();
        assert!(matches!(err, UniverseError::SupportTooLarge { .. }));
    }

    #[test]
    fn encode_rejects_off_grid() {
        let s = SupportTable::enumerate(&config(1, 1, 3)).unwrap();
        assert_eq!(s.encode(&Cell { bin: vec![1], num: vec![0.25] }), None);
        assert_eq!(s.encode(&Cell { bin: vec![2], num: vec![0.5] }), None);
        assert_eq!(s.encode(&Cell { bin: vec![1], num: vec![0.5] }), Some(3));
    }

    #[test]
    fn invalid_configs() {
        let mut c = config(2, 1, 3);
        c.k = 3;
        assert!(c.validate().is_err());
        let mut c = config(2, 1, 1);
        c.k = 1;
        assert!(c.validate().is_err());
        let mut c = config(2, 0, 1);
        c.q = 0.5;
        assert!(c.validate().is_err());
        let mut c = config(2, 0, 1);
        c.tol = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn interaction_set_u3_k2_matches_listing() {
        let set = InteractionSet::build(3, 2);
        let vectors: Vec<Vec<u8>> = (0..set.len()).map(|i| set.vector(i)).collect();
        assert_eq!(
            vectors,
            vec![
                vec![0, 0, 0],
                vec![1, 0, 0],
                vec![0, 1, 0],
                vec![0, 0, 1],
                vec![1, 1, 0],
                vec![1, 0, 1],
                vec![0, 1, 1],
            ]
        );
    }

    #[test]
    fn interaction_set_sizes() {
        let set = InteractionSet::build(2, 1);
        assert_eq!((0..set.len()).map(|i| set.vector(i)).collect::<Vec<_>>(), vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
        assert_eq!(InteractionSet::build(5, 3).len(), 26);
        assert_eq!(InteractionSet::build(5, 1).len(), 6);
    }

    #[test]
    fn indicator_is_subset_test() {
        let set = InteractionSet::build(3, 2);
        // l = (1,1,0) is mask 0b011; cell bits 0b111 contains it, 0b101 does not.
        assert_eq!(set.indicator(4, 0b111), 1.0);
        assert_eq!(set.indicator(4, 0b101), 0.0);
        assert_eq!(set.indicator(0, 0b000), 1.0);
    }

    #[test]
    fn dirichlet_draw_is_a_pmf_and_deterministic() {
        let s = SupportTable::enumerate(&config(5, 1, 100)).unwrap();
        let a = sample_covariate_pmf(&s, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_covariate_pmf(&s, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.probs.iter().all(|&p| p >= 0.0));
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dirichlet_moments() {
        // Dirichlet(1,1,1,1): mean 1/4, variance (K-1)/(K^2 (K+1)) = 3/80.
        let s = SupportTable::from_shape(2, 0, 1, DEFAULT_MAX_CELLS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut sum = [0.0; 4];
        let mut sum2 = [0.0; 4];
        for _ in 0..draws {
            let p = sample_covariate_pmf(&s, &mut rng);
            for i in 0..4 {
                sum[i] += p.probs[i];
                sum2[i] += p.probs[i] * p.probs[i];
            }
        }
        let var_true = 3.0 / 80.0;
        let se = (var_true / draws as f64).sqrt();
        for i in 0..4 {
            let mean = sum[i] / draws as f64;
            let var = sum2[i] / draws as f64 - mean * mean;
            assert!((mean - 0.25).abs() <= 3.0 * se, "cell {i} mean {mean}");
            assert!((var - var_true).abs() / var_true <= 0.10, "cell {i} var {var}");
        }
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_bijection(u in 0usize..5, h in 0usize..3, c in 2usize..5) {
            proptest::prop_assume!(u + h >= 1);
            let s = SupportTable::from_shape(u, h, c, DEFAULT_MAX_CELLS).unwrap();
            for id in 0..s.len() {
                proptest::prop_assert_eq!(s.encode(&s.decode(id)), Some(id));
            }
        }

        #[test]
        fn interaction_set_cardinality(u in 1usize..10, k in 1usize..10) {
            let k = k.min(u);
            let set = InteractionSet::build(u, k);
            let expected: usize = (0..=k).map(|j| binomial(u, j)).sum();
            proptest::prop_assert_eq!(set.len(), expected);
            let mut sorted = set.masks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            proptest::prop_assert_eq!(sorted.len(), set.len());
            proptest::prop_assert!(set.masks.contains(&0));
        }
    }

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }
}
