//! Treatment and outcome mechanisms drawn uniformly from coefficient polytopes,
//! the confounding-bias feasibility check with its rejection loop, and exact
//! population quantities of a sampled distribution.

use crate::estimators::features::main_effects_row;
use crate::estimators::glm::{fit_logistic_irls, FitError};
use crate::estimators::linalg::{dot, Matrix};
use crate::funcdraw::{GpError, GpFactor, GridFunction};
use crate::polytope::{sample_uniform_point_with, ConstraintKind, HitAndRunConfig, Polytope, PolytopeError, RowProducts};
use crate::seed;
use crate::universe::{sample_covariate_pmf, CovariatePmf, InteractionSet, PriorConfig, SupportTable, UniverseError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ITERATIONS: usize = 1000;

/// Cells with smaller probability are ignored by the positivity index.
const POSITIVITY_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgpError {
    #[error(transparent)]
    Config(#[from] UniverseError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("no feasible draw after {iterations} iterations ({bias_rejections} bias, {treatment_rejections} treatment, {outcome_rejections} outcome rejections)")]
    FeasibilityExhausted { iterations: usize, bias_rejections: usize, treatment_rejections: usize, outcome_rejections: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeasibilityError {
    #[error("marginal treatment probability {0} is degenerate")]
    DegenerateMarginal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentMechanism {
    pub alpha0: Vec<f64>,
    /// Empty when there are no ordinal confounders.
    pub alpha1: Vec<f64>,
    pub functions: Vec<GridFunction>,
    /// `P(T = 1 | X = x)` per cell.
    pub g_table: Vec<f64>,
    pub p_treat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMechanism {
    pub hte: bool,
    /// One entry per interaction term with heterogeneity, a single constant effect otherwise.
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub functions_h: Vec<GridFunction>,
    pub functions_w: Vec<GridFunction>,
    /// `P(Y = 1 | T = t, X = x)`, indexed `[t][cell]`.
    pub m_table: [Vec<f64>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    pub ate: f64,
    pub confounding_bias: f64,
    pub positivity_index: f64,
    pub ey0: f64,
    pub ey1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(with = "seed::as_string")]
    pub seed: u64,
    /// Outer iterations used, including the successful one.
    pub iterations: usize,
    pub bias_rejections: usize,
    pub treatment_rejections: usize,
    pub outcome_rejections: usize,
    pub gp_jitter: f64,
    pub c_low: f64,
    pub c_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dgp {
    /// Prior settings with the realized `eta`, `rho` and `b`.
    pub config: PriorConfig,
    pub pmf: CovariatePmf,
    pub treatment: TreatmentMechanism,
    pub outcome: OutcomeMechanism,
    pub truth: DgpTruth,
    pub provenance: Provenance,
}

impl Dgp {
    pub fn support(&self) -> SupportTable {
        SupportTable::from_shape(self.config.u, self.config.h, self.config.c, usize::MAX).expect("support size was checked at sampling time")
    }

    pub fn interactions(&self) -> InteractionSet {
        InteractionSet::build(self.config.u, self.config.k)
    }

    /// A distribution given directly by its tables, for fixtures and oracles.
    pub fn from_tables(config: PriorConfig, probs: Vec<f64>, g_table: Vec<f64>, m_table: [Vec<f64>; 2]) -> Dgp {
        let pmf = CovariatePmf { probs };
        let p_treat = dot(&pmf.probs, &g_table);
        let truth = compute_truth(&pmf, &g_table, &m_table);
        let (c_low, c_high) = bias_bounds(&pmf, &g_table, p_treat);
        Dgp {
            treatment: TreatmentMechanism { alpha0: vec![], alpha1: vec![], functions: vec![], g_table, p_treat },
            outcome: OutcomeMechanism {
                hte: config.hte,
                lambda0: vec![],
                lambda1: vec![],
                beta0: vec![],
                beta1: vec![],
                functions_h: vec![],
                functions_w: vec![],
                m_table,
            },
            config,
            pmf,
            truth,
            provenance: Provenance {
                seed: 0,
                iterations: 0,
                bias_rejections: 0,
                treatment_rejections: 0,
                outcome_rejections: 0,
                gp_jitter: 0.0,
                c_low,
                c_high,
            },
        }
    }
}

/// Coefficients multiplying `x~_l` and `f_l(x_num) x~_l`, for every `l`.
fn interaction_row(support: &SupportTable, terms: &InteractionSet, functions: &[GridFunction], id: usize, out: &mut Vec<f64>) {
    let (bin, num) = support.split(id);
    let start = out.len();
    for l in 0..terms.len() {
        out.push(terms.indicator(l, bin));
    }
    for (l, f) in functions.iter().enumerate() {
        let ind = out[start + l];
        out.push(ind * f.at(num));
    }
}

pub fn treatment_design(support: &SupportTable, terms: &InteractionSet, functions: &[GridFunction]) -> Matrix {
    let mut data = Vec::new();
    for id in 0..support.len() {
        interaction_row(support, terms, functions, id, &mut data);
    }
    let d = terms.len() + functions.len();
    Matrix::from_vec(support.len(), d, data)
}

/// Design rows for `m(t, x)`, `[t][cell]`. Coefficient layout is
/// `(lambda0, lambda1, beta0, beta1)` with heterogeneity and `(lambda, beta0, beta1)` without.
pub fn outcome_design(
    support: &SupportTable,
    terms: &InteractionSet,
    functions_h: &[GridFunction],
    functions_w: &[GridFunction],
    hte: bool,
) -> [Matrix; 2] {
    let lam = if hte { terms.len() + functions_h.len() } else { 1 };
    let d = lam + terms.len() + functions_w.len();
    let mut tables = [Vec::with_capacity(support.len() * d), Vec::with_capacity(support.len() * d)];
    let mut treated = Vec::with_capacity(lam);
    let mut base = Vec::with_capacity(d - lam);
    for id in 0..support.len() {
        treated.clear();
        base.clear();
        if hte {
            interaction_row(support, terms, functions_h, id, &mut treated);
        } else {
            treated.push(1.0);
        }
        interaction_row(support, terms, functions_w, id, &mut base);
        for (t, table) in tables.iter_mut().enumerate() {
            table.extend(treated.iter().map(|v| v * t as f64));
            table.extend_from_slice(&base);
        }
    }
    let [a, b] = tables;
    [Matrix::from_vec(support.len(), d, a), Matrix::from_vec(support.len(), d, b)]
}

/// Evaluates `sum_l x~_l (c_l + k_l f_l(x_num))` on every cell at once: per grid
/// point the term values are placed on their binary masks and summed over
/// subsets, since `x~_l = 1` exactly when the mask of `l` is inside the cell's
/// binary pattern.
struct SubsetSums {
    u: usize,
    n_num: usize,
    masks: Vec<usize>,
    /// `functions[l][num]`, empty without ordinal confounders.
    functions: Vec<Vec<f64>>,
}

impl SubsetSums {
    fn new(support: &SupportTable, terms: &InteractionSet, functions: &[GridFunction]) -> Self {
        SubsetSums {
            u: support.u,
            n_num: support.n_num(),
            masks: terms.masks.iter().map(|&m| m as usize).collect(),
            functions: functions.iter().map(|f| f.values.clone()).collect(),
        }
    }

    fn width(&self) -> usize {
        self.masks.len() + self.functions.len()
    }

    fn apply(&self, coef: &[f64], out: &mut [f64]) {
        let n_bin = 1usize << self.u;
        let (constant, slope) = coef.split_at(self.masks.len());
        for j in 0..self.n_num {
            let s = &mut out[j * n_bin..(j + 1) * n_bin];
            s.iter_mut().for_each(|v| *v = 0.0);
            for (l, &mask) in self.masks.iter().enumerate() {
                s[mask] += constant[l] + slope.get(l).map_or(0.0, |k| k * self.functions[l][j]);
            }
            for bit in 0..self.u {
                let b = 1usize << bit;
                for m in 0..n_bin {
                    if m & b != 0 {
                        s[m] += s[m ^ b];
                    }
                }
            }
        }
    }
}

/// Row products of the treatment polytope, in the order of [`build_treatment_polytope`].
pub struct TreatmentRows {
    design: SubsetSums,
    probs: Vec<f64>,
    q: f64,
    z: std::sync::Mutex<Vec<f64>>,
}

impl TreatmentRows {
    pub fn new(support: &SupportTable, terms: &InteractionSet, functions: &[GridFunction], pmf: &CovariatePmf, q: f64) -> Self {
        TreatmentRows { design: SubsetSums::new(support, terms, functions), probs: pmf.probs.clone(), q, z: std::sync::Mutex::new(vec![0.0; support.len()]) }
    }
}

impl RowProducts for TreatmentRows {
    fn products(&self, v: &[f64], out: &mut [f64]) {
        let mut z = self.z.lock().expect("scratch lock");
        self.design.apply(v, &mut z);
        let s = dot(&self.probs, &z);
        for (x, &zx) in z.iter().enumerate() {
            out[4 * x] = zx;
            out[4 * x + 1] = -zx;
            out[4 * x + 2] = s - self.q * zx;
            out[4 * x + 3] = self.q * zx - s;
        }
    }
}

/// Row products of the outcome polytope, in the order of [`build_outcome_polytope`].
pub struct OutcomeRows {
    treated: Option<SubsetSums>,
    base: SubsetSums,
    a1: Vec<f64>,
    a0: Vec<f64>,
    z: std::sync::Mutex<[Vec<f64>; 2]>,
}

impl OutcomeRows {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        support: &SupportTable,
        terms: &InteractionSet,
        functions_h: &[GridFunction],
        functions_w: &[GridFunction],
        hte: bool,
        pmf: &CovariatePmf,
        g_table: &[f64],
    ) -> Self {
        let p_treat = dot(&pmf.probs, g_table);
        let (a1, a0) = confounding_weights(pmf, g_table, p_treat);
        let cells = support.len();
        OutcomeRows {
            treated: hte.then(|| SubsetSums::new(support, terms, functions_h)),
            base: SubsetSums::new(support, terms, functions_w),
            a1,
            a0,
            z: std::sync::Mutex::new([vec![0.0; cells], vec![0.0; cells]]),
        }
    }
}

impl RowProducts for OutcomeRows {
    fn products(&self, v: &[f64], out: &mut [f64]) {
        let mut guard = self.z.lock().expect("scratch lock");
        let [z0, z1] = &mut *guard;
        let lam = self.treated.as_ref().map_or(1, SubsetSums::width);
        self.base.apply(&v[lam..], z0);
        match &self.treated {
            Some(t) => {
                t.apply(&v[..lam], z1);
                z1.iter_mut().zip(z0.iter()).for_each(|(a, b)| *a += b);
            }
            None => z1.iter_mut().zip(z0.iter()).for_each(|(a, b)| *a = b + v[0]),
        }
        let cells = z0.len();
        for (t, z) in [&*z0, &*z1].into_iter().enumerate() {
            for (x, &zx) in z.iter().enumerate() {
                out[2 * (t * cells + x)] = zx;
                out[2 * (t * cells + x) + 1] = -zx;
            }
        }
        let c = dot(&self.a1, z1) - dot(&self.a0, z0);
        out[4 * cells] = c;
        out[4 * cells + 1] = -c;
    }
}

pub fn build_treatment_polytope(pmf: &CovariatePmf, design: &Matrix, q: f64) -> Polytope {
    let d = design.cols();
    let mut mean = vec![0.0; d];
    for (x, &p) in pmf.probs.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(design.row(x)) {
            *m += p * v;
        }
    }
    let mut poly = Polytope::with_capacity(d, 4 * design.rows());
    let mut buf = vec![0.0; d];
    for x in 0..design.rows() {
        let row = design.row(x);
        poly.push(row, 1.0, Some(ConstraintKind::Bound));
        buf.iter_mut().zip(row).for_each(|(b, r)| *b = -r);
        poly.push(&buf, 0.0, Some(ConstraintKind::Bound));
        buf.iter_mut().zip(row).zip(&mean).for_each(|((b, r), m)| *b = m - q * r);
        poly.push(&buf, 0.0, Some(ConstraintKind::Positivity));
        buf.iter_mut().zip(row).zip(&mean).for_each(|((b, r), m)| *b = q * r - m);
        poly.push(&buf, q - 1.0, Some(ConstraintKind::Positivity));
    }
    poly
}

/// Per-cell multipliers of `m(1, x)` and `m(0, x)` in the confounding bias:
/// `C = sum_x a1[x] m(1, x) - sum_x a0[x] m(0, x)`.
pub fn confounding_weights(pmf: &CovariatePmf, g_table: &[f64], p_treat: f64) -> (Vec<f64>, Vec<f64>) {
    let p0 = 1.0 - p_treat;
    let a1 = pmf.probs.iter().zip(g_table).map(|(p, g)| p / p_treat * (g - p_treat)).collect();
    let a0 = pmf.probs.iter().zip(g_table).map(|(p, g)| p / p0 * ((1.0 - g) - p0)).collect();
    (a1, a0)
}

fn bias_bounds(pmf: &CovariatePmf, g_table: &[f64], p_treat: f64) -> (f64, f64) {
    let (a1, a0) = confounding_weights(pmf, g_table, p_treat);
    let mut high = 0.0;
    let mut low = 0.0;
    for (w1, w0) in a1.iter().zip(&a0) {
        high += w1.max(0.0) - w0.min(0.0);
        low += w1.min(0.0) - w0.max(0.0);
    }
    (low, high)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasFeasibility {
    pub feasible: bool,
    pub c_low: f64,
    pub c_high: f64,
}

/// Range of confounding bias reachable by some outcome table in `[0, 1]`, and whether it contains `b`.
pub fn check_bias_feasibility(pmf: &CovariatePmf, g_table: &[f64], b: f64) -> Result<BiasFeasibility, FeasibilityError> {
    let p = dot(&pmf.probs, g_table);
    if !(p > 0.0 && p < 1.0) {
        return Err(FeasibilityError::DegenerateMarginal(p));
    }
    let (c_low, c_high) = bias_bounds(pmf, g_table, p);
    Ok(BiasFeasibility { feasible: c_low <= b && b <= c_high, c_low, c_high })
}

pub fn build_outcome_polytope(pmf: &CovariatePmf, g_table: &[f64], design: &[Matrix; 2], b: f64, tol: f64) -> Polytope {
    let d = design[0].cols();
    let cells = design[0].rows();
    let p_treat = dot(&pmf.probs, g_table);
    let (a1, a0) = confounding_weights(pmf, g_table, p_treat);
    let mut bias = vec![0.0; d];
    for x in 0..cells {
        for j in 0..d {
            bias[j] += a1[x] * design[1].get(x, j) - a0[x] * design[0].get(x, j);
        }
    }
    let mut poly = Polytope::with_capacity(d, 4 * cells + 2);
    let mut neg = vec![0.0; d];
    for table in design {
        for x in 0..cells {
            let row = table.row(x);
            poly.push(row, 1.0, Some(ConstraintKind::Bound));
            neg.iter_mut().zip(row).for_each(|(n, r)| *n = -r);
            poly.push(&neg, 0.0, Some(ConstraintKind::Bound));
        }
    }
    poly.push(&bias, b + tol, Some(ConstraintKind::Bias));
    neg.iter_mut().zip(&bias).for_each(|(n, r)| *n = -r);
    poly.push(&neg, tol - b, Some(ConstraintKind::Bias));
    poly
}

fn draw_functions<R: Rng + ?Sized>(factor: Option<&GpFactor>, count: usize, rng: &mut R) -> Vec<GridFunction> {
    match factor {
        Some(f) => (0..count).map(|_| f.draw(rng)).collect(),
        None => Vec::new(),
    }
}

pub fn sample_treatment_mechanism<R: Rng + ?Sized>(
    support: &SupportTable,
    pmf: &CovariatePmf,
    terms: &InteractionSet,
    factor: Option<&GpFactor>,
    q: f64,
    walk: &HitAndRunConfig,
    rng: &mut R,
) -> Result<TreatmentMechanism, PolytopeError> {
    let functions = draw_functions(factor, terms.len(), rng);
    let design = treatment_design(support, terms, &functions);
    let poly = build_treatment_polytope(pmf, &design, q);
    let ops = TreatmentRows::new(support, terms, &functions, pmf, q);
    let (alpha, _) = sample_uniform_point_with(&poly, Some(&ops), walk, rng)?;
    let g_table: Vec<f64> = (0..design.rows()).map(|x| dot(design.row(x), &alpha).clamp(0.0, 1.0)).collect();
    let p_treat = dot(&pmf.probs, &g_table);
    let (alpha0, alpha1) = alpha.split_at(terms.len());
    Ok(TreatmentMechanism { alpha0: alpha0.to_vec(), alpha1: alpha1.to_vec(), functions, g_table, p_treat })
}

#[allow(clippy::too_many_arguments)]
pub fn sample_outcome_mechanism<R: Rng + ?Sized>(
    support: &SupportTable,
    pmf: &CovariatePmf,
    treatment: &TreatmentMechanism,
    terms: &InteractionSet,
    factor: Option<&GpFactor>,
    config: &PriorConfig,
    walk: &HitAndRunConfig,
    rng: &mut R,
) -> Result<OutcomeMechanism, PolytopeError> {
    let functions_h = if config.hte { draw_functions(factor, terms.len(), rng) } else { Vec::new() };
    let functions_w = draw_functions(factor, terms.len(), rng);
    let design = outcome_design(support, terms, &functions_h, &functions_w, config.hte);
    let poly = build_outcome_polytope(pmf, &treatment.g_table, &design, config.b, config.tol);
    let ops = OutcomeRows::new(support, terms, &functions_h, &functions_w, config.hte, pmf, &treatment.g_table);
    let (theta, _) = sample_uniform_point_with(&poly, Some(&ops), walk, rng)?;
    let m_table = [0, 1].map(|t| {
        (0..support.len()).map(|x| dot(design[t].row(x), &theta).clamp(0.0, 1.0)).collect::<Vec<f64>>()
    });
    let lam = if config.hte { terms.len() + functions_h.len() } else { 1 };
    let (lambda, beta) = theta.split_at(lam);
    let (lambda0, lambda1) = if config.hte { lambda.split_at(terms.len()) } else { (lambda, &lambda[1..]) };
    let (beta0, beta1) = beta.split_at(terms.len());
    Ok(OutcomeMechanism {
        hte: config.hte,
        lambda0: lambda0.to_vec(),
        lambda1: lambda1.to_vec(),
        beta0: beta0.to_vec(),
        beta1: beta1.to_vec(),
        functions_h,
        functions_w,
        m_table,
    })
}

#[derive(Debug, Clone)]
pub struct SamplerOptions {
    pub max_iterations: usize,
    pub max_cells: usize,
    pub walk: HitAndRunConfig,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            max_cells: crate::universe::DEFAULT_MAX_CELLS,
            walk: HitAndRunConfig::default(),
        }
    }
}

/// Draws covariate probabilities and a treatment mechanism until the target bias is
/// reachable, then an outcome mechanism. An empty outcome polytope also discards the
/// whole draw. Fails after `max_iterations` outer iterations.
pub fn sample_dgp(config: &PriorConfig, seed: u64, opts: &SamplerOptions) -> Result<Dgp, DgpError> {
    let support = SupportTable::enumerate_with_limit(config, opts.max_cells)?;
    let terms = InteractionSet::build(config.u, config.k);
    let factor = if config.h > 0 { Some(GpFactor::new(&support.num_grid, config.eta, config.rho)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bias_rej, mut treat_rej, mut out_rej) = (0, 0, 0);
    for iteration in 1..=opts.max_iterations {
        let pmf = sample_covariate_pmf(&support, &mut rng);
        let treatment = match sample_treatment_mechanism(&support, &pmf, &terms, factor.as_ref(), config.q, &opts.walk, &mut rng) {
            Ok(t) => t,
            Err(e) => {
                log::debug!("treatment draw rejected: {e}");
                treat_rej += 1;
                continue;
            }
        };
        let feas = match check_bias_feasibility(&pmf, &treatment.g_table, config.b) {
            Ok(f) if f.feasible => f,
            _ => {
                bias_rej += 1;
                continue;
            }
        };
        let outcome = match sample_outcome_mechanism(&support, &pmf, &treatment, &terms, factor.as_ref(), config, &opts.walk, &mut rng) {
            Ok(o) => o,
            Err(e) => {
                log::debug!("outcome draw rejected: {e}");
                out_rej += 1;
                continue;
            }
        };
        let truth = compute_truth(&pmf, &treatment.g_table, &outcome.m_table);
        return Ok(Dgp {
            config: config.clone(),
            pmf,
            treatment,
            outcome,
            truth,
            provenance: Provenance {
                seed,
                iterations: iteration,
                bias_rejections: bias_rej,
                treatment_rejections: treat_rej,
                outcome_rejections: out_rej,
                gp_jitter: factor.as_ref().map_or(0.0, GpFactor::jitter),
                c_low: feas.c_low,
                c_high: feas.c_high,
            },
        });
    }
    Err(DgpError::FeasibilityExhausted {
        iterations: opts.max_iterations,
        bias_rejections: bias_rej,
        treatment_rejections: treat_rej,
        outcome_rejections: out_rej,
    })
}

pub fn confounding_bias(pmf: &CovariatePmf, g_table: &[f64], m_table: &[Vec<f64>; 2]) -> f64 {
    let p = dot(&pmf.probs, g_table);
    let (a1, a0) = confounding_weights(pmf, g_table, p);
    dot(&a1, &m_table[1]) - dot(&a0, &m_table[0])
}

pub fn compute_truth(pmf: &CovariatePmf, g_table: &[f64], m_table: &[Vec<f64>; 2]) -> DgpTruth {
    let p1 = dot(&pmf.probs, g_table);
    let p0 = 1.0 - p1;
    let mut ate = 0.0;
    let mut ey1 = 0.0;
    let mut ey0 = 0.0;
    let mut index: f64 = 1.0;
    for (x, &p) in pmf.probs.iter().enumerate() {
        let g = g_table[x];
        ate += p * (m_table[1][x] - m_table[0][x]);
        ey1 += p * g * m_table[1][x];
        ey0 += p * (1.0 - g) * m_table[0][x];
        if p > POSITIVITY_MASS_FLOOR {
            index = index.max(p1 / g).max(p0 / (1.0 - g));
        }
    }
    DgpTruth {
        ate,
        confounding_bias: confounding_bias(pmf, g_table, m_table),
        positivity_index: index,
        ey0: ey0 / p0,
        ey1: ey1 / p1,
    }
}

/// Population limit of the main-effects logistic outcome fit, `m_bar[t][cell]`.
pub fn population_main_effects_fit(dgp: &Dgp) -> Result<[Vec<f64>; 2], FitError> {
    let support = dgp.support();
    let cells = support.len();
    let mut rows = Vec::with_capacity(2 * cells);
    let mut response = Vec::with_capacity(2 * cells);
    let mut weights = Vec::with_capacity(2 * cells);
    let mut covs = Vec::new();
    let mut buf = Vec::new();
    let mut designs = [Vec::with_capacity(cells), Vec::with_capacity(cells)];
    for x in 0..cells {
        let cell = support.decode(x);
        covs.clear();
        covs.extend(cell.bin.iter().map(|&b| b as f64));
        covs.extend_from_slice(&cell.num);
        for t in 0..2 {
            main_effects_row(&covs, Some(t as f64), &mut buf);
            designs[t].push(buf.clone());
            let g = if t == 1 { dgp.treatment.g_table[x] } else { 1.0 - dgp.treatment.g_table[x] };
            rows.push(buf.clone());
            response.push(dgp.outcome.m_table[t][x]);
            weights.push(dgp.pmf.probs[x] * g);
        }
    }
    let fit = fit_logistic_irls(&Matrix::from_rows(&rows), &response, &weights)?;
    Ok(designs.map(|rows| rows.iter().map(|r| fit.predict_row(r)).collect()))
}

/// Large-sample bias of the main-effects logistic g-computation estimator.
pub fn asymptotic_bias_gcomp(dgp: &Dgp) -> Result<f64, FitError> {
    let m_bar = population_main_effects_fit(dgp)?;
    let m = &dgp.outcome.m_table;
    Ok(dgp.pmf.probs.iter().enumerate().map(|(x, p)| p * ((m_bar[1][x] - m_bar[0][x]) - (m[1][x] - m[0][x]))).sum())
}

/// Large-sample bias of a doubly robust estimator whose nuisances converge to
/// `g_bar` (treatment probabilities per cell) and `m_bar` (`[t][cell]`).
pub fn asymptotic_bias_dr(dgp: &Dgp, g_bar: &[f64], m_bar: &[Vec<f64>; 2]) -> f64 {
    let g = &dgp.treatment.g_table;
    let m = &dgp.outcome.m_table;
    let mut total = 0.0;
    for (x, &p) in dgp.pmf.probs.iter().enumerate() {
        let treated = (g[x] / g_bar[x] - 1.0) * (m[1][x] - m_bar[1][x]);
        let control = ((1.0 - g[x]) / (1.0 - g_bar[x]) - 1.0) * (m[0][x] - m_bar[0][x]);
        total += p * (treated - control);
    }
    total
}
