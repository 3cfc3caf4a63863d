//! Size-constrained FID maximization for separable importance notions.
//!
//! The search is a two-player game. A dual player runs exponentiated
//! gradient over the two size-constraint multipliers (plus a slack
//! coordinate, so `‖λ‖₁ ≤ B`), and a subgroup player best-responds through
//! the cost-sensitive oracle with include costs `Cᵢ + (λ_U − λ_L)/n`, the
//! per-row gradient of the Lagrangian with sizes measured as fractions. Every
//! `check_every` rounds the Lagrangian gap of the averaged plays is computed,
//! and the loop stops once it is at most `ν`.
//!
//! The averaged play is a distribution over groups; the reported group is the
//! round's best response with in-band size and the largest AVG-FID.

use std::collections::HashMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::csc::{CostPair, CscOracle};
use crate::dataset::{ColumnKind, Dataset};
use crate::error::{AuditError, Result};
use crate::importance::{importance_stats, ImportanceMatrix};
use crate::models::DEFAULT_RIDGE_EPS;
use crate::subgroup::{fid_value, group_size, GroupDistribution, Membership, SubgroupSpec, ThresholdGroup};

/// The five size bands searched by default.
pub const DEFAULT_RANGES: [(f64, f64); 5] = [(0.01, 0.05), (0.05, 0.1), (0.1, 0.15), (0.15, 0.2), (0.2, 0.25)];

/// Exponentiated-gradient rate on fractional size violations.
pub const DEFAULT_ETA: f64 = 1.0;
/// The rate reported for the original experiments; only moves the dual
/// player at the scale of the [`CostForm::Literal`] costs.
pub const PUBLISHED_ETA: f64 = 1e-5;
/// Per-round cost-shift steps above this multiple of `μ` trigger a warning.
const SANITY_ORDER: f64 = 10.0;
pub const DEFAULT_MAX_ITERS: usize = 5000;
pub const DEFAULT_CHECK_EVERY: usize = 10;
const BOUND_PER_MU: f64 = 1e4;
const NU_PER_MU_N_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Minimizes `Σ gᵢ(−Cᵢ)`, i.e. pushes the group's importance up.
    Maximize,
    /// Minimizes `Σ gᵢ Cᵢ`.
    Minimize,
}

impl Direction {
    /// Sign applied to the importance column to form the minimized costs.
    pub fn cost_sign(self) -> f64 {
        match self {
            Direction::Maximize => -1.0,
            Direction::Minimize => 1.0,
        }
    }
}

/// How the upper Lagrangian value `L̄` picks the dual response to the
/// averaged group play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualResponse {
    /// Exact maximizer over `{λ ≥ 0, ‖λ‖₁ ≤ B}`: all mass on the most
    /// violated constraint, or zero when both hold.
    BestResponse,
    /// `λ' = (B·Φ_L, B·Φ_U)`.
    Literal,
}

/// Per-row include costs handed to the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostForm {
    /// `Cᵢ + (λ_U − λ_L)/n`: the oracle's reply minimizes `L(·, λ)`.
    Gradient,
    /// `Cᵢ − λ_L + λ_U` without the `1/n`; the lower value is then not a
    /// true minimum of `L(·, λ)`.
    Literal,
}

impl CostForm {
    fn shift(self, lambda: [f64; 2], n: usize) -> f64 {
        match self {
            CostForm::Gradient => (lambda[1] - lambda[0]) / n as f64,
            CostForm::Literal => lambda[1] - lambda[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Dual norm bound `B`.
    pub bound: f64,
    /// Exponentiated-gradient learning rate.
    pub eta: f64,
    /// Gap tolerance `ν`.
    pub nu: f64,
    pub max_iters: usize,
    /// `None` runs both directions and keeps the larger AVG-FID.
    pub direction: Option<Direction>,
    pub dual_response: DualResponse,
    pub cost_form: CostForm,
    pub check_every: usize,
    pub ridge_eps: f64,
    /// Set when the feature's mean absolute importance is zero.
    pub degenerate: bool,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_lo && self.alpha_lo < self.alpha_hi && self.alpha_hi <= 1.0) {
            return Err(AuditError::Config(format!(
                "size band must satisfy 0 <= lo < hi <= 1, got [{}, {}]",
                self.alpha_lo, self.alpha_hi
            )));
        }
        if !(self.bound > 0.0 && self.eta > 0.0 && self.nu > 0.0) {
            return Err(AuditError::Config(format!(
                "B, eta and nu must be positive (B={}, eta={}, nu={})",
                self.bound, self.eta, self.nu
            )));
        }
        if self.max_iters == 0 || self.check_every == 0 {
            return Err(AuditError::Config("max_iters and check_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate from the regret analysis, `ν / (2 n² B)`.
    pub fn theoretical_eta(&self, n: usize) -> f64 {
        self.nu / (2.0 * (n as f64).powi(2) * self.bound)
    }

    /// Largest change of the per-row cost shift in one round: `η·B`, divided
    /// by `n` under [`CostForm::Gradient`].
    pub fn shift_step(&self, n: usize) -> f64 {
        match self.cost_form {
            CostForm::Gradient => self.eta * self.bound / n.max(1) as f64,
            CostForm::Literal => self.eta * self.bound,
        }
    }

    /// Warnings for configurations known to converge poorly: a per-round
    /// cost-shift step far above the mean absolute importance `μ`.
    pub fn sanity_warnings(&self, mu: f64, n: usize) -> Vec<String> {
        let mut out = Vec::new();
        let step = self.shift_step(n);
        if mu > 0.0 && step > SANITY_ORDER * mu {
            out.push(format!(
                "per-round cost shift {step:.3e} is far above mean |importance| {mu:.3e}; the dual player may oscillate"
            ));
        }
        out
    }
}

/// `B = 10⁴·μ`, `ν = 0.05·μ·n·α_L`, `T = 5000`, `η =` [`DEFAULT_ETA`]. A
/// zero `μ` marks the config degenerate and substitutes `μ = 1` so the run
/// still terminates.
pub fn default_hyperparameters(
    m: &ImportanceMatrix,
    j: usize,
    n: usize,
    alpha_lo: f64,
    alpha_hi: f64,
) -> Result<SearchConfig> {
    if j >= m.n_features() {
        return Err(AuditError::dim("feature index bound", m.n_features(), j));
    }
    let mu = importance_stats(m).mu_abs[j];
    let cfg = hyperparameters_for_mu(mu, n, alpha_lo, alpha_hi);
    for w in cfg.sanity_warnings(mu, n) {
        log::warn!("{w}");
    }
    Ok(cfg)
}

pub fn hyperparameters_for_mu(mu: f64, n: usize, alpha_lo: f64, alpha_hi: f64) -> SearchConfig {
    let degenerate = !(mu > 0.0);
    let (bound, scale) = if degenerate { (1.0, 1.0) } else { (BOUND_PER_MU * mu, mu) };
    
    SearchConfig {
        alpha_lo,
        alpha_hi,
        bound,
        eta: DEFAULT_ETA,
        nu: NU_PER_MU_N_ALPHA * scale * n as f64 * alpha_lo.max(1.0 / n as f64),
        max_iters: DEFAULT_MAX_ITERS,
        direction: None,
        dual_response: DualResponse::BestResponse,
        cost_form: CostForm::Gradient,
        check_every: DEFAULT_CHECK_EVERY,
        ridge_eps: DEFAULT_RIDGE_EPS,
        degenerate,
    }
}

/// `λᵢ = B·exp(θᵢ) / (1 + exp(θ₀) + exp(θ₁))`, computed with the maximum
/// exponent factored out.
pub fn dual_weights(theta: [f64; 2], bound: f64) -> [f64; 2] {
    let top = theta[0].max(theta[1]).max(0.0);
    let e0 = (theta[0] - top).exp();
    let e1 = (theta[1] - top).exp();
    let slack = (-top).exp();
    let z = slack + e0 + e1;
    [bound * e0 / z, bound * e1 / z]
}

/// Size violations `(α_L − |w|, |w| − α_U)` with `|w|` as a fraction.
pub fn size_violations(w: &DVector<f64>, alpha_lo: f64, alpha_hi: f64) -> [f64; 2] {
    let s = group_size(w);
    [alpha_lo - s, s - alpha_hi]
}

/// `Σ wᵢCᵢ + λ_L(α_L − |w|) + λ_U(|w| − α_U)`.
pub fn lagrangian(w: &DVector<f64>, lambda: [f64; 2], costs: &DVector<f64>, alpha_lo: f64, alpha_hi: f64) -> f64 {
    let phi = size_violations(w, alpha_lo, alpha_hi);
    w.dot(costs) + lambda[0] * phi[0] + lambda[1] * phi[1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    pub size: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<f64>,
}

/// Exponentiated-gradient state after a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub theta: [f64; 2],
    pub lambda: [f64; 2],
    pub iterate_avg_groups: GroupDistribution,
    pub iterate_avg_lambda: [f64; 2],
    pub gap: f64,
}

/// One direction of the search.
#[derive(Debug, Clone)]
pub struct DirectionRun {
    pub direction: Direction,
    pub state: DualState,
    /// Expected membership under the averaged group play.
    pub averaged_membership: DVector<f64>,
    pub best_in_band: Option<ThresholdGroup>,
    pub best_avg_fid: f64,
    /// Best response whose size came closest to the band.
    pub closest: ThresholdGroup,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `‖λ_t‖₁` seen over the run.
    pub max_lambda_norm: f64,
    pub trace: Vec<TracePoint>,
}

impl DirectionRun {
    pub fn expected_size(&self) -> f64 {
        group_size(&self.averaged_membership)
    }
}

/// Include-only costs `base + shift·1` against a fixed oracle. Both ridge
/// fits are linear in the right-hand side, so the response to any shift is a
/// combination of three prefits.
struct ShiftedCosts<'a> {
    oracle: &'a CscOracle,
    r0: DVector<f64>,
    r1_base: DVector<f64>,
    r1_ones: DVector<f64>,
}

impl<'a> ShiftedCosts<'a> {
    fn new(oracle: &'a CscOracle, base: &DVector<f64>) -> Result<Self> {
        let costs = CostPair::include_only(base.clone())?;
        Ok(Self {
            oracle,
            r0: oracle.fit_costs(&costs.c0)?,
            r1_base: oracle.fit_costs(&costs.c1)?,
            r1_ones: oracle.fit_costs(&DVector::from_element(base.len(), 1.0))?,
        })
    }

    fn respond(&self, shift: f64) -> ThresholdGroup {
        ThresholdGroup::new(&self.r0 - (&self.r1_base + &self.r1_ones * shift))
    }

    fn membership(&self, g: &ThresholdGroup) -> DVector<f64> {
        g.membership(self.oracle.sensitive()).expect("oracle dimension")
    }
}

fn membership_key(w: &DVector<f64>) -> Vec<u64> {
    let mut key = vec![0u64; w.len().div_ceil(64)];
    for (i, &v) in w.iter().enumerate() {
        if v > 0.5 {
            key[i / 64] |= 1 << (i % 64);
        }
    }
    key
}

fn avg_disparity(column: &DVector<f64>, w: &DVector<f64>, population_mean: f64) -> Option<f64> {
    let mass = w.sum();
    (mass > 0.0).then(|| (column.dot(w) / mass - population_mean).abs())
}

/// Runs one direction against a prepared oracle.
pub fn search_direction(
    oracle: &CscOracle,
    column: &DVector<f64>,
    cfg: &SearchConfig,
    direction: Direction,
) -> Result<DirectionRun> {
    cfg.validate()?;
    let n = column.len();
    if oracle.sensitive().nrows() != n {
        return Err(AuditError::dim("importance rows", oracle.sensitive().nrows(), n));
    }
    let costs = column * direction.cost_sign();
    let population_mean = column.sum() / n as f64;
    let shifted = ShiftedCosts::new(oracle, &costs)?;
    let (lo, hi) = (cfg.alpha_lo, cfg.alpha_hi);

    let mut theta = [0.0f64; 2];
    let mut lambda = dual_weights(theta, cfg.bound);
    let mut sum_lambda = [0.0f64; 2];
    let mut sum_membership = DVector::<f64>::zeros(n);
    let mut distinct: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups: Vec<(ThresholdGroup, usize)> = Vec::new();

    let mut best: Option<(ThresholdGroup, f64)> = None;
    let mut closest: Option<(ThresholdGroup, f64)> = None;
    let mut trace = Vec::new();
    let mut gap = f64::INFINITY;
    let mut converged = false;
    let mut max_lambda_norm = 0.0f64;
    let mut t = 0usize;

    while t < cfg.max_iters {
        t += 1;
        lambda = dual_weights(theta, cfg.bound);
        max_lambda_norm = max_lambda_norm.max(lambda[0] + lambda[1]);
        let g = shifted.respond(cfg.cost_form.shift(lambda, n));
        let w = shifted.membership(&g);
        let size = group_size(&w);

        sum_membership += &w;
        sum_lambda[0] += lambda[0];
        sum_lambda[1] += lambda[1];
        match distinct.entry(membership_key(&w)) {
            std::collections::hash_map::Entry::Occupied(e) => groups[*e.get()].1 += 1,
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(groups.len());
                groups.push((g.clone(), 1));
            }
        }

        if (lo..=hi).contains(&size) {
            if let Some(v) = avg_disparity(column, &w, population_mean) {
                if best.as_ref().is_none_or(|(_, b)| v > *b) {
                    best = Some((g.clone(), v));
                }
            }
        }
        let distance = (lo - size).max(size - hi).max(0.0);
        if closest.as_ref().is_none_or(|(_, d)| distance < *d) {
            closest = Some((g.clone(), distance));
        }

        if t.is_multiple_of(cfg.check_every) || t == cfg.max_iters {
            let avg_w = &sum_membership / t as f64;
            let avg_lambda = [sum_lambda[0] / t as f64, sum_lambda[1] / t as f64];
            let phi = size_violations(&avg_w, lo, hi);
            let dual_reply = match cfg.dual_response {
                DualResponse::BestResponse => {
                    if phi[0].max(phi[1]) > 0.0 {
                        if phi[0] >= phi[1] {
                            [cfg.bound, 0.0]
                        } else {
                            [0.0, cfg.bound]
                        }
                    } else {
                        [0.0, 0.0]
                    }
                }
                DualResponse::Literal => [cfg.bound * phi[0], cfg.bound * phi[1]],
            };
            let upper = lagrangian(&avg_w, dual_reply, &costs, lo, hi);
            let reply = shifted.respond(cfg.cost_form.shift(avg_lambda, n));
            let lower = lagrangian(&shifted.membership(&reply), avg_lambda, &costs, lo, hi);
            let current = lagrangian(&avg_w, avg_lambda, &costs, lo, hi);
            gap = (current - lower).abs().max((upper - current).abs());
            trace.push(TracePoint {
                t,
                gap: Some(gap),
                size: group_size(&avg_w),
                avg_fid: avg_disparity(column, &avg_w, population_mean),
                lambda: Some(lambda),
                objective: None,
                coefficient: None,
            });
            if gap <= cfg.nu {
                converged = true;
                break;
            }
        }

        theta[0] += cfg.eta * (lo - size);
        theta[1] += cfg.eta * (size - hi);
    }

    let averaged_membership = &sum_membership / t as f64;
    let iterate_avg_lambda = [sum_lambda[0] / t as f64, sum_lambda[1] / t as f64];
    let members = groups
        .into_iter()
        .map(|(g, count)| (g, count as f64 / t as f64))
        .collect();
    let (closest, _) = closest.expect("at least one iteration");
    let (best_in_band, best_avg_fid) = match best {
        Some((g, v)) => (Some(g), v),
        None => (None, 0.0),
    };
    Ok(DirectionRun {
        direction,
        state: DualState {
            theta,
            lambda,
            iterate_avg_groups: GroupDistribution { members },
            iterate_avg_lambda,
            gap,
        },
        averaged_membership,
        best_in_band,
        best_avg_fid,
        closest,
        iterations: t,
        converged,
        max_lambda_norm,
        trace,
    })
}

/// A search outcome for one feature and size band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub feature: usize,
    pub feature_name: String,
    pub notion: String,
    pub direction: Direction,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub group: SubgroupSpec,
    pub fid_train: f64,
    pub avg_fid_train: f64,
    pub signed_avg_fid_train: f64,
    pub group_mean_train: f64,
    pub population_mean_train: f64,
    pub size_train: f64,
    pub fid_test: Option<f64>,
    pub avg_fid_test: Option<f64>,
    pub signed_avg_fid_test: Option<f64>,
    pub group_mean_test: Option<f64>,
    pub population_mean_test: Option<f64>,
    pub size_test: Option<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Whether the reported group's train size lies in the band.
    pub in_band: bool,
    pub degenerate: bool,
    pub final_gap: f64,
    pub nu: f64,
    pub bound: f64,
    /// Size of the averaged group play.
    pub expected_size: f64,
    pub trace: Vec<TracePoint>,
}

impl AuditResult {
    /// Score the reported group on held-out rows.
    pub fn evaluate_holdout(&mut self, m_test: &ImportanceMatrix, ds_test: &Dataset) -> Result<()> {
        m_test.check_aligned(ds_test)?;
        let w = self.group.membership(ds_test.sensitive_matrix())?;
        self.size_test = Some(group_size(&w));
        match fid_value(m_test, self.feature, &w) {
            Ok(v) => {
                self.fid_test = Some(v.fid);
                self.avg_fid_test = Some(v.avg_fid);
                self.signed_avg_fid_test = Some(v.signed_avg);
                self.group_mean_test = Some(v.group_mean);
                self.population_mean_test = Some(v.population_mean);
            }
            Err(AuditError::EmptyGroup) => {
                self.fid_test = Some(crate::subgroup::fid_sum(m_test, self.feature, &w)?);
                self.avg_fid_test = None;
                self.signed_avg_fid_test = None;
                self.group_mean_test = None;
                self.population_mean_test = Some(m_test.column(self.feature).mean());
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Held-out AVG-FID when available, otherwise the train value.
    pub fn score(&self) -> f64 {
        self.avg_fid_test.unwrap_or(self.avg_fid_train)
    }
}

fn describe(
    m: &ImportanceMatrix,
    j: usize,
    ds: &Dataset,
    cfg: &SearchConfig,
    run: &DirectionRun,
) -> Result<AuditResult> {
    let group = run.best_in_band.clone().unwrap_or_else(|| run.closest.clone());
    let w = group.membership(ds.sensitive_matrix())?;
    let size = group_size(&w);
    let (fid, avg, signed, gmean, pmean) = match fid_value(m, j, &w) {
        Ok(v) => (v.fid, v.avg_fid, v.signed_avg, v.group_mean, v.population_mean),
        Err(AuditError::EmptyGroup) => {
            let pm = m.column(j).mean();
            (crate::subgroup::fid_sum(m, j, &w)?, 0.0, 0.0, pm, pm)
        }
        Err(e) => return Err(e),
    };
    let in_band = run.best_in_band.is_some();
    Ok(AuditResult {
        feature: j,
        feature_name: m.feature_names()[j].clone(),
        notion: format!("{:?}", m.notion()).to_uppercase(),
        direction: run.direction,
        alpha_lo: cfg.alpha_lo,
        alpha_hi: cfg.alpha_hi,
        group: SubgroupSpec::hard(&group, ds.sensitive_feature_names()),
        fid_train: fid,
        avg_fid_train: if cfg.degenerate { 0.0 } else { avg },
        signed_avg_fid_train: if cfg.degenerate { 0.0 } else { signed },
        group_mean_train: gmean,
        population_mean_train: pmean,
        size_train: size,
        fid_test: None,
        avg_fid_test: None,
        signed_avg_fid_test: None,
        group_mean_test: None,
        population_mean_test: None,
        size_test: None,
        iterations_used: run.iterations,
        converged: run.converged && in_band,
        in_band,
        degenerate: cfg.degenerate,
        final_gap: run.state.gap,
        nu: cfg.nu,
        bound: cfg.bound,
        expected_size: run.expected_size(),
        trace: run.trace.clone(),
    })
}

/// Runs the configured direction(s) for feature `j` on `ds` and returns the
/// result with the larger AVG-FID (in-band results preferred).
pub fn constrained_search(m: &ImportanceMatrix, j: usize, cfg: &SearchConfig, ds: &Dataset) -> Result<AuditResult> {
    let oracle = CscOracle::new(ds.sensitive_matrix(), cfg.ridge_eps)?;
    constrained_search_with(&oracle, m, j, cfg, ds)
}

pub fn constrained_search_with(
    oracle: &CscOracle,
    m: &ImportanceMatrix,
    j: usize,
    cfg: &SearchConfig,
    ds: &Dataset,
) -> Result<AuditResult> {
    m.check_aligned(ds)?;
    if j >= m.n_features() {
        return Err(AuditError::dim("feature index bound", m.n_features(), j));
    }
    let column = m.column(j);
    let directions: &[Direction] = match cfg.direction {
        Some(Direction::Maximize) => &[Direction::Maximize],
        Some(Direction::Minimize) => &[Direction::Minimize],
        None => &[Direction::Maximize, Direction::Minimize],
    };
    let mut best: Option<AuditResult> = None;
    for &dir in directions {
        let run = search_direction(oracle, &column, cfg, dir)?;
        let res = describe(m, j, ds, cfg, &run)?;
        let better = match &best {
            None => true,
            Some(b) => (res.in_band, res.avg_fid_train) > (b.in_band, b.avg_fid_train),
        };
        if better {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one direction"))
}

/// Overrides applied on top of [`default_hyperparameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTuning {
    pub max_iters: usize,
    pub eta: Option<f64>,
    pub theoretical_eta: bool,
    pub bound: Option<f64>,
    pub nu: Option<f64>,
    pub dual_response: DualResponse,
    pub cost_form: CostForm,
    pub check_every: usize,
    pub ridge_eps: f64,
}

impl Default for SearchTuning {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            eta: None,
            theoretical_eta: false,
            bound: None,
            nu: None,
            dual_response: DualResponse::BestResponse,
            cost_form: CostForm::Gradient,
            check_every: DEFAULT_CHECK_EVERY,
            ridge_eps: DEFAULT_RIDGE_EPS,
        }
    }
}

impl SearchTuning {
    /// The constants reported for the original experiments: `η = 10⁻⁵` with
    /// the unscaled include costs.
    pub fn published() -> Self {
        Self {
            eta: Some(PUBLISHED_ETA),
            cost_form: CostForm::Literal,
            ..Self::default()
        }
    }

    pub fn config(&self, m: &ImportanceMatrix, j: usize, n: usize, band: (f64, f64)) -> Result<SearchConfig> {
        if j >= m.n_features() {
            return Err(AuditError::dim("feature index bound", m.n_features(), j));
        }
        let mu = importance_stats(m).mu_abs[j];
        let mut cfg = hyperparameters_for_mu(mu, n, band.0, band.1);
        cfg.max_iters = self.max_iters;
        cfg.dual_response = self.dual_response;
        cfg.cost_form = self.cost_form;
        cfg.check_every = self.check_every;
        cfg.ridge_eps = self.ridge_eps;
        if let Some(b) = self.bound {
            cfg.bound = b;
        }
        if let Some(nu) = self.nu {
            cfg.nu = nu;
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        if self.theoretical_eta {
            cfg.eta = cfg.theoretical_eta(n);
        }
        for w in cfg.sanity_warnings(mu, n) {
            log::warn!("{w}");
        }
        Ok(cfg)
    }
}

/// A dataset paired with its aligned importance matrix.
#[derive(Debug, Clone, Copy)]
pub struct AuditData<'a> {
    pub dataset: &'a Dataset,
    pub importance: &'a ImportanceMatrix,
}

impl<'a> AuditData<'a> {
    pub fn new(dataset: &'a Dataset, importance: &'a ImportanceMatrix) -> Result<Self> {
        importance.check_aligned(dataset)?;
        Ok(Self { dataset, importance })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub per_range: Vec<AuditResult>,
    /// Index into `per_range` of the best held-out (or train) AVG-FID.
    pub best: Option<usize>,
}

impl SweepResult {
    pub fn best_result(&self) -> Option<&AuditResult> {
        self.best.map(|i| &self.per_range[i])
    }
}

/// Runs the search over every size band and picks the band whose group has
/// the largest AVG-FID, preferring in-band, non-degenerate results.
pub fn avg_fid_sweep(
    train: AuditData<'_>,
    test: Option<AuditData<'_>>,
    j: usize,
    ranges: &[(f64, f64)],
    tuning: &SearchTuning,
) -> Result<SweepResult> {
    let oracle = CscOracle::new(train.dataset.sensitive_matrix(), tuning.ridge_eps)?;
    let n = train.dataset.n_rows();
    let mut per_range = Vec::with_capacity(ranges.len());
    for &band in ranges {
        let cfg = tuning.config(train.importance, j, n, band)?;
        let mut res = constrained_search_with(&oracle, train.importance, j, &cfg, train.dataset)?;
        if let Some(t) = test {
            res.evaluate_holdout(t.importance, t.dataset)?;
        }
        per_range.push(res);
    }
    let best = per_range
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.degenerate)
        .max_by(|(ia, a), (ib, b)| {
            (a.in_band, a.score())
                .partial_cmp(&(b.in_band, b.score()))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i);
    Ok(SweepResult { per_range, best })
}

/// Largest number of distinct sensitive profiles the brute-force oracle
/// accepts.
pub const BRUTE_FORCE_PROFILE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// Labeling maximizing `|Σ gᵢCᵢ − Σ Cᵢ|` among size-feasible,
    /// threshold-realizable labelings.
    pub labeling: DVector<f64>,
    pub fid: f64,
    /// Labeling maximizing AVG-FID among the same candidates.
    pub avg_labeling: DVector<f64>,
    pub avg_fid: f64,
    /// Extremes of `Σ gᵢCᵢ` over the candidates.
    pub min_weighted_sum: f64,
    pub max_weighted_sum: f64,
    pub candidates: usize,
}

/// Whether some `θ` puts every `include` profile strictly above zero and
/// every `exclude` profile at or below zero.
pub fn threshold_realizable(include: &[&[f64]], exclude: &[&[f64]]) -> bool {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let d = include.iter().chain(exclude.iter()).map(|p| p.len()).next().unwrap_or(0);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..d).map(|_| lp.add_var(0.0, (-1e7, 1e7))).collect();
    for p in include {
        let row: Vec<_> = vars.iter().copied().zip(p.iter().copied()).collect();
        lp.add_constraint(&row, ComparisonOp::Ge, 1.0);
    }
    for p in exclude {
        let row: Vec<_> = vars.iter().copied().zip(p.iter().copied()).collect();
        lp.add_constraint(&row, ComparisonOp::Le, 0.0);
    }
    lp.solve().is_ok()
}

/// Exhaustive search over unions of distinct sensitive profiles. Reference
/// oracle for small instances only.
pub fn brute_force_max_fid(m: &ImportanceMatrix, j: usize, cfg: &SearchConfig, ds: &Dataset) -> Result<BruteForceResult> {
    m.check_aligned(ds)?;
    let s = ds.sensitive_matrix();
    let n = s.nrows();
    let mut profiles: Vec<Vec<f64>> = Vec::new();
    let mut profile_of = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = s.row(i).iter().copied().collect();
        let k = match profiles.iter().position(|p| *p == row) {
            Some(k) => k,
            None => {
                profiles.push(row);
                profiles.len() - 1
            }
        };
        profile_of.push(k);
        if profiles.len() > BRUTE_FORCE_PROFILE_LIMIT {
            return Err(AuditError::TooManyProfiles {
                profiles: profiles.len(),
                limit: BRUTE_FORCE_PROFILE_LIMIT,
            });
        }
    }
    let k = profiles.len();
    let col = m.column(j);
    let total: f64 = col.sum();
    let mut count = vec![0usize; k];
    let mut mass = vec![0.0f64; k];
    for i in 0..n {
        count[profile_of[i]] += 1;
        mass[profile_of[i]] += col[i];
    }

    let mut best: Option<(u32, f64)> = None;
    let mut best_avg: Option<(u32, f64)> = None;
    let (mut lo_sum, mut hi_sum) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut candidates = 0;
    for mask in 0u32..(1u32 << k) {
        let members = (0..k).filter(|&p| mask >> p & 1 == 1);
        let size = members.clone().map(|p| count[p]).sum::<usize>() as f64 / n as f64;
        if size < cfg.alpha_lo || size > cfg.alpha_hi {
            continue;
        }
        let inc: Vec<&[f64]> = members.clone().map(|p| profiles[p].as_slice()).collect();
        let exc: Vec<&[f64]> = (0..k)
            .filter(|&p| mask >> p & 1 == 0)
            .map(|p| profiles[p].as_slice())
            .collect();
        if !threshold_realizable(&inc, &exc) {
            continue;
        }
        candidates += 1;
        let weighted: f64 = members.clone().map(|p| mass[p]).sum();
        lo_sum = lo_sum.min(weighted);
        hi_sum = hi_sum.max(weighted);
        let fid = (weighted - total).abs();
        if best.is_none_or(|(_, b)| fid > b) {
            best = Some((mask, fid));
        }
        if size > 0.0 {
            let avg = (weighted / (size * n as f64) - total / n as f64).abs();
            if best_avg.is_none_or(|(_, b)| avg > b) {
                best_avg = Some((mask, avg));
            }
        }
    }
    let labeling_of = |mask: u32| DVector::from_fn(n, |i, _| (mask >> profile_of[i] & 1) as f64);
    let (mask, fid) = best.ok_or_else(|| {
        AuditError::Config("no threshold-realizable labeling satisfies the size band".into())
    })?;
    let (avg_mask, avg_fid) = best_avg.unwrap_or((mask, 0.0));
    Ok(BruteForceResult {
        labeling: labeling_of(mask),
        fid,
        avg_labeling: labeling_of(avg_mask),
        avg_fid,
        min_weighted_sum: lo_sum,
        max_weighted_sum: hi_sum,
        candidates,
    })
}

/// Single-attribute groups: each binary sensitive column (both values), each
/// one-hot level, and `x_k > t` over the deciles of numeric sensitive columns.
pub fn marginal_groups(ds: &Dataset) -> Vec<(String, ThresholdGroup)> {
    let s = ds.sensitive_matrix();
    let d = s.ncols();
    let bias = d - 1;
    let mut out = Vec::new();
    let names = ds.sensitive_feature_names();
    for (k, &col) in ds.sensitive_columns().iter().enumerate() {
        let meta = &ds.columns()[col];
        let mut theta = DVector::zeros(d);
        match meta.kind {
            ColumnKind::Binary => {
                theta[k] = 1.0;
                theta[bias] = -0.5;
                out.push((format!("{}=1", names[k]), ThresholdGroup::new(theta.clone())));
                out.push((format!("{}=0", names[k]), ThresholdGroup::new(-theta)));
            }
            ColumnKind::Categorical => {
                theta[k] = 1.0;
                theta[bias] = -0.5;
                out.push((names[k].clone(), ThresholdGroup::new(theta)));
            }
            ColumnKind::Numeric => {
                let mut values: Vec<f64> = s.column(k).iter().copied().collect();
                values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let mut cuts: Vec<f64> = (1..10)
                    .map(|q| values[((q * values.len()) / 10).min(values.len() - 1)])
                    .collect();
                cuts.dedup();
                for t in cuts {
                    let mut theta = DVector::zeros(d);
                    theta[k] = 1.0;
                    theta[bias] = -t;
                    out.push((format!("{}>{}", names[k], t), ThresholdGroup::new(theta)));
                }
            }
        }
    }
    out
}

/// Best AVG-FID over marginal groups whose size falls in any of `ranges`.
pub fn marginal_baseline(
    m: &ImportanceMatrix,
    j: usize,
    ds: &Dataset,
    ranges: &[(f64, f64)],
) -> Result<Option<AuditResult>> {
    m.check_aligned(ds)?;
    let mut best: Option<AuditResult> = None;
    for (_, g) in marginal_groups(ds) {
        let w = g.membership(ds.sensitive_matrix())?;
        let size = group_size(&w);
        let Some(&(lo, hi)) = ranges.iter().find(|(lo, hi)| size >= *lo && size <= *hi) else {
            continue;
        };
        let Ok(v) = fid_value(m, j, &w) else { continue };
        if best.as_ref().is_some_and(|b| b.avg_fid_train >= v.avg_fid) {
            continue;
        }
        best = Some(AuditResult {
            feature: j,
            feature_name: m.feature_names()[j].clone(),
            notion: format!("{:?}", m.notion()).to_uppercase(),
            direction: if v.signed_avg >= 0.0 {
                Direction::Maximize
            } else {
                Direction::Minimize
            },
            alpha_lo: lo,
            alpha_hi: hi,
            group: SubgroupSpec::hard(&g, ds.sensitive_feature_names()),
            fid_train: v.fid,
            avg_fid_train: v.avg_fid,
            signed_avg_fid_train: v.signed_avg,
            group_mean_train: v.group_mean,
            population_mean_train: v.population_mean,
            size_train: size,
            fid_test: None,
            avg_fid_test: None,
            signed_avg_fid_test: None,
            group_mean_test: None,
            population_mean_test: None,
            size_test: None,
            iterations_used: 0,
            converged: true,
            in_band: true,
            degenerate: false,
            final_gap: 0.0,
            nu: 0.0,
            bound: 0.0,
            expected_size: size,
            trace: Vec::new(),
        });
    }
    Ok(best)
}


#[cfg(test)]
mod tests {
    use super::fixtures::planted;
    use super::*;
    use nalgebra::DMatrix;
    use crate::importance::Notion;

    #[test]
    fn dual_weights_identities() {
        assert_eq!(dual_weights([0.0, 0.0], 3.0), [1.0, 1.0]);
        let l = dual_weights([2f64.ln(), 0.0], 4.0);
        assert!((l[0] - 2.0).abs() < 1e-12 && (l[1] - 1.0).abs() < 1e-12);
        let l = dual_weights([800.0, 0.0], 5.0);
        assert!((l[0] - 5.0).abs() < 1e-12 && l[1] < 1e-300);
        assert!(l.iter().all(|v| v.is_finite()));
        let l = dual_weights([-3.0, 1.5], 2.0);
        assert!(l[0] + l[1] < 2.0);
    }

    #[test]
    fn lagrangian_examples() {
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let w = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(lagrangian(&w, [0.0, 0.0], &c, 0.1, 0.25), 1.0);
        let v = lagrangian(&w, [2.0, 3.0], &c, 0.1, 0.25);
        assert!((v - 0.95).abs() < 1e-12);
        // in-band size: penalties cannot increase L
        let v = lagrangian(&w, [7.0, 9.0], &c, 0.4, 0.6);
        assert!(v <= 1.0);
    }

    #[test]
    fn default_hyperparameters_formula() {
        let cfg = hyperparameters_for_mu(0.09, 1000, 0.05, 0.1);
        assert!((cfg.bound - 900.0).abs() < 1e-9);
        assert!((cfg.nu - 0.225).abs() < 1e-12);
        assert_eq!(cfg.eta, DEFAULT_ETA);
        assert_eq!(cfg.max_iters, 5000);
        assert!(!cfg.degenerate);
        assert!(cfg.sanity_warnings(0.09, 5000).is_empty());
        let published = SearchConfig { eta: PUBLISHED_ETA, cost_form: CostForm::Literal, ..cfg.clone() };
        // η·B = 0.009 ≤ μ
        assert!((published.shift_step(1000) - 0.009).abs() < 1e-12);
        assert!(published.sanity_warnings(0.09, 1000).is_empty());
        let hot = SearchConfig { cost_form: CostForm::Literal, ..cfg.clone() };
        assert_eq!(hot.sanity_warnings(0.09, 1000).len(), 1);
    }

    #[test]
    fn zero_mu_is_degenerate() {
        let cfg = hyperparameters_for_mu(0.0, 100, 0.1, 0.2);
        assert!(cfg.degenerate);
        assert_eq!(cfg.bound, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let cfg = hyperparameters_for_mu(1.0, 100, 0.1, 0.2);
        assert!(SearchConfig { alpha_lo: 0.3, ..cfg.clone() }.validate().is_err());
        assert!(SearchConfig { eta: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(SearchConfig { max_iters: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn planted_group_is_recovered() {
        let (ds, m) = planted(500, 0.2);
        let mut cfg = default_hyperparameters(&m, 1, ds.n_rows(), 0.15, 0.25).unwrap();
        cfg.max_iters = 2000;
        let res = constrained_search(&m, 1, &cfg, &ds).unwrap();
        assert!(res.in_band);
        assert!((res.size_train - 0.2).abs() < 1e-12);
        assert!((res.avg_fid_train - 0.8).abs() < 1e-12, "{}", res.avg_fid_train);
    }

    #[test]
    fn zero_importance_is_degenerate() {
        let (ds, _) = planted(100, 0.2);
        let m = ImportanceMatrix::new(DMatrix::zeros(100, 2), Notion::External, ds.feature_names()).unwrap();
        let cfg = default_hyperparameters(&m, 0, 100, 0.15, 0.25).unwrap();
        let res = constrained_search(&m, 0, &cfg, &ds).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.avg_fid_train, 0.0);
        assert_eq!(res.fid_train, 0.0);
    }

    #[test]
    fn lambda_norm_never_exceeds_bound_and_runs_are_deterministic() {
        let (ds, m) = planted(200, 0.3);
        let mut cfg = default_hyperparameters(&m, 1, 200, 0.05, 0.1).unwrap();
        cfg.eta = 0.05;
        cfg.max_iters = 300;
        let oracle = CscOracle::new(ds.sensitive_matrix(), cfg.ridge_eps).unwrap();
        let a = search_direction(&oracle, &m.column(1), &cfg, Direction::Minimize).unwrap();
        let b = search_direction(&oracle, &m.column(1), &cfg, Direction::Minimize).unwrap();
        assert!(a.max_lambda_norm <= cfg.bound);
        assert_eq!(a.trace, b.trace);
        assert!((a.state.iterate_avg_groups.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_enumerates_four_labelings() {
        let (ds, m) = planted(50, 0.2);
        let cfg = hyperparameters_for_mu(1.0, 50, 0.0, 1.0);
        let bf = brute_force_max_fid(&m, 1, &cfg, &ds).unwrap();
        assert_eq!(bf.candidates, 4);
        let cfg = hyperparameters_for_mu(1.0, 50, 0.15, 0.25);
        let bf = brute_force_max_fid(&m, 1, &cfg, &ds).unwrap();
        assert!((bf.avg_fid - 0.8).abs() < 1e-12);
        let zero = ImportanceMatrix::new(DMatrix::zeros(50, 2), Notion::External, ds.feature_names()).unwrap();
        assert_eq!(brute_force_max_fid(&zero, 1, &cfg, &ds).unwrap().fid, 0.0);
    }

    #[test]
    fn realizability_rejects_xor() {
        let p = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let r = |i: usize| p[i].as_slice();
        assert!(threshold_realizable(&[r(3)], &[r(0), r(1), r(2)]));
        assert!(!threshold_realizable(&[r(1), r(2)], &[r(0), r(3)]));
        assert!(threshold_realizable(&[], &[r(0), r(1), r(2), r(3)]));
    }

    #[test]
    fn marginal_candidates_for_one_binary_column() {
        let (ds, m) = planted(100, 0.2);
        assert_eq!(marginal_groups(&ds).len(), 2);
        let best = marginal_baseline(&m, 1, &ds, &[(0.01, 0.05), (0.15, 0.25)]).unwrap().unwrap();
        assert!((best.avg_fid_train - 0.8).abs() < 1e-12);
        assert_eq!((best.alpha_lo, best.alpha_hi), (0.15, 0.25));
    }

    #[test]
    fn sweep_prefers_band_containing_planted_group() {
        let (ds, m) = planted(400, 0.2);
        let tuning = SearchTuning { max_iters: 500, ..Default::default() };
        let data = AuditData::new(&ds, &m).unwrap();
        let sweep = avg_fid_sweep(data, Some(data), 1, &[(0.01, 0.05), (0.15, 0.25)], &tuning).unwrap();
        let best = sweep.best_result().unwrap();
        assert_eq!((best.alpha_lo, best.alpha_hi), (0.15, 0.25));
        assert!((best.avg_fid_test.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sweep_on_zero_importance_is_all_degenerate() {
        let (ds, _) = planted(60, 0.2);
        let m = ImportanceMatrix::new(DMatrix::zeros(60, 2), Notion::External, ds.feature_names()).unwrap();
        let data = AuditData::new(&ds, &m).unwrap();
        let sweep = avg_fid_sweep(data, None, 0, &[(0.1, 0.3)], &SearchTuning::default()).unwrap();
        assert!(sweep.per_range.iter().all(|r| r.degenerate));
        assert!(sweep.best.is_none());
    }
}
