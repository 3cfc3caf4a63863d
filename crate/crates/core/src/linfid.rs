//! LIN-FID: disparity between a feature's weighted-least-squares coefficient
//! on a soft subgroup and on the whole population.
//!
//! The subgroup is `w = σ(S·θ)` over the sensitive block `S`. The objective
//! `λ_c·β_j(w) + λ_s·P_size(w)` is non-convex in `θ`; it is minimized with
//! Adam, and its gradient is taken through the linear solve by the adjoint
//! of the normal equations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AuditError, Result};
use crate::models::{factor, fit_wls, sigmoid, weighted_gram, DEFAULT_RIDGE_EPS};
use crate::search::{AuditResult, Direction, TracePoint};
use crate::subgroup::{group_size, Membership, SoftGroup, SubgroupSpec};

pub const DEFAULT_LAMBDA_SIZE: f64 = 1e5;
pub const DEFAULT_LAMBDA_COEF: f64 = 0.1;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 1000;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INIT_STD: f64 = 0.01;
const STALL_WINDOW: usize = 50;
const STALL_TOL: f64 = 1e-9;

/// How held-out rows are weighted when refitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// `σ(S·θ)` used directly as regression weights.
    Soft,
    /// Weights thresholded at 0.5.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinFidConfig {
    pub lambda_size: f64,
    pub lambda_coef: f64,
    pub ridge_eps: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub target_feature: usize,
    /// `None` runs both directions and keeps the larger disparity.
    pub direction: Option<Direction>,
    pub eval_mode: EvalMode,
}

impl LinFidConfig {
    pub fn new(target_feature: usize, alpha_lo: f64, alpha_hi: f64) -> Self {
        Self {
            lambda_size: DEFAULT_LAMBDA_SIZE,
            lambda_coef: DEFAULT_LAMBDA_COEF,
            ridge_eps: DEFAULT_RIDGE_EPS,
            lr: DEFAULT_LR,
            max_iters: DEFAULT_MAX_ITERS,
            seed: 0,
            alpha_lo,
            alpha_hi,
            target_feature,
            direction: None,
            eval_mode: EvalMode::Soft,
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if !(self.lambda_size > 0.0 && self.lr > 0.0 && self.lambda_coef >= 0.0 && self.ridge_eps >= 0.0) {
            return Err(AuditError::Config(
                "lambda_size and lr must be positive, lambda_coef and ridge_eps non-negative".into(),
            ));
        }
        if !(0.0 <= self.alpha_lo && self.alpha_lo < self.alpha_hi && self.alpha_hi <= 1.0) {
            return Err(AuditError::Config(format!(
                "size band must satisfy 0 <= lo < hi <= 1, got [{}, {}]",
                self.alpha_lo, self.alpha_hi
            )));
        }
        if self.target_feature >= ds.n_features() {
            return Err(AuditError::dim("target feature bound", ds.n_features(), self.target_feature));
        }
        if self.max_iters == 0 {
            return Err(AuditError::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Full feature matrix with a trailing intercept column.
pub fn regression_design(ds: &Dataset) -> DMatrix<f64> {
    let x = ds.features();
    x.clone().insert_column(x.ncols(), 1.0)
}

/// `|β_g[j] − β_R[j]|` for an arbitrary design matrix.
pub fn lin_fid_design(x: &DMatrix<f64>, y: &DVector<f64>, j: usize, w: &DVector<f64>, eps: f64) -> Result<f64> {
    if j >= x.ncols() {
        return Err(AuditError::dim("coefficient index bound", x.ncols(), j));
    }
    if !(w.sum() > 0.0) {
        return Err(AuditError::EmptyGroup);
    }
    let group = fit_wls(x, y, w, eps)?.theta[j];
    let population = fit_wls(x, y, &DVector::from_element(y.len(), 1.0), eps)?.theta[j];
    Ok((group - population).abs())
}

/// LIN-FID of feature `j` on `ds` for membership weights `w`.
pub fn lin_fid(ds: &Dataset, j: usize, w: &DVector<f64>, eps: f64) -> Result<f64> {
    lin_fid_design(&regression_design(ds), ds.labels(), j, w, eps)
}

/// `max(α_L − |w|, 0) + max(|w| − α_U, 0)` with fractional size.
pub fn size_penalty(w: &DVector<f64>, alpha_lo: f64, alpha_hi: f64) -> f64 {
    hinge(group_size(w), alpha_lo, alpha_hi)
}

fn hinge(size: f64, lo: f64, hi: f64) -> f64 {
    (lo - size).max(0.0) + (size - hi).max(0.0)
}

fn hinge_slope(size: f64, lo: f64, hi: f64) -> f64 {
    if size < lo {
        -1.0
    } else if size > hi {
        1.0
    } else {
        0.0
    }
}

/// Objective value and its gradient at one `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinFidEval {
    pub objective: f64,
    pub coefficient: f64,
    pub size: f64,
    pub gradient: DVector<f64>,
}

/// The differentiable objective for one dataset, feature and direction.
pub struct LinFidObjective<'a> {
    design: DMatrix<f64>,
    labels: &'a DVector<f64>,
    sensitive: &'a DMatrix<f64>,
    j: usize,
    coef_weight: f64,
    lambda_size: f64,
    alpha: (f64, f64),
    eps: f64,
}

impl<'a> LinFidObjective<'a> {
    pub fn new(ds: &'a Dataset, cfg: &LinFidConfig, direction: Direction) -> Self {
        Self {
            design: regression_design(ds),
            labels: ds.labels(),
            sensitive: ds.sensitive_matrix(),
            j: cfg.target_feature,
            coef_weight: cfg.lambda_coef * direction.cost_sign(),
            lambda_size: cfg.lambda_size,
            alpha: (cfg.alpha_lo, cfg.alpha_hi),
            eps: cfg.ridge_eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.sensitive.ncols()
    }

    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<LinFidEval> {
        if theta.len() != self.dim() {
            return Err(AuditError::dim("soft group parameters", self.dim(), theta.len()));
        }
        let n = self.labels.len();
        let w = (self.sensitive * theta).map(sigmoid);
        let dw = w.map(|v| v * (1.0 - v));
        let chol = factor(weighted_gram(&self.design, &w, self.eps))?;
        let beta = chol.solve(&self.design.tr_mul(&self.labels.component_mul(&w)));
        let mut e_j = DVector::zeros(self.design.ncols());
        e_j[self.j] = 1.0;
        let u = chol.solve(&e_j);
        let resid = self.labels - &self.design * &beta;
        // ∂β_j/∂w_i = (u·x_i) r_i
        let dcoef_dw = (&self.design * &u).component_mul(&resid);
        let size = w.sum() / n as f64;
        let slope = hinge_slope(size, self.alpha.0, self.alpha.1);
        let per_row = dcoef_dw * self.coef_weight + DVector::from_element(n, self.lambda_size * slope / n as f64);
        let gradient = self.sensitive.tr_mul(&per_row.component_mul(&dw));
        let objective = self.coef_weight * beta[self.j] + self.lambda_size * hinge(size, self.alpha.0, self.alpha.1);
        if !objective.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(AuditError::NonFinite("lin-fid objective".into()));
        }
        Ok(LinFidEval {
            objective,
            coefficient: beta[self.j],
            size,
            gradient,
        })
    }
}

/// Largest deviation between the analytic gradient and central differences
/// (step `1e-5`), relative to the larger of the two gradients' max norms.
pub fn linfid_gradient_check(
    ds: &Dataset,
    cfg: &LinFidConfig,
    theta: &DVector<f64>,
    direction: Direction,
) -> Result<f64> {
    const H: f64 = 1e-5;
    let obj = LinFidObjective::new(ds, cfg, direction);
    let analytic = obj.evaluate(theta)?.gradient;
    let mut numeric = DVector::zeros(theta.len());
    for k in 0..theta.len() {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[k] += H;
        down[k] -= H;
        numeric[k] = (obj.evaluate(&up)?.objective - obj.evaluate(&down)?.objective) / (2.0 * H);
    }
    let scale = analytic.amax().max(numeric.amax());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((analytic - numeric).amax() / scale)
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(dim: usize, lr: f64) -> Self {
        Self {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>) {
        self.t += 1;
        self.m = &self.m * ADAM_BETA1 + grad * (1.0 - ADAM_BETA1);
        self.v = &self.v * ADAM_BETA2 + grad.component_mul(grad) * (1.0 - ADAM_BETA2);
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for k in 0..theta.len() {
            theta[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// One optimized direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinFidRun {
    pub direction: Direction,
    pub theta: DVector<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    /// Stopped (stalled or out of iterations) with size in band.
    pub converged: bool,
    /// The objective stopped improving before `max_iters`.
    pub stalled: bool,
    pub trace: Vec<TracePoint>,
}

/// Seeded `N(0, 0.01²)` initial parameters.
pub fn initial_theta(dim: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    DVector::from_fn(dim, |_, _| normal.sample(&mut rng))
}

/// Adam descent from the seeded initialization. Stops when the best
/// objective improves by less than `1e-9` over 50 iterations.
pub fn optimize_direction(ds: &Dataset, cfg: &LinFidConfig, direction: Direction) -> Result<LinFidRun> {
    cfg.validate(ds)?;
    let obj = LinFidObjective::new(ds, cfg, direction);
    let mut theta = initial_theta(obj.dim(), cfg.seed);
    let mut adam = Adam::new(obj.dim(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut best_history: Vec<f64> = Vec::with_capacity(cfg.max_iters + 1);
    let mut best_theta = theta.clone();
    let mut best = f64::INFINITY;
    let mut initial = f64::NAN;
    let mut stalled = false;
    let mut iterations = 0;
    let mut last_size = 0.0;
    for t in 0..=cfg.max_iters {
        let eval = obj.evaluate(&theta).map_err(|e| {
            log::error!("lin-fid aborted at iteration {t}: {e}");
            e
        })?;
        if t == 0 {
            initial = eval.objective;
        }
        trace.push(TracePoint {
            t,
            gap: None,
            size: eval.size,
            avg_fid: None,
            lambda: None,
            objective: Some(eval.objective),
            coefficient: Some(eval.coefficient),
        });
        if eval.objective < best {
            best = eval.objective;
            best_theta = theta.clone();
            last_size = eval.size;
        }
        best_history.push(best);
        iterations = t;
        if t >= STALL_WINDOW && best_history[t - STALL_WINDOW] - best < STALL_TOL {
            stalled = true;
            break;
        }
        if t == cfg.max_iters {
            break;
        }
        adam.step(&mut theta, &eval.gradient);
    }
    let in_band = (cfg.alpha_lo..=cfg.alpha_hi).contains(&last_size);
    Ok(LinFidRun {
        direction,
        theta: best_theta,
        initial_objective: initial,
        final_objective: best,
        iterations,
        converged: in_band,
        stalled,
        trace,
    })
}

fn eval_weights(group: &SoftGroup, sensitive: &DMatrix<f64>, mode: EvalMode) -> Result<DVector<f64>> {
    match mode {
        EvalMode::Soft => group.membership(sensitive),
        EvalMode::Hard => group.harden().membership(sensitive),
    }
}

/// `(β_g[j], β_R[j])` under the given weights.
fn coefficient_pair(ds: &Dataset, j: usize, w: &DVector<f64>, eps: f64) -> Result<(f64, f64)> {
    let x = regression_design(ds);
    let ones = DVector::from_element(ds.n_rows(), 1.0);
    Ok((
        fit_wls(&x, ds.labels(), w, eps)?.theta[j],
        fit_wls(&x, ds.labels(), &ones, eps)?.theta[j],
    ))
}

fn describe(ds: &Dataset, cfg: &LinFidConfig, run: &LinFidRun) -> Result<AuditResult> {
    let j = cfg.target_feature;
    let group = SoftGroup::new(run.theta.clone());
    let w = eval_weights(&group, ds.sensitive_matrix(), cfg.eval_mode)?;
    let size = group_size(&w);
    let degenerate = ds.features().column(j).iter().all(|&v| v == ds.features()[(0, j)]);
    let (gcoef, pcoef) = if w.sum() > 0.0 {
        coefficient_pair(ds, j, &w, cfg.ridge_eps)?
    } else {
        let (_, p) = coefficient_pair(ds, j, &DVector::from_element(ds.n_rows(), 1.0), cfg.ridge_eps)?;
        (p, p)
    };
    let signed = gcoef - pcoef;
    let in_band = (cfg.alpha_lo..=cfg.alpha_hi).contains(&size);
    Ok(AuditResult {
        feature: j,
        feature_name: ds.feature_names()[j].clone(),
        notion: "LR".into(),
        direction: run.direction,
        alpha_lo: cfg.alpha_lo,
        alpha_hi: cfg.alpha_hi,
        group: SubgroupSpec::soft(&group, ds.sensitive_feature_names()),
        fid_train: signed.abs(),
        avg_fid_train: signed.abs(),
        signed_avg_fid_train: signed,
        group_mean_train: gcoef,
        population_mean_train: pcoef,
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
        degenerate,
        final_gap: run.final_objective,
        nu: 0.0,
        bound: 0.0,
        expected_size: size,
        trace: run.trace.clone(),
    })
}

/// Refits both regressions on held-out rows with the final group's weights.
pub fn evaluate_linfid_holdout(result: &mut AuditResult, ds_test: &Dataset, cfg: &LinFidConfig) -> Result<()> {
    let theta = result.group.theta_vector();
    if theta.len() != ds_test.sensitive_matrix().ncols() {
        return Err(AuditError::dim("subgroup parameters", ds_test.sensitive_matrix().ncols(), theta.len()));
    }
    let w = eval_weights(&SoftGroup::new(theta), ds_test.sensitive_matrix(), cfg.eval_mode)?;
    result.size_test = Some(group_size(&w));
    if w.sum() > 0.0 {
        let (g, p) = coefficient_pair(ds_test, cfg.target_feature, &w, cfg.ridge_eps)?;
        result.fid_test = Some((g - p).abs());
        result.avg_fid_test = Some((g - p).abs());
        result.signed_avg_fid_test = Some(g - p);
        result.group_mean_test = Some(g);
        result.population_mean_test = Some(p);
    }
    Ok(())
}

/// Optimizes the configured direction(s) on `train`, keeping the larger
/// train disparity among in-band results, then scores it on `test`.
pub fn optimize_linfid(train: &Dataset, test: Option<&Dataset>, cfg: &LinFidConfig) -> Result<AuditResult> {
    let directions: &[Direction] = match cfg.direction {
        Some(Direction::Maximize) => &[Direction::Maximize],
        Some(Direction::Minimize) => &[Direction::Minimize],
        None => &[Direction::Maximize, Direction::Minimize],
    };
    let mut best: Option<AuditResult> = None;
    for &dir in directions {
        let run = optimize_direction(train, cfg, dir)?;
        let res = describe(train, cfg, &run)?;
        let better = match &best {
            None => true,
            Some(b) => (res.in_band, res.avg_fid_train) > (b.in_band, b.avg_fid_train),
        };
        if better {
            best = Some(res);
        }
    }
    let mut best = best.expect("at least one direction");
    if let Some(test) = test {
        evaluate_linfid_holdout(&mut best, test, cfg)?;
    }
    Ok(best)
}

/// Two regression regimes of `n` rows: `y = 2x` where `s = 0` and `y = −2x`
/// where `s = 1`, with `x` symmetric in each regime so the pooled slope is 0.
pub fn two_regime_fixture(n: usize) -> Result<Dataset> {
    let half = n / 2;
    let s = DMatrix::from_fn(n, 1, |i, _| (i >= half) as u8 as f64);
    let x = DMatrix::from_fn(n, 1, |i, _| {
        let k = i % half.max(1);
        let mag = 1.0 + (k / 2) as f64 / half.max(1) as f64;
        if k.is_multiple_of(2) {
            mag
        } else {
            -mag
        }
    });
    let y = DVector::from_fn(n, |i, _| if s[(i, 0)] == 0.0 { 2.0 * x[(i, 0)] } else { -2.0 * x[(i, 0)] });
    Dataset::from_blocks(&s, &["s"], &x, &["x"], &y)
}
