//! Cost-sensitive classification over threshold groups via two ridge
//! regressions: predict each label's cost from the sensitive features and
//! include a row when the predicted cost of excluding it is larger.

use nalgebra::{DMatrix, DVector};

use crate::error::{AuditError, Result};
use crate::models::{PreparedRidge, DEFAULT_RIDGE_EPS};
use crate::subgroup::ThresholdGroup;

/// Per-row costs of labeling 0 (`c0`) and 1 (`c1`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostPair {
    pub c0: DVector<f64>,
    pub c1: DVector<f64>,
}

impl CostPair {
    pub fn new(c0: DVector<f64>, c1: DVector<f64>) -> Result<Self> {
        if c0.len() != c1.len() {
            return Err(AuditError::dim("cost vectors", c0.len(), c1.len()));
        }
        if c0.iter().chain(c1.iter()).any(|v| !v.is_finite()) {
            return Err(AuditError::NonFinite("csc costs".into()));
        }
        Ok(Self { c0, c1 })
    }

    /// Zero cost for excluding, `c1` for including.
    pub fn include_only(c1: DVector<f64>) -> Result<Self> {
        Self::new(DVector::zeros(c1.len()), c1)
    }

    pub fn len(&self) -> usize {
        self.c0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c0.is_empty()
    }

    /// `Σ gᵢ c1ᵢ + (1 − gᵢ) c0ᵢ`.
    pub fn total_cost(&self, membership: &DVector<f64>) -> f64 {
        membership
            .iter()
            .zip(self.c0.iter().zip(self.c1.iter()))
            .map(|(g, (c0, c1))| g * c1 + (1.0 - g) * c0)
            .sum()
    }
}

/// The regression oracle with its design factored once; reused across the
/// many calls a search makes against the same sensitive block.
#[derive(Debug, Clone)]
pub struct CscOracle {
    ridge: PreparedRidge,
}

impl CscOracle {
    pub fn new(sensitive: &DMatrix<f64>, eps: f64) -> Result<Self> {
        Ok(Self {
            ridge: PreparedRidge::new(sensitive, eps)?,
        })
    }

    pub fn sensitive(&self) -> &DMatrix<f64> {
        self.ridge.design()
    }

    /// Ridge coefficients regressing `costs` on the sensitive block.
    pub fn fit_costs(&self, costs: &DVector<f64>) -> Result<DVector<f64>> {
        self.ridge.fit(costs)
    }

    pub fn best_response(&self, costs: &CostPair) -> Result<ThresholdGroup> {
        if costs.len() != self.ridge.design().nrows() {
            return Err(AuditError::dim("csc costs", self.ridge.design().nrows(), costs.len()));
        }
        let r0 = self.ridge.fit(&costs.c0)?;
        let r1 = self.ridge.fit(&costs.c1)?;
        Ok(ThresholdGroup::new(r0 - r1))
    }
}

/// One-shot oracle call: fits ridge regressors on `(S, c0)` and `(S, c1)`
/// and returns `g(x) = 1{(r0 − r1)(x) > 0}`.
pub fn csc_best_response(sensitive: &DMatrix<f64>, costs: &CostPair, eps: f64) -> Result<ThresholdGroup> {
    CscOracle::new(sensitive, eps)?.best_response(costs)
}

/// [`csc_best_response`] with the default ridge strength.
pub fn csc_default(sensitive: &DMatrix<f64>, costs: &CostPair) -> Result<ThresholdGroup> {
    csc_best_response(sensitive, costs, DEFAULT_RIDGE_EPS)
}
