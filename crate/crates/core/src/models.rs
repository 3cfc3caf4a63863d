//! Logistic regression (the differentiable classifier behind gradient
//! saliency) and ridge-regularized weighted least squares.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

pub const DEFAULT_LOGISTIC_LR: f64 = 0.1;
pub const DEFAULT_LOGISTIC_EPOCHS: usize = 500;
pub const DEFAULT_RIDGE_EPS: f64 = 1e-6;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub training_loss_trace: Vec<f64>,
}

impl LogisticModel {
    pub fn new(weights: DVector<f64>, intercept: f64) -> Self {
        Self {
            weights,
            intercept,
            training_loss_trace: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        predict_proba(self, x)
    }
}

pub fn predict_proba(model: &LogisticModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != model.dim() {
        return Err(AuditError::dim("predict_proba columns", model.dim(), x.ncols()));
    }
    let mut z = x * &model.weights;
    z.add_scalar_mut(model.intercept);
    Ok(z.map(sigmoid))
}

/// Mean negative log-likelihood and its gradient with respect to
/// `(weights, intercept)`.
pub fn logistic_loss_and_grad(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &DVector<f64>,
    intercept: f64,
) -> (f64, DVector<f64>, f64) {
    let n = x.nrows() as f64;
    let mut z = x * weights;
    z.add_scalar_mut(intercept);
    let mut loss = 0.0;
    let mut resid = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let zi = z[i];
        // log(1 + e^z) - y z, computed stably
        let softplus = if zi > 0.0 {
            zi + (-zi).exp().ln_1p()
        } else {
            zi.exp().ln_1p()
        };
        loss += softplus - y[i] * zi;
        resid[i] = sigmoid(zi) - y[i];
    }
    let grad_w = x.tr_mul(&resid) / n;
    let grad_b = resid.sum() / n;
    (loss / n, grad_w, grad_b)
}

/// Full-batch gradient descent on the logistic loss.
///
/// Columns are z-scored internally and the fitted parameters are mapped back
/// to the raw feature scale. The step size starts at `lr` and is halved
/// whenever a step would increase the loss, so the recorded trace is
/// non-increasing.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<LogisticModel> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(AuditError::dim("logistic labels", n, y.len()));
    }
    if n < 2 {
        return Err(AuditError::Config("logistic regression needs at least 2 rows".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AuditError::Config("logistic labels must be 0/1".into()));
    }
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == n {
        return Err(AuditError::DegenerateLabels);
    }
    if !(lr > 0.0) {
        return Err(AuditError::Config(format!("learning rate must be positive, got {lr}")));
    }

    let mut mean = DVector::zeros(d);
    let mut scale = DVector::from_element(d, 1.0);
    for j in 0..d {
        let c = x.column(j);
        let m = c.sum() / n as f64;
        let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        if var > 0.0 {
            scale[j] = var.sqrt();
        }
    }
    let xs = DMatrix::from_fn(n, d, |i, j| (x[(i, j)] - mean[j]) / scale[j]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let mut w = DVector::from_fn(d, |_, _| normal.sample(&mut rng));
    let mut b = 0.0;
    let mut step = lr;
    let (mut loss, mut gw, mut gb) = logistic_loss_and_grad(&xs, y, &w, b);
    let mut trace = Vec::with_capacity(epochs + 1);
    trace.push(loss);
    for _ in 0..epochs {
        loop {
            let w_new = &w - &gw * step;
            let b_new = b - gb * step;
            let (l_new, gw_new, gb_new) = logistic_loss_and_grad(&xs, y, &w_new, b_new);
            if l_new <= loss || step < 1e-12 {
                if l_new <= loss {
                    w = w_new;
                    b = b_new;
                    loss = l_new;
                    gw = gw_new;
                    gb = gb_new;
                }
                break;
            }
            step *= 0.5;
        }
        trace.push(loss);
    }

    let weights = w.component_div(&scale);
    let intercept = b - weights.dot(&mean);
    if !weights.iter().all(|v| v.is_finite()) || !intercept.is_finite() {
        return Err(AuditError::NonFinite("logistic weights".into()));
    }
    Ok(LogisticModel {
        weights,
        intercept,
        training_loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCoefficients {
    pub theta: DVector<f64>,
    pub ridge_eps: f64,
}

fn check_wls_inputs(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, eps: f64) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(AuditError::dim("wls targets", x.nrows(), y.len()));
    }
    if w.len() != x.nrows() {
        return Err(AuditError::dim("wls weights", x.nrows(), w.len()));
    }
    if !(eps >= 0.0) {
        return Err(AuditError::Config(format!("ridge eps must be >= 0, got {eps}")));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(AuditError::Config("wls weights must be finite and non-negative".into()));
    }
    Ok(())
}

/// `XᵀWX + εI` assembled without materialising `W`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(*wi);
    }
    let mut a = x.tr_mul(&xw);
    for k in 0..a.ncols() {
        a[(k, k)] += eps;
    }
    a
}

pub(crate) fn factor(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let d = a.nrows();
    let max_diag = (0..d).map(|k| a[(k, k)].abs()).fold(0.0, f64::max);
    let chol = Cholesky::new(a)
        .ok_or_else(|| AuditError::Singular("normal equations are not positive definite".into()))?;
    // Cholesky of a numerically rank-deficient Gram matrix can "succeed"
    // with vanishing pivots.
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if max_diag == 0.0 || min_pivot * min_pivot <= max_diag * 1e-14 {
        return Err(AuditError::Singular("normal equations are numerically singular".into()));
    }
    Ok(chol)
}

/// Minimizes `Σ wᵢ(θ·xᵢ − yᵢ)² + ε‖θ‖²` by Cholesky on the regularized
/// normal equations `(XᵀWX + εI) θ = XᵀWy`.
pub fn fit_wls(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    eps: f64,
) -> Result<LinearCoefficients> {
    check_wls_inputs(x, y, w, eps)?;
    let a = weighted_gram(x, w, eps);
    let rhs = x.tr_mul(&y.component_mul(w));
    let theta = factor(a)?.solve(&rhs);
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(AuditError::NonFinite("wls coefficients".into()));
    }
    Ok(LinearCoefficients {
        theta,
        ridge_eps: eps,
    })
}

/// Ridge regression with unit weights and a fixed design, factored once so
/// that many right-hand sides can be fit cheaply.
#[derive(Debug, Clone)]
pub struct PreparedRidge {
    design: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    eps: f64,
}

impl PreparedRidge {
    pub fn new(design: &DMatrix<f64>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(AuditError::Config(format!("ridge eps must be >= 0, got {eps}")));
        }
        let ones = DVector::from_element(design.nrows(), 1.0);
        let chol = factor(weighted_gram(design, &ones, eps))?;
        Ok(Self {
            design: design.clone(),
            chol,
            eps,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn fit(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.design.nrows() {
            return Err(AuditError::dim("ridge targets", self.design.nrows(), y.len()));
        }
        Ok(self.chol.solve(&self.design.tr_mul(y)))
    }
}
