//! Classifier fairness metrics on a subgroup relative to the population.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BINS: usize = 10;

/// Each delta is the metric on the group minus the metric on all rows.
/// `None` when the group (or population) lacks the label the rate needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub pos_rate_delta: f64,
    pub tpr_delta: Option<f64>,
    pub fpr_delta: Option<f64>,
    pub ece_delta: f64,
    pub group_size: f64,
    pub n_group: usize,
}

/// Metrics on one set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pos_rate: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub ece: f64,
}

fn metrics(probs: &[f64], labels: &[f64], threshold: f64, bins: usize) -> Metrics {
    let n = probs.len() as f64;
    let mut predicted = 0usize;
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    let mut count = vec![0usize; bins];
    let mut hits = vec![0.0f64; bins];
    let mut conf = vec![0.0f64; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let yhat = p >= threshold;
        predicted += yhat as usize;
        if y == 1.0 {
            pos += 1;
            tp += yhat as usize;
        } else {
            neg += 1;
            fp += yhat as usize;
        }
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        hits[b] += y;
        conf[b] += p;
    }
    let ece = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum();
    Metrics {
        pos_rate: predicted as f64 / n,
        tpr: (pos > 0).then(|| tp as f64 / pos as f64),
        fpr: (neg > 0).then(|| fp as f64 / neg as f64),
        ece,
    }
}

fn check_inputs(probs: &DVector<f64>, labels: &DVector<f64>, threshold: f64, bins: usize) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(AuditError::dim("fairness labels", probs.len(), labels.len()));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(AuditError::Config("probabilities must lie in [0, 1]".into()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(AuditError::Config("fairness labels must be 0/1".into()));
    }
    if bins == 0 || !threshold.is_finite() {
        return Err(AuditError::Config("bins must be positive and threshold finite".into()));
    }
    Ok(())
}

/// Metrics restricted to rows with `w > 0.5`.
pub fn group_metrics(
    probs: &DVector<f64>,
    labels: &DVector<f64>,
    w: &DVector<f64>,
    threshold: f64,
    bins: usize,
) -> Result<Metrics> {
    check_inputs(probs, labels, threshold, bins)?;
    if w.len() != probs.len() {
        return Err(AuditError::dim("fairness membership", probs.len(), w.len()));
    }
    let rows: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.5).collect();
    if rows.is_empty() {
        return Err(AuditError::EmptyGroup);
    }
    let p: Vec<f64> = rows.iter().map(|&i| probs[i]).collect();
    let y: Vec<f64> = rows.iter().map(|&i| labels[i]).collect();
    Ok(metrics(&p, &y, threshold, bins))
}

/// Ŷ rate, TPR, FPR and equal-width-binned ECE on the group minus the same
/// on all rows. Soft memberships are thresholded at 0.5.
pub fn fairness_deltas(
    probs: &DVector<f64>,
    labels: &DVector<f64>,
    w: &DVector<f64>,
    threshold: f64,
    bins: usize,
) -> Result<FairnessReport> {
    let g = group_metrics(probs, labels, w, threshold, bins)?;
    let all = metrics(probs.as_slice(), labels.as_slice(), threshold, bins);
    let n_group = w.iter().filter(|&&v| v > 0.5).count();
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    Ok(FairnessReport {
        pos_rate_delta: g.pos_rate - all.pos_rate,
        tpr_delta: diff(g.tpr, all.tpr),
        fpr_delta: diff(g.fpr, all.fpr),
        ece_delta: g.ece - all.ece,
        group_size: n_group as f64 / w.len() as f64,
        n_group,
    })
}
