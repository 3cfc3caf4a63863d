//! Rich subgroups as linear functions over the sensitive block.

use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::importance::ImportanceMatrix;
use crate::models::sigmoid;

/// Anything that assigns each row a membership weight in `[0, 1]`.
pub trait Membership {
    fn theta(&self) -> &DVector<f64>;

    fn weight(&self, score: f64) -> f64;

    fn membership(&self, sensitive: &DMatrix<f64>) -> Result<DVector<f64>> {
        let theta = self.theta();
        if sensitive.ncols() != theta.len() {
            return Err(AuditError::dim("subgroup dimension", theta.len(), sensitive.ncols()));
        }
        Ok((sensitive * theta).map(|s| self.weight(s)))
    }
}

/// Hard threshold group `1{θ·x > 0}`; ties are non-members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGroup {
    pub theta: DVector<f64>,
}

impl ThresholdGroup {
    pub fn new(theta: DVector<f64>) -> Self {
        Self { theta }
    }

    /// Group containing every row (positive weight on the bias column only).
    pub fn everyone(d_sens: usize) -> Self {
        let mut theta = DVector::zeros(d_sens);
        theta[d_sens - 1] = 1.0;
        Self { theta }
    }
}

impl Membership for ThresholdGroup {
    fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    fn weight(&self, score: f64) -> f64 {
        if score > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Sigmoid membership `σ(θ·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftGroup {
    pub theta: DVector<f64>,
}

impl SoftGroup {
    pub fn new(theta: DVector<f64>) -> Self {
        Self { theta }
    }

    /// The hard group obtained by thresholding membership at 0.5.
    pub fn harden(&self) -> ThresholdGroup {
        ThresholdGroup::new(self.theta.clone())
    }
}

impl Membership for SoftGroup {
    fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    fn weight(&self, score: f64) -> f64 {
        sigmoid(score)
    }
}

/// A finite mixture over threshold groups.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub members: Vec<(ThresholdGroup, f64)>,
}

impl GroupDistribution {
    /// Uniform mixture over the given groups.
    pub fn uniform(groups: Vec<ThresholdGroup>) -> Self {
        let w = 1.0 / groups.len().max(1) as f64;
        Self {
            members: groups.into_iter().map(|g| (g, w)).collect(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.members.iter().map(|(_, w)| w).sum()
    }

    /// Expected membership per row.
    pub fn membership(&self, sensitive: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(sensitive.nrows());
        for (g, w) in &self.members {
            out.axpy(*w, &g.membership(sensitive)?, 1.0);
        }
        Ok(out)
    }
}

/// Group size as a fraction of rows.
pub fn group_size(w: &DVector<f64>) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.sum() / w.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidValue {
    /// `|Σ wᵢ Mᵢⱼ − Σ Mᵢⱼ|`.
    pub fid: f64,
    /// `|mean_g − mean_X|`.
    pub avg_fid: f64,
    /// `mean_g − mean_X`, kept for sign comparisons.
    pub signed_avg: f64,
    pub group_mean: f64,
    pub population_mean: f64,
}

/// FID and AVG-FID of feature `j` for membership weights `w`. Errors with
/// [`AuditError::EmptyGroup`] when `Σw = 0`; use [`fid_sum`] when only the
/// unaveraged form is needed.
pub fn fid_value(m: &ImportanceMatrix, j: usize, w: &DVector<f64>) -> Result<FidValue> {
    let col = checked_column(m, j, w)?;
    let total: f64 = col.iter().sum();
    let weighted = col.dot(w);
    let mass = w.sum();
    if mass <= 0.0 {
        return Err(AuditError::EmptyGroup);
    }
    let group_mean = weighted / mass;
    let population_mean = total / col.len() as f64;
    Ok(FidValue {
        fid: (weighted - total).abs(),
        avg_fid: (group_mean - population_mean).abs(),
        signed_avg: group_mean - population_mean,
        group_mean,
        population_mean,
    })
}

/// `|Σ wᵢ Mᵢⱼ − Σ Mᵢⱼ|`, defined for any weights.
pub fn fid_sum(m: &ImportanceMatrix, j: usize, w: &DVector<f64>) -> Result<f64> {
    let col = checked_column(m, j, w)?;
    Ok((col.dot(w) - col.sum()).abs())
}

fn checked_column(m: &ImportanceMatrix, j: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
    if j >= m.n_features() {
        return Err(AuditError::dim("feature index bound", m.n_features(), j));
    }
    if w.len() != m.aligned_rows() {
        return Err(AuditError::dim("membership length", m.aligned_rows(), w.len()));
    }
    Ok(m.column(j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Hard,
    Soft,
}

/// Serialized subgroup: `{"theta": [...], "kind": "hard"|"soft",
/// "sensitive_feature_names": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub theta: Vec<f64>,
    pub kind: GroupKind,
    pub sensitive_feature_names: Vec<String>,
}

impl SubgroupSpec {
    pub fn hard(g: &ThresholdGroup, names: Vec<String>) -> Self {
        Self {
            theta: g.theta.iter().copied().collect(),
            kind: GroupKind::Hard,
            sensitive_feature_names: names,
        }
    }

    pub fn soft(g: &SoftGroup, names: Vec<String>) -> Self {
        Self {
            theta: g.theta.iter().copied().collect(),
            kind: GroupKind::Soft,
            sensitive_feature_names: names,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| AuditError::io(path, e))?;
        Ok(serde_json::from_reader(file)?)
    }

    /// Validates against the sensitive block names of a dataset.
    pub fn check_names(&self, expected: &[String]) -> Result<()> {
        if self.theta.len() != expected.len() {
            return Err(AuditError::dim("subgroup theta", expected.len(), self.theta.len()));
        }
        if self.sensitive_feature_names.len() != self.theta.len() {
            return Err(AuditError::dim(
                "subgroup feature names",
                self.theta.len(),
                self.sensitive_feature_names.len(),
            ));
        }
        if self.sensitive_feature_names != expected {
            return Err(AuditError::Alignment(
                "subgroup sensitive feature names differ from the dataset".into(),
            ));
        }
        Ok(())
    }

    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    /// Hard membership: soft groups are thresholded at 0.5.
    pub fn hard_membership(&self, sensitive: &DMatrix<f64>) -> Result<DVector<f64>> {
        ThresholdGroup::new(self.theta_vector()).membership(sensitive)
    }

    pub fn membership(&self, sensitive: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self.kind {
            GroupKind::Hard => ThresholdGroup::new(self.theta_vector()).membership(sensitive),
            GroupKind::Soft => SoftGroup::new(self.theta_vector()).membership(sensitive),
        }
    }

    /// Indices of the `k` largest-magnitude coefficients, bias excluded.
    pub fn top_coefficients(&self, k: usize) -> Vec<(String, f64)> {
        let d = self.theta.len().saturating_sub(1);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| {
            self.theta[b]
                .abs()
                .partial_cmp(&self.theta[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .take(k)
            .map(|i| (self.sensitive_feature_names[i].clone(), self.theta[i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Notion;

    fn fixture() -> DMatrix<f64> {
        // binary column, numeric column, bias
        DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 1.0, 0.0, -1.0, 1.0, 1.0, 0.5, 1.0, 0.0, 3.0, 1.0])
    }

    fn imp(col: &[f64]) -> ImportanceMatrix {
        ImportanceMatrix::new(DMatrix::from_column_slice(col.len(), 1, col), Notion::External, vec!["f".into()])
            .unwrap()
    }

    #[test]
    fn zero_theta_is_empty_group() {
        let g = ThresholdGroup::new(DVector::zeros(3));
        assert!(g.membership(&fixture()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_bias_is_everyone() {
        let g = ThresholdGroup::everyone(3);
        assert!(g.membership(&fixture()).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_vector_on_binary_column_with_offset_is_indicator() {
        // e_k alone: ties at 0 are excluded, so the indicator is recovered
        let g = ThresholdGroup::new(DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let w = g.membership(&fixture()).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn soft_membership_in_open_interval() {
        let g = SoftGroup::new(DVector::from_vec(vec![3.0, -1.0, 0.2]));
        let w = g.membership(&fixture()).unwrap();
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = SoftGroup::new(DVector::zeros(3)).membership(&fixture()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn membership_dimension_mismatch() {
        let g = ThresholdGroup::new(DVector::zeros(2));
        assert!(matches!(g.membership(&fixture()), Err(AuditError::Dimension { .. })));
    }

    #[test]
    fn sizes() {
        assert_eq!(group_size(&DVector::from_element(10, 1.0)), 1.0);
        assert_eq!(group_size(&DVector::zeros(10)), 0.0);
        assert_eq!(group_size(&DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0])), 0.5);
    }

    #[test]
    fn avg_fid_of_population_is_zero() {
        let m = imp(&[0.3, -1.0, 2.0, 0.1]);
        let v = fid_value(&m, 0, &DVector::from_element(4, 1.0)).unwrap();
        assert_eq!(v.avg_fid, 0.0);
        assert_eq!(v.fid, 0.0);
    }

    #[test]
    fn avg_fid_of_constant_column_is_zero() {
        let m = imp(&[0.7; 4]);
        let v = fid_value(&m, 0, &DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!(v.avg_fid.abs() < 1e-15);
    }

    #[test]
    fn avg_fid_hand_fixture() {
        let m = imp(&[1.0, -1.0, 0.0, 0.0]);
        let v = fid_value(&m, 0, &DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(v.avg_fid, 1.0);
        assert_eq!(v.signed_avg, 1.0);
    }

    #[test]
    fn empty_group_avg_is_undefined_but_fid_is_defined() {
        let m = imp(&[1.0, 2.0]);
        let w = DVector::zeros(2);
        assert!(matches!(fid_value(&m, 0, &w), Err(AuditError::EmptyGroup)));
        assert_eq!(fid_sum(&m, 0, &w).unwrap(), 3.0);
    }

    #[test]
    fn distribution_membership_is_weighted_mean() {
        let d = GroupDistribution::uniform(vec![
            ThresholdGroup::everyone(3),
            ThresholdGroup::new(DVector::zeros(3)),
        ]);
        assert_eq!(d.total_weight(), 1.0);
        assert!(d.membership(&fixture()).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spec_json_shape() {
        let spec = SubgroupSpec::hard(
            &ThresholdGroup::new(DVector::from_vec(vec![1.0, -2.0, 0.5])),
            vec!["a".into(), "b".into(), "bias".into()],
        );
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["kind"], "hard");
        assert_eq!(json["theta"][1], -2.0);
        let back: SubgroupSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.top_coefficients(1), vec![("b".to_string(), -2.0)]);
    }
}
