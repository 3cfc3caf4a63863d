//! Per-point local explanation matrices: native gradient saliency and
//! ingestion of externally computed (LIME/SHAP) files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AuditError, Result};
use crate::models::{predict_proba, LogisticModel};

pub const ROW_ID_COLUMN: &str = "row_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Notion {
    Grad,
    Lime,
    Shap,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    values: DMatrix<f64>,
    notion: Notion,
    feature_names: Vec<String>,
}

impl ImportanceMatrix {
    pub fn new(values: DMatrix<f64>, notion: Notion, feature_names: Vec<String>) -> Result<Self> {
        if feature_names.len() != values.ncols() {
            return Err(AuditError::dim(
                "importance feature names",
                values.ncols(),
                feature_names.len(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (i, j) = (pos % values.nrows().max(1), pos / values.nrows().max(1));
            return Err(AuditError::NonFinite(format!("importance entry ({i}, {j})")));
        }
        Ok(Self {
            values,
            notion,
            feature_names,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn notion(&self) -> Notion {
        self.notion
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn aligned_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.values.column(j).into_owned()
    }

    /// Separable dataset-level importance: the column sum.
    pub fn dataset_importance(&self, j: usize) -> f64 {
        self.values.column(j).sum()
    }

    pub fn select_rows(&self, rows: &[usize]) -> ImportanceMatrix {
        Self {
            values: self.values.select_rows(rows),
            notion: self.notion,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Errors unless this matrix is row- and column-aligned with `ds`.
    pub fn check_aligned(&self, ds: &Dataset) -> Result<()> {
        if self.aligned_rows() != ds.n_rows() {
            return Err(AuditError::Alignment(format!(
                "importance has {} rows, dataset has {}",
                self.aligned_rows(),
                ds.n_rows()
            )));
        }
        if self.feature_names != ds.feature_names() {
            return Err(AuditError::Alignment(
                "importance columns differ from dataset feature names".into(),
            ));
        }
        Ok(())
    }

    /// Writes the importance file format: header of feature names preceded
    /// by `row_id`, one row per data point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![ROW_ID_COLUMN.to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.values.nrows() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.values.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| AuditError::io("<importance writer>", e))?;
        Ok(())
    }
}

/// Vanilla gradient of the positive-class probability with respect to each
/// input: `p(1 − p)·w_j` per point.
pub fn grad_saliency(model: &LogisticModel, ds: &Dataset) -> Result<ImportanceMatrix> {
    let p = predict_proba(model, ds.features())?;
    let n = ds.n_rows();
    let values = DMatrix::from_fn(n, model.dim(), |i, j| p[i] * (1.0 - p[i]) * model.weights[j]);
    ImportanceMatrix::new(values, Notion::Grad, ds.feature_names())
}

pub fn load_importance(path: impl AsRef<Path>, ds: &Dataset) -> Result<ImportanceMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AuditError::io(path, e))?;
    read_importance(file, ds)
}

pub fn read_importance<R: Read>(reader: R, ds: &Dataset) -> Result<ImportanceMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let has_row_id = header.first().map(String::as_str) == Some(ROW_ID_COLUMN);
    let names: Vec<String> = header[usize::from(has_row_id)..].to_vec();
    let expected = ds.feature_names();
    if names != expected {
        let first_diff = names
            .iter()
            .zip(expected.iter())
            .position(|(a, b)| a != b)
            .unwrap_or(names.len().min(expected.len()));
        return Err(AuditError::Alignment(format!(
            "header mismatch at column {first_diff}: file has {} feature columns, dataset has {}",
            names.len(),
            expected.len()
        )));
    }
    let d = names.len();
    let mut data = Vec::with_capacity(ds.n_rows() * d);
    let mut rows = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(AuditError::Alignment(format!(
                "row {i} has {} fields, expected {}",
                record.len(),
                header.len()
            )));
        }
        if has_row_id {
            let id: usize = record[0].parse().map_err(|_| {
                AuditError::Alignment(format!("row {i}: row_id `{}` is not an integer", &record[0]))
            })?;
            if id != i {
                return Err(AuditError::Alignment(format!("row {i} carries row_id {id}")));
            }
        }
        for (k, field) in record.iter().skip(usize::from(has_row_id)).enumerate() {
            let v: f64 = field.parse().map_err(|_| AuditError::Parse {
                row: i,
                column: names[k].clone(),
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(AuditError::NonFinite(format!("importance row {i}, column `{}`", names[k])));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != ds.n_rows() {
        return Err(AuditError::Alignment(format!(
            "importance file has {rows} rows, dataset has {}",
            ds.n_rows()
        )));
    }
    let values = DMatrix::from_row_slice(rows, d, &data);
    ImportanceMatrix::new(values, Notion::External, names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceStats {
    /// Mean absolute importance per feature, μ(f_j).
    pub mu_abs: Vec<f64>,
    pub mean: Vec<f64>,
}

pub fn importance_stats(m: &ImportanceMatrix) -> ImportanceStats {
    let n = m.aligned_rows().max(1) as f64;
    let mut mu_abs = Vec::with_capacity(m.n_features());
    let mut mean = Vec::with_capacity(m.n_features());
    for col in m.values.column_iter() {
        mu_abs.push(col.iter().map(|v| v.abs()).sum::<f64>() / n);
        mean.push(col.sum() / n);
    }
    ImportanceStats { mu_abs, mean }
}
