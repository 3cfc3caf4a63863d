//! Tabular dataset loading with a declared sensitive/safe column schema.
//!
//! Columns are encoded in schema order: numeric and binary columns map to one
//! encoded column each, categorical columns expand to one indicator column per
//! level (levels sorted, no reference level dropped). The sensitive block used
//! by subgroup functions carries an extra trailing constant-1 column so that
//! threshold groups can express offsets.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Name given to the constant column appended to the sensitive block.
pub const BIAS_COLUMN: &str = "bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Binary,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub sensitive: bool,
    #[serde(default)]
    pub target: bool,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
            sensitive: false,
            target: false,
        }
    }

    pub fn sensitive(mut self) -> Self {
        self.sensitive = true;
        self
    }

    pub fn target(mut self) -> Self {
        self.target = true;
        self
    }
}

/// Checks the schema invariants: exactly one target, at least one sensitive
/// column, unique names, and a target that is not also sensitive.
pub fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    let targets = schema.iter().filter(|c| c.target).count();
    if targets != 1 {
        return Err(AuditError::Schema(format!(
            "expected exactly one target column, found {targets}"
        )));
    }
    if !schema.iter().any(|c| c.sensitive && !c.target) {
        return Err(AuditError::Schema(
            "at least one non-target column must be sensitive".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for c in schema {
        if !seen.insert(c.name.as_str()) {
            return Err(AuditError::Schema(format!("duplicate column `{}`", c.name)));
        }
        if c.target && c.sensitive {
            return Err(AuditError::Schema(format!(
                "target column `{}` cannot be sensitive",
                c.name
            )));
        }
    }
    Ok(())
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Vec<ColumnSchema>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AuditError::io(path, e))?;
    let schema: Vec<ColumnSchema> = serde_json::from_reader(file)?;
    validate_schema(&schema)?;
    Ok(schema)
}

/// One encoded (model-facing) column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    /// Original column name.
    pub source: String,
    pub kind: ColumnKind,
    pub sensitive: bool,
    /// Category level for one-hot columns.
    pub level: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    sensitive: DMatrix<f64>,
    labels: DVector<f64>,
    columns: Vec<EncodedColumn>,
    sensitive_cols: Vec<usize>,
    safe_cols: Vec<usize>,
    encoding_map: Vec<(String, Vec<usize>)>,
    target_name: String,
    row_ids: Vec<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &[ColumnSchema]) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AuditError::io(path, e))?;
    Dataset::from_csv_reader(file, schema).map_err(|e| match e {
        AuditError::EmptyDataset(_) => AuditError::EmptyDataset(path.to_path_buf()),
        other => other,
    })
}

fn parse_real(raw: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = raw.trim().parse().map_err(|_| AuditError::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(AuditError::Parse {
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(value)
}

fn parse_binary(raw: &str, row: usize, column: &str) -> Result<f64> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Ok(1.0),
        "0" | "0.0" | "false" => Ok(0.0),
        _ => Err(AuditError::Parse {
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not a binary value (0/1/true/false)"),
        }),
    }
}

impl Dataset {
    /// Reads comma-separated text with a header row. Row order is preserved.
    pub fn from_csv_reader<R: Read>(reader: R, schema: &[ColumnSchema]) -> Result<Self> {
        validate_schema(schema)?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut positions = Vec::with_capacity(schema.len());
        for col in schema {
            let pos = header.iter().position(|h| h == col.name).ok_or_else(|| {
                AuditError::Schema(format!("column `{}` missing from header", col.name))
            })?;
            positions.push(pos);
        }

        let mut raw: Vec<Vec<String>> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row: Vec<String> = positions
                .iter()
                .map(|&p| record.get(p).unwrap_or("").to_string())
                .collect();
            raw.push(row);
        }
        if raw.is_empty() {
            return Err(AuditError::EmptyDataset("<reader>".into()));
        }
        Self::encode(schema, &raw)
    }

    fn encode(schema: &[ColumnSchema], raw: &[Vec<String>]) -> Result<Self> {
        let n = raw.len();
        let mut columns = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut encoding_map = Vec::new();
        let mut labels = Vec::with_capacity(n);
        let mut target_name = String::new();

        for (c, col) in schema.iter().enumerate() {
            if col.target {
                target_name = col.name.clone();
                for (i, row) in raw.iter().enumerate() {
                    labels.push(parse_real(&row[c], i, &col.name)?);
                }
                continue;
            }
            let start = columns.len();
            match col.kind {
                ColumnKind::Numeric | ColumnKind::Binary => {
                    let mut v = Vec::with_capacity(n);
                    for (i, row) in raw.iter().enumerate() {
                        v.push(if col.kind == ColumnKind::Numeric {
                            parse_real(&row[c], i, &col.name)?
                        } else {
                            parse_binary(&row[c], i, &col.name)?
                        });
                    }
                    values.push(v);
                    columns.push(EncodedColumn {
                        name: col.name.clone(),
                        source: col.name.clone(),
                        kind: col.kind,
                        sensitive: col.sensitive,
                        level: None,
                    });
                }
                ColumnKind::Categorical => {
                    let levels: BTreeSet<&str> = raw.iter().map(|r| r[c].as_str()).collect();
                    if levels.len() == 1 {
                        log::warn!(
                            "categorical column `{}` has a single level; its indicator is constant",
                            col.name
                        );
                    }
                    for level in levels {
                        values.push(
                            raw.iter()
                                .map(|r| if r[c] == level { 1.0 } else { 0.0 })
                                .collect(),
                        );
                        columns.push(EncodedColumn {
                            name: format!("{}={}", col.name, level),
                            source: col.name.clone(),
                            kind: ColumnKind::Categorical,
                            sensitive: col.sensitive,
                            level: Some(level.to_string()),
                        });
                    }
                }
            }
            encoding_map.push((col.name.clone(), (start..columns.len()).collect()));
        }

        let d = columns.len();
        let features = DMatrix::from_fn(n, d, |i, j| values[j][i]);
        Ok(Self::assemble(
            features,
            DVector::from_vec(labels),
            columns,
            encoding_map,
            target_name,
            (0..n).collect(),
        ))
    }

    fn assemble(
        features: DMatrix<f64>,
        labels: DVector<f64>,
        columns: Vec<EncodedColumn>,
        encoding_map: Vec<(String, Vec<usize>)>,
        target_name: String,
        row_ids: Vec<usize>,
    ) -> Self {
        let sensitive_cols: Vec<usize> = (0..columns.len())
            .filter(|&j| columns[j].sensitive)
            .collect();
        let safe_cols: Vec<usize> = (0..columns.len())
            .filter(|&j| !columns[j].sensitive)
            .collect();
        let n = features.nrows();
        let ds = sensitive_cols.len();
        let sensitive = DMatrix::from_fn(n, ds + 1, |i, k| {
            if k == ds {
                1.0
            } else {
                features[(i, sensitive_cols[k])]
            }
        });
        Self {
            features,
            sensitive,
            labels,
            columns,
            sensitive_cols,
            safe_cols,
            encoding_map,
            target_name,
            row_ids,
        }
    }

    /// Builds a dataset from already-encoded blocks. Sensitive columns come
    /// first in the feature order, then safe columns. All columns are treated
    /// as numeric unless their values are all 0/1, which marks them binary.
    pub fn from_blocks(
        sensitive: &DMatrix<f64>,
        sensitive_names: &[&str],
        safe: &DMatrix<f64>,
        safe_names: &[&str],
        labels: &DVector<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(AuditError::EmptyDataset("<blocks>".into()));
        }
        if sensitive.nrows() != n {
            return Err(AuditError::dim("sensitive block rows", n, sensitive.nrows()));
        }
        if safe.nrows() != n {
            return Err(AuditError::dim("safe block rows", n, safe.nrows()));
        }
        if sensitive_names.len() != sensitive.ncols() {
            return Err(AuditError::dim(
                "sensitive names",
                sensitive.ncols(),
                sensitive_names.len(),
            ));
        }
        if safe_names.len() != safe.ncols() {
            return Err(AuditError::dim("safe names", safe.ncols(), safe_names.len()));
        }
        if sensitive.ncols() == 0 {
            return Err(AuditError::Schema("at least one sensitive column required".into()));
        }
        let features = DMatrix::from_fn(n, sensitive.ncols() + safe.ncols(), |i, j| {
            if j < sensitive.ncols() {
                sensitive[(i, j)]
            } else {
                safe[(i, j - sensitive.ncols())]
            }
        });
        if features.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(AuditError::NonFinite("dataset blocks".into()));
        }
        let mut columns = Vec::new();
        let names = sensitive_names.iter().chain(safe_names.iter());
        for (j, name) in names.enumerate() {
            let binary = features.column(j).iter().all(|&v| v == 0.0 || v == 1.0);
            columns.push(EncodedColumn {
                name: name.to_string(),
                source: name.to_string(),
                kind: if binary {
                    ColumnKind::Binary
                } else {
                    ColumnKind::Numeric
                },
                sensitive: j < sensitive.ncols(),
                level: None,
            });
        }
        let encoding_map = columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.name.clone(), vec![j]))
            .collect();
        Ok(Self::assemble(
            features,
            labels.clone(),
            columns,
            encoding_map,
            "y".into(),
            (0..n).collect(),
        ))
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Full encoded feature matrix (sensitive and safe columns, schema order).
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Sensitive block with the trailing bias column.
    pub fn sensitive_matrix(&self) -> &DMatrix<f64> {
        &self.sensitive
    }

    pub fn safe_matrix(&self) -> DMatrix<f64> {
        self.features.select_columns(&self.safe_cols)
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn columns(&self) -> &[EncodedColumn] {
        &self.columns
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Names of the sensitive block columns, ending with [`BIAS_COLUMN`].
    pub fn sensitive_feature_names(&self) -> Vec<String> {
        self.sensitive_cols
            .iter()
            .map(|&j| self.columns[j].name.clone())
            .chain(std::iter::once(BIAS_COLUMN.to_string()))
            .collect()
    }

    /// Encoded column index of each sensitive block column (bias excluded).
    pub fn sensitive_columns(&self) -> &[usize] {
        &self.sensitive_cols
    }

    pub fn safe_columns(&self) -> &[usize] {
        &self.safe_cols
    }

    pub fn encoding_map(&self) -> &[(String, Vec<usize>)] {
        &self.encoding_map
    }

    /// Original column name of an encoded column.
    pub fn decode_column(&self, encoded: usize) -> Option<&str> {
        self.encoding_map
            .iter()
            .find(|(_, idx)| idx.contains(&encoded))
            .map(|(name, _)| name.as_str())
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    /// Row ids relative to the originally loaded file.
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    /// Restricts to the given rows (positions in this dataset), keeping order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let features = self.features.select_rows(rows);
        let labels = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.labels[i]));
        Self::assemble(
            features,
            labels,
            self.columns.clone(),
            self.encoding_map.clone(),
            self.target_name.clone(),
            rows.iter().map(|&i| self.row_ids[i]).collect(),
        )
    }

    /// Replaces the labels, e.g. to audit a different target.
    pub fn with_labels(&self, labels: DVector<f64>) -> Result<Dataset> {
        if labels.len() != self.n_rows() {
            return Err(AuditError::dim("labels", self.n_rows(), labels.len()));
        }
        let mut out = self.clone();
        out.labels = labels;
        Ok(out)
    }

    /// Applies a column scaling fitted elsewhere (typically on the train split).
    pub fn standardized(&self, scaling: &ColumnScaling) -> Result<Dataset> {
        if scaling.mean.len() != self.n_features() {
            return Err(AuditError::dim(
                "column scaling",
                self.n_features(),
                scaling.mean.len(),
            ));
        }
        let mut features = self.features.clone();
        for j in 0..features.ncols() {
            let (m, s) = (scaling.mean[j], scaling.std[j]);
            for v in features.column_mut(j).iter_mut() {
                *v = (*v - m) / s;
            }
        }
        Ok(Self::assemble(
            features,
            self.labels.clone(),
            self.columns.clone(),
            self.encoding_map.clone(),
            self.target_name.clone(),
            self.row_ids.clone(),
        ))
    }
}

/// Z-score parameters for numeric columns; binary and one-hot columns keep
/// mean 0 / std 1 so they pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnScaling {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.n_rows() as f64;
        let mut mean = vec![0.0; ds.n_features()];
        let mut std = vec![1.0; ds.n_features()];
        for (j, col) in ds.columns.iter().enumerate() {
            if col.kind != ColumnKind::Numeric {
                continue;
            }
            let c = ds.features.column(j);
            let m = c.sum() / n;
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub fraction: f64,
}

/// 0.8 for datasets with at least 1000 rows, otherwise 0.5.
pub fn default_split_fraction(n: usize) -> f64 {
    if n >= 1000 {
        0.8
    } else {
        0.5
    }
}

/// Uniformly shuffled split; the train side gets `floor(n * fraction)` rows.
/// Both sides keep their rows in original file order.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AuditError::Split(format!(
            "fraction must lie in (0,1), got {fraction}"
        )));
    }
    let n = ds.n_rows();
    let n_train = (n as f64 * fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(AuditError::Split(format!(
            "{n} rows at fraction {fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train_rows = order[..n_train].to_vec();
    let mut test_rows = order[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok(SplitPair {
        train: ds.select_rows(&train_rows),
        test: ds.select_rows(&test_rows),
        seed,
        fraction,
    })
}
