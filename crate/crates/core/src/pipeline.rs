//! End-to-end audit runs: load, split, compute or ingest importance, search
//! every selected feature over every size band, and write reports.
//!
//! Output layout under the run directory:
//!
//! ```text
//! report.json                       every feature's per-band results
//! summary.csv                       best band per feature, by held-out AVG-FID
//! log_ratio.csv                     |log10(group mean / population mean)|
//! features/feature_NNN/range_LO-HI.json
//! features/feature_NNN/range_LO-HI.trace.jsonl
//! ```
//!
//! No file carries a timestamp, so a rerun with the same manifest rewrites
//! identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_split_fraction, load_dataset, load_schema, split, Dataset, SplitPair};
use crate::error::{AuditError, Result};
use crate::fairness::{fairness_deltas, FairnessReport, DEFAULT_BINS, DEFAULT_THRESHOLD};
use crate::importance::{grad_saliency, load_importance, ImportanceMatrix};
use crate::linfid::{optimize_linfid, LinFidConfig};
use crate::models::{fit_logistic, LogisticModel, DEFAULT_LOGISTIC_EPOCHS, DEFAULT_LOGISTIC_LR};
use crate::search::{avg_fid_sweep, AuditData, AuditResult, Direction, SearchTuning, DEFAULT_RANGES};
use crate::subgroup::{fid_value, group_size, SubgroupSpec};

const TOP_COEFFICIENTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "path")]
pub enum ImportanceSource {
    Grad,
    File(PathBuf),
}

impl FromStr for ImportanceSource {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" | "GRAD" => Ok(Self::Grad),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(AuditError::Config(format!(
                    "importance source must be `grad` or `file:PATH`, got `{s}`"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSelection {
    All,
    /// Encoded feature names.
    List(Vec<String>),
}

impl FromStr for FeatureSelection {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::All);
        }
        let names: Vec<String> = s.split(',').map(|f| f.trim().to_string()).filter(|f| !f.is_empty()).collect();
        if names.is_empty() {
            return Err(AuditError::Config("empty feature list".into()));
        }
        Ok(Self::List(names))
    }
}

impl FeatureSelection {
    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        match self {
            Self::All => Ok((0..names.len()).collect()),
            Self::List(wanted) => wanted
                .iter()
                .map(|w| {
                    names
                        .iter()
                        .position(|n| n == w)
                        .ok_or_else(|| AuditError::Config(format!("unknown feature `{w}`")))
                })
                .collect(),
        }
    }
}

/// Parses `"0.01-0.05,0.05-0.1"`.
pub fn parse_ranges(s: &str) -> Result<Vec<(f64, f64)>> {
    let bad = |part: &str| AuditError::Config(format!("size band must look like `LO-HI`, got `{part}`"));
    let ranges = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let (lo, hi) = part.split_once('-').ok_or_else(|| bad(part))?;
            let lo: f64 = lo.trim().parse().map_err(|_| bad(part))?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad(part))?;
            Ok((lo, hi))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_ranges(&ranges)?;
    Ok(ranges)
}

pub fn validate_ranges(ranges: &[(f64, f64)]) -> Result<()> {
    if ranges.is_empty() {
        return Err(AuditError::Config("at least one size band is required".into()));
    }
    for &(lo, hi) in ranges {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(AuditError::Config(format!("invalid size band [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Options specific to linear (LIN-FID) runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOptions {
    pub lambda_size: f64,
    pub lambda_coef: f64,
    pub lr: f64,
    pub max_iters: usize,
}

impl Default for LinearOptions {
    fn default() -> Self {
        let d = LinFidConfig::new(0, 0.0, 1.0);
        Self {
            lambda_size: d.lambda_size,
            lambda_coef: d.lambda_coef,
            lr: d.lr,
            max_iters: d.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub importance: ImportanceSource,
    pub ranges: Vec<(f64, f64)>,
    pub features: FeatureSelection,
    pub seed: u64,
    /// Train fraction; `None` picks 0.8 from 1000 rows up, else 0.5.
    pub split_fraction: Option<f64>,
    pub out: PathBuf,
    pub jobs: usize,
    #[serde(default)]
    pub tuning: SearchTuning,
    #[serde(default)]
    pub linear: LinearOptions,
}

impl RunManifest {
    pub fn new(data: impl Into<PathBuf>, schema: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            data: data.into(),
            schema: schema.into(),
            importance: ImportanceSource::Grad,
            ranges: DEFAULT_RANGES.to_vec(),
            features: FeatureSelection::All,
            seed: 0,
            split_fraction: None,
            out: out.into(),
            jobs: 1,
            tuning: SearchTuning::default(),
            linear: LinearOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.data, &self.schema] {
            if !p.is_file() {
                return Err(AuditError::Config(format!("input file not found: {}", p.display())));
            }
        }
        if let ImportanceSource::File(p) = &self.importance {
            if !p.is_file() {
                return Err(AuditError::Config(format!("importance file not found: {}", p.display())));
            }
        }
        validate_ranges(&self.ranges)?;
        if let Some(f) = self.split_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(AuditError::Config(format!("split fraction must lie in (0,1), got {f}")));
            }
        }
        if self.jobs == 0 {
            return Err(AuditError::Config("jobs must be positive".into()));
        }
        Ok(())
    }
}

/// Train/test data with aligned importance and the classifier used for
/// fairness metrics.
pub struct Prepared {
    pub split: SplitPair,
    pub importance_train: ImportanceMatrix,
    pub importance_test: ImportanceMatrix,
    pub model: LogisticModel,
}

/// Loads and splits the data, fits the classifier on the train rows and
/// computes GRAD or slices the ingested importance file.
pub fn prepare(manifest: &RunManifest) -> Result<Prepared> {
    manifest.validate()?;
    let schema = load_schema(&manifest.schema)?;
    let ds = load_dataset(&manifest.data, &schema)?;
    manifest.features.resolve(&ds.feature_names())?;
    let external = match &manifest.importance {
        ImportanceSource::File(p) => Some(load_importance(p, &ds)?),
        ImportanceSource::Grad => None,
    };
    let fraction = manifest.split_fraction.unwrap_or_else(|| default_split_fraction(ds.n_rows()));
    let split = split(&ds, fraction, manifest.seed)?;
    let model = fit_logistic(
        split.train.features(),
        split.train.labels(),
        DEFAULT_LOGISTIC_LR,
        DEFAULT_LOGISTIC_EPOCHS,
        manifest.seed,
    )?;
    let (importance_train, importance_test) = match external {
        Some(m) => (m.select_rows(split.train.row_ids()), m.select_rows(split.test.row_ids())),
        None => (grad_saliency(&model, &split.train)?, grad_saliency(&model, &split.test)?),
    };
    Ok(Prepared {
        split,
        importance_train,
        importance_test,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: usize,
    pub feature_name: String,
    /// One result per size band, in manifest order, traces stripped.
    pub results: Vec<AuditResult>,
    pub best: Option<usize>,
    /// Deltas of the best band's group on the test rows.
    pub fairness: Option<FairnessReport>,
    pub degenerate: bool,
}

impl FeatureReport {
    pub fn best_result(&self) -> Option<&AuditResult> {
        self.best.map(|i| &self.results[i])
    }

    /// The best result, or the first band when every band is degenerate.
    pub fn representative(&self) -> &AuditResult {
        self.best_result().unwrap_or(&self.results[0])
    }

    pub fn converged(&self) -> bool {
        self.results.iter().any(|r| r.converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub notion: String,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub ranges: Vec<(f64, f64)>,
    pub features: Vec<FeatureReport>,
}

impl RunReport {
    pub fn any_converged(&self) -> bool {
        self.features.iter().any(FeatureReport::converged)
    }

    /// Feature reports ordered by held-out AVG-FID of their best band, with
    /// degenerate features last.
    pub fn ranked(&self) -> Vec<&FeatureReport> {
        let mut out: Vec<&FeatureReport> = self.features.iter().collect();
        let key = |f: &FeatureReport| -> f64 {
            if f.degenerate {
                return f64::NEG_INFINITY;
            }
            f.best_result().map(AuditResult::score).unwrap_or(f64::NEG_INFINITY)
        };
        out.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap_or(std::cmp::Ordering::Equal).then(a.feature.cmp(&b.feature)));
        out
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| AuditError::Config(format!("cannot start worker pool: {e}")))
}

fn fairness_for(prepared: &Prepared, group: &SubgroupSpec) -> Result<Option<FairnessReport>> {
    let test = &prepared.split.test;
    let w = group.hard_membership(test.sensitive_matrix())?;
    let probs = prepared.model.predict_proba(test.features())?;
    match fairness_deltas(&probs, test.labels(), &w, DEFAULT_THRESHOLD, DEFAULT_BINS) {
        Ok(r) => Ok(Some(r)),
        Err(AuditError::EmptyGroup) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Separable audit: the constrained search for every selected feature and
/// band. Results are returned in feature order whatever the job count.
pub fn audit_separable(manifest: &RunManifest, prepared: &Prepared) -> Result<RunReport> {
    let train = AuditData::new(&prepared.split.train, &prepared.importance_train)?;
    let test = AuditData::new(&prepared.split.test, &prepared.importance_test)?;
    let features = manifest.features.resolve(prepared.importance_train.feature_names())?;
    let pool = thread_pool(manifest.jobs)?;
    let reports = pool.install(|| {
        features
            .par_iter()
            .map(|&j| {
                let sweep = avg_fid_sweep(train, Some(test), j, &manifest.ranges, &manifest.tuning)?;
                let fairness = match sweep.best_result() {
                    Some(best) => fairness_for(prepared, &best.group)?,
                    None => None,
                };
                log::info!("feature {j} done");
                Ok(FeatureReport {
                    feature: j,
                    feature_name: prepared.importance_train.feature_names()[j].clone(),
                    degenerate: sweep.per_range.iter().all(|r| r.degenerate),
                    best: sweep.best,
                    results: sweep.per_range,
                    fairness,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(RunReport {
        notion: format!("{:?}", prepared.importance_train.notion()).to_uppercase(),
        n_train: prepared.split.train.n_rows(),
        n_test: prepared.split.test.n_rows(),
        seed: manifest.seed,
        split_fraction: prepared.split.fraction,
        ranges: manifest.ranges.clone(),
        features: reports,
    })
}

/// LIN-FID audit over every selected feature and band.
pub fn audit_linear(manifest: &RunManifest, prepared: &Prepared) -> Result<RunReport> {
    let train = &prepared.split.train;
    let test = &prepared.split.test;
    let features = manifest.features.resolve(&train.feature_names())?;
    let pool = thread_pool(manifest.jobs)?;
    let reports = pool.install(|| {
        features
            .par_iter()
            .map(|&j| {
                let mut results = Vec::with_capacity(manifest.ranges.len());
                for &(lo, hi) in &manifest.ranges {
                    let mut cfg = LinFidConfig::new(j, lo, hi);
                    cfg.seed = manifest.seed;
                    cfg.lambda_size = manifest.linear.lambda_size;
                    cfg.lambda_coef = manifest.linear.lambda_coef;
                    cfg.lr = manifest.linear.lr;
                    cfg.max_iters = manifest.linear.max_iters;
                    results.push(optimize_linfid(train, Some(test), &cfg)?);
                }
                let best = results
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
                let fairness = match best {
                    Some(i) => fairness_for(prepared, &results[i].group)?,
                    None => None,
                };
                Ok(FeatureReport {
                    feature: j,
                    feature_name: train.feature_names()[j].clone(),
                    degenerate: results.iter().all(|r| r.degenerate),
                    best,
                    results,
                    fairness,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(RunReport {
        notion: "LR".into(),
        n_train: train.n_rows(),
        n_test: test.n_rows(),
        seed: manifest.seed,
        split_fraction: prepared.split.fraction,
        ranges: manifest.ranges.clone(),
        features: reports,
    })
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| AuditError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AuditError::io(path, e))
}

fn band_label(lo: f64, hi: f64) -> String {
    format!("range_{lo}-{hi}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `group mean / population mean`, held-out when available.
pub fn importance_ratio(r: &AuditResult) -> Option<f64> {
    let (g, p) = match (r.group_mean_test, r.population_mean_test) {
        (Some(g), Some(p)) => (g, p),
        _ => (r.group_mean_train, r.population_mean_train),
    };
    let ratio = g / p;
    ratio.is_finite().then_some(ratio)
}

pub fn summary_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "feature,notion,alpha_lo,alpha_hi,direction,population_mean,group_mean,size_train,size_test,\
         avg_fid_train,avg_fid_test,converged,degenerate,top_coefficients,\
         pos_rate_delta,tpr_delta,fpr_delta,ece_delta\n",
    );
    for f in report.ranked() {
        let r = f.representative();
        let coefs: Vec<String> = r
            .group
            .top_coefficients(TOP_COEFFICIENTS)
            .into_iter()
            .map(|(n, c)| format!("{n}:{c:.6}"))
            .collect();
        let fair = f.fairness.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_escape(&f.feature_name),
            r.notion,
            r.alpha_lo,
            r.alpha_hi,
            match r.direction {
                Direction::Maximize => "maximize",
                Direction::Minimize => "minimize",
            },
            r.population_mean_train,
            r.group_mean_train,
            r.size_train,
            opt(r.size_test),
            r.avg_fid_train,
            opt(r.avg_fid_test),
            r.converged,
            f.degenerate,
            csv_escape(&coefs.join(";")),
            opt(fair.map(|x| x.pos_rate_delta)),
            opt(fair.and_then(|x| x.tpr_delta)),
            opt(fair.and_then(|x| x.fpr_delta)),
            opt(fair.map(|x| x.ece_delta)),
        );
    }
    out
}

pub fn log_ratio_csv(report: &RunReport) -> String {
    let mut out = String::from("feature,ratio,abs_log10_ratio\n");
    for f in report.ranked() {
        if f.degenerate {
            continue;
        }
        let ratio = importance_ratio(f.representative());
        let log = ratio.filter(|r| *r > 0.0).map(|r| r.log10().abs());
        let _ = writeln!(out, "{},{},{}", csv_escape(&f.feature_name), opt(ratio), opt(log));
    }
    out
}

/// Writes the report tree (see the module docs).
pub fn write_report(report: &RunReport, out: &Path) -> Result<()> {
    for f in &report.features {
        let dir = out.join("features").join(format!("feature_{:03}", f.feature));
        for r in &f.results {
            let stem = band_label(r.alpha_lo, r.alpha_hi);
            let mut trace = String::new();
            for point in &r.trace {
                trace.push_str(&serde_json::to_string(point)?);
                trace.push('\n');
            }
            write_atomic(&dir.join(format!("{stem}.trace.jsonl")), trace.as_bytes())?;
            let mut bare = r.clone();
            bare.trace.clear();
            write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&bare)?.as_bytes())?;
        }
    }
    let mut slim = report.clone();
    for f in &mut slim.features {
        for r in &mut f.results {
            r.trace.clear();
        }
    }
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(&slim)?.as_bytes())?;
    write_atomic(&out.join("summary.csv"), summary_csv(report).as_bytes())?;
    write_atomic(&out.join("log_ratio.csv"), log_ratio_csv(report).as_bytes())
}

pub fn run_separable(manifest: &RunManifest) -> Result<RunReport> {
    let prepared = prepare(manifest)?;
    let report = audit_separable(manifest, &prepared)?;
    write_report(&report, &manifest.out)?;
    Ok(report)
}

pub fn run_linear(manifest: &RunManifest) -> Result<RunReport> {
    let prepared = prepare(manifest)?;
    let report = audit_linear(manifest, &prepared)?;
    write_report(&report, &manifest.out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub results: Vec<AuditResult>,
    pub fairness: Option<FairnessReport>,
}

/// AVG-FID of a fixed group for feature `j`, train values from `train` and
/// held-out values from `test`.
pub fn score_group(
    group: &SubgroupSpec,
    j: usize,
    train: AuditData<'_>,
    test: Option<AuditData<'_>>,
) -> Result<AuditResult> {
    let m = train.importance;
    let ds: &Dataset = train.dataset;
    if j >= m.n_features() {
        return Err(AuditError::dim("feature index bound", m.n_features(), j));
    }
    group.check_names(&ds.sensitive_feature_names())?;
    let w: DVector<f64> = group.membership(ds.sensitive_matrix())?;
    let size = group_size(&w);
    let v = fid_value(m, j, &w)?;
    let mut result = AuditResult {
        feature: j,
        feature_name: m.feature_names()[j].clone(),
        notion: format!("{:?}", m.notion()).to_uppercase(),
        direction: if v.signed_avg >= 0.0 {
            Direction::Maximize
        } else {
            Direction::Minimize
        },
        alpha_lo: size,
        alpha_hi: size,
        group: group.clone(),
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
    };
    if let Some(t) = test {
        result.evaluate_holdout(t.importance, t.dataset)?;
    }
    Ok(result)
}

/// Scores an externally supplied subgroup on the manifest's split.
pub fn score_subgroup(manifest: &RunManifest, subgroup: &Path) -> Result<ScoreReport> {
    let prepared = prepare(manifest)?;
    let group = SubgroupSpec::load(subgroup)?;
    group.check_names(&prepared.split.train.sensitive_feature_names())?;
    let train = AuditData::new(&prepared.split.train, &prepared.importance_train)?;
    let test = AuditData::new(&prepared.split.test, &prepared.importance_test)?;
    let features = manifest.features.resolve(prepared.importance_train.feature_names())?;
    let results = features
        .iter()
        .map(|&j| score_group(&group, j, train, Some(test)))
        .collect::<Result<Vec<_>>>()?;
    let fairness = fairness_for(&prepared, &group)?;
    let report = ScoreReport { results, fairness };
    write_atomic(
        &manifest.out.join("score.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}
