mod common;

use std::fs;

use fid_audit::dataset::{load_dataset, load_schema};
use fid_audit::importance::{ImportanceMatrix, Notion};
use fid_audit::pipeline::{
    run_linear, run_separable, score_subgroup, FeatureSelection, ImportanceSource, LinearOptions, RunManifest,
};
use fid_audit::subgroup::{SubgroupSpec, ThresholdGroup};
use fid_audit::AuditError;
use nalgebra::DMatrix;

const BANDS: [(f64, f64); 2] = [(0.05, 0.1), (0.1, 0.15)];

fn manifest(dir: &std::path::Path, files: &common::SyntheticFiles, out: &str) -> RunManifest {
    let mut m = RunManifest::new(&files.data, &files.schema, dir.join(out));
    m.importance = ImportanceSource::File(files.importance.clone());
    m.ranges = BANDS.to_vec();
    m
}

#[test]
fn all_zero_importance_flags_every_feature_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 300, 1);
    let ds = load_dataset(&files.data, &load_schema(&files.schema).unwrap()).unwrap();
    let zeros = ImportanceMatrix::new(
        DMatrix::zeros(ds.n_rows(), ds.n_features()),
        Notion::External,
        ds.feature_names(),
    )
    .unwrap();
    zeros.write_csv(fs::File::create(&files.importance).unwrap()).unwrap();
    let report = run_separable(&manifest(dir.path(), &files, "out")).unwrap();
    assert!(report.features.iter().all(|f| f.degenerate));
    assert!(report
        .features
        .iter()
        .flat_map(|f| &f.results)
        .all(|r| r.avg_fid_train == 0.0 && r.degenerate));
}

#[test]
fn planted_feature_tops_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 2000, 2);
    let report = run_separable(&manifest(dir.path(), &files, "out")).unwrap();
    let ranked = report.ranked();
    assert_eq!(ranked[0].feature_name, "x1");
    let best = ranked[0].best_result().unwrap();
    assert!(best.converged && best.in_band);
    // young men carry importance -1 against a population mean near -0.12
    assert!(best.avg_fid_train > 0.6, "{}", best.avg_fid_train);

    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let first_row = summary.lines().nth(1).unwrap();
    assert!(first_row.contains("x1"), "{first_row}");
    assert!(dir.path().join("out/log_ratio.csv").is_file());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(json["features"].as_array().unwrap().len(), report.features.len());
}

#[test]
fn reruns_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 1200, 4);
    let mut outputs = Vec::new();
    for (out, jobs) in [("a", 1), ("b", 3)] {
        let mut m = manifest(dir.path(), &files, out);
        m.importance = ImportanceSource::Grad;
        m.features = FeatureSelection::List(vec!["x1".into(), "x2".into(), "age".into()]);
        m.jobs = jobs;
        run_separable(&m).unwrap();
        let report = fs::read(dir.path().join(out).join("report.json")).unwrap();
        let trace = fs::read(dir.path().join(out).join("features/feature_006/range_0.05-0.1.trace.jsonl")).unwrap();
        outputs.push((report, trace));
    }
    assert!(!outputs[0].1.is_empty());
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn whole_population_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 400, 5);
    let ds = load_dataset(&files.data, &load_schema(&files.schema).unwrap()).unwrap();
    let d = ds.sensitive_matrix().ncols();
    let spec = SubgroupSpec::hard(&ThresholdGroup::everyone(d), ds.sensitive_feature_names());
    let path = dir.path().join("everyone.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    let report = score_subgroup(&manifest(dir.path(), &files, "out"), &path).unwrap();
    assert_eq!(report.results.len(), ds.n_features());
    for r in &report.results {
        assert_eq!(r.size_train, 1.0);
        assert!(r.avg_fid_train.abs() < 1e-12);
        assert!(r.avg_fid_test.unwrap().abs() < 1e-12);
    }
    let f = report.fairness.unwrap();
    assert_eq!(f.pos_rate_delta, 0.0);
    assert_eq!(f.ece_delta, 0.0);
    assert!(dir.path().join("out/score.json").is_file());
}

#[test]
fn reported_group_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 1000, 6);
    let mut m = manifest(dir.path(), &files, "out");
    m.features = FeatureSelection::List(vec!["x1".into()]);
    let report = run_separable(&m).unwrap();
    let best = report.features[0].best_result().unwrap();
    let path = dir.path().join("group.json");
    fs::write(&path, serde_json::to_string_pretty(&best.group).unwrap()).unwrap();
    assert_eq!(SubgroupSpec::load(&path).unwrap(), best.group);
    let scored = score_subgroup(&m, &path).unwrap();
    assert_eq!(scored.results[0].avg_fid_train, best.avg_fid_train);
    assert_eq!(scored.results[0].size_test, best.size_test);
}

#[test]
fn linear_audit_reports_soft_groups() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 600, 7);
    let mut m = manifest(dir.path(), &files, "out");
    m.importance = ImportanceSource::Grad;
    m.features = FeatureSelection::List(vec!["x1".into()]);
    m.ranges = vec![(0.2, 0.4)];
    m.linear = LinearOptions {
        max_iters: 300,
        ..LinearOptions::default()
    };
    let report = run_linear(&m).unwrap();
    assert_eq!(report.notion, "LR");
    let r = &report.features[0].results[0];
    assert!(r.avg_fid_test.is_some());
    assert!(r.iterations_used <= 300);
}

#[test]
fn bad_inputs_are_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let files = common::write_synthetic(dir.path(), 100, 8);
    let mut m = manifest(dir.path(), &files, "out");
    m.features = FeatureSelection::List(vec!["nope".into()]);
    assert!(matches!(run_separable(&m), Err(AuditError::Config(_))));
    let mut m = manifest(dir.path(), &files, "out");
    m.ranges = vec![(0.3, 0.2)];
    assert!(run_separable(&m).is_err());
    let mut m = manifest(dir.path(), &files, "out");
    m.data = dir.path().join("missing.csv");
    assert!(matches!(run_separable(&m), Err(AuditError::Config(_))));
    assert!(!dir.path().join("out").exists());
}
