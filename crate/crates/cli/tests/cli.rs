use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_audit");

struct Inputs {
    data: PathBuf,
    schema: PathBuf,
    importance: PathBuf,
}

/// 2500 rows; importance of `x` is -1 where `s = 1` (the first 20%).
fn write_inputs(dir: &Path) -> Inputs {
    let n = 2500;
    let mut data = String::from("s,a,x,y\n");
    let mut importance = String::from("row_id,s,a,x\n");
    for i in 0..n {
        let s = u8::from(i < n / 5);
        let a = (i * 37 % 101) as f64 / 10.0;
        let x = ((i as f64) * 0.7).sin();
        data.push_str(&format!("{s},{a},{x:.6},{}\n", i % 2));
        let c = if s == 1 { -1.0 } else { 0.0 };
        importance.push_str(&format!("{i},0,{},{c}\n", a / 100.0));
    }
    let schema = r#"[
        {"name": "s", "kind": "binary", "sensitive": true},
        {"name": "a", "kind": "numeric", "sensitive": true},
        {"name": "x", "kind": "numeric"},
        {"name": "y", "kind": "binary", "target": true}
    ]"#;
    let inputs = Inputs {
        data: dir.join("data.csv"),
        schema: dir.join("schema.json"),
        importance: dir.join("importance.csv"),
    };
    std::fs::write(&inputs.data, data).unwrap();
    std::fs::write(&inputs.schema, schema).unwrap();
    std::fs::write(&inputs.importance, importance).unwrap();
    inputs
}

fn run(args: &[&str], jobs_env: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("AUDIT_JOBS");
    if let Some(j) = jobs_env {
        cmd.env("AUDIT_JOBS", j);
    }
    cmd.output().unwrap()
}

fn separable_args<'a>(inputs: &'a Inputs, importance: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "separable",
        "--data",
        inputs.data.to_str().unwrap(),
        "--schema",
        inputs.schema.to_str().unwrap(),
        "--importance",
        importance,
        "--ranges",
        "0.15-0.25",
        "--out",
        out,
    ]
}

#[test]
fn separable_run_succeeds_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let importance = format!("file:{}", inputs.importance.display());
    let out = dir.path().join("out");
    let output = run(&separable_args(&inputs, &importance, out.to_str().unwrap()), None);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.lines().nth(1).unwrap().trim_start().starts_with('x'), "{stdout}");
    for f in ["report.json", "summary.csv", "log_ratio.csv", "features/feature_002/range_0.15-0.25.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["features"].as_array().unwrap().len(), 3);
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let mut args = separable_args(&inputs, "grad", out);
    args[8] = "0.3-0.2";
    assert_eq!(run(&args, None).status.code(), Some(2));

    let mut args = separable_args(&inputs, "grad", out);
    args.extend(["--features", "missing"]);
    let output = run(&args, None);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("missing"));

    let missing = dir.path().join("nope.csv");
    let mut args = separable_args(&inputs, "grad", out);
    args[2] = missing.to_str().unwrap();
    assert_eq!(run(&args, None).status.code(), Some(2));

    assert_eq!(run(&["separable", "--bogus"], None).status.code(), Some(2));
    assert!(!Path::new(out).exists());
}

#[test]
fn no_converged_feature_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let importance = format!("file:{}", inputs.importance.display());
    let out = dir.path().join("out");
    let mut args = separable_args(&inputs, &importance, out.to_str().unwrap());
    // the gap is first checked at iteration 10
    args.extend(["--max-iters", "1"]);
    let output = run(&args, None);
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out.join("report.json").is_file());
}

#[test]
fn jobs_environment_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let importance = format!("file:{}", inputs.importance.display());
    let out = dir.path().join("out");
    let mut args = separable_args(&inputs, &importance, out.to_str().unwrap());
    args.extend(["--jobs", "2"]);
    let output = run(&args, Some("0"));
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("AUDIT_JOBS"));

    let single_out = dir.path().join("a");
    let single = run(&separable_args(&inputs, &importance, single_out.to_str().unwrap()), Some("1"));
    let many = run(&args, Some("3"));
    assert!(single.status.success() && many.status.success());
    assert_eq!(
        std::fs::read(single_out.join("report.json")).unwrap(),
        std::fs::read(out.join("report.json")).unwrap()
    );
}

#[test]
fn score_and_linear_subcommands_run() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let group = dir.path().join("group.json");
    std::fs::write(
        &group,
        r#"{"theta": [1.0, 0.0, -0.5], "kind": "hard", "sensitive_feature_names": ["s", "a", "bias"]}"#,
    )
    .unwrap();
    let importance = format!("file:{}", inputs.importance.display());
    let out = dir.path().join("score");
    let common = [
        "--data",
        inputs.data.to_str().unwrap(),
        "--schema",
        inputs.schema.to_str().unwrap(),
    ];
    let mut args = vec!["score"];
    args.extend(common);
    args.extend(["--importance", &importance, "--subgroup", group.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let output = run(&args, None);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let score: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("score.json")).unwrap()).unwrap();
    let x = &score["results"][2];
    assert_eq!(x["feature_name"], "x");
    assert!((x["size_train"].as_f64().unwrap() - 0.2).abs() < 0.05);

    let out = dir.path().join("linear");
    let mut args = vec!["linear"];
    args.extend(common);
    args.extend(["--features", "x", "--ranges", "0.1-0.4", "--max-iters", "200", "--out", out.to_str().unwrap()]);
    let output = run(&args, None);
    assert!(matches!(output.status.code(), Some(0) | Some(3)), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out.join("report.json").is_file());
}

#[test]
fn prepare_compas_encodes_the_public_file() {
    let raw = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/compas-scores-two-years.csv");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("compas.csv");
    let schema = dir.path().join("compas.json");
    let output = run(
        &[
            "prepare-compas",
            "--raw",
            raw.to_str().unwrap(),
            "--out-csv",
            csv.to_str().unwrap(),
            "--out-schema",
            schema.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).starts_with("6172 rows"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 6173);
}
