#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fid_audit::dataset::{load_dataset, ColumnKind, ColumnSchema, Dataset};
use fid_audit::importance::{ImportanceMatrix, Notion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `n` rows, binary sensitive `s` on the first `planted` fraction, importance
/// of the safe feature `x` equal to `-1` inside the planted group and 0 else.
pub fn planted(n: usize, planted: f64) -> (Dataset, ImportanceMatrix) {
    let cut = (n as f64 * planted).round() as usize;
    let s = DMatrix::from_fn(n, 1, |i, _| (i < cut) as u8 as f64);
    let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).sin());
    let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
    let ds = Dataset::from_blocks(&s, &["s"], &x, &["x"], &y).unwrap();
    let values = DMatrix::from_fn(n, 2, |i, j| if j == 1 && i < cut { -1.0 } else { 0.0 });
    let m = ImportanceMatrix::new(values, Notion::External, ds.feature_names()).unwrap();
    (ds, m)
}

/// A small fixture with `k ≤ 4` one-hot sensitive profiles, so every labeling
/// constant on profiles is a threshold group and the regression oracle is
/// exact. Importance of the last feature is a per-profile mean plus noise.
pub struct ProfileFixture {
    pub ds: Dataset,
    pub m: ImportanceMatrix,
    pub band: (f64, f64),
}

pub fn profile_fixture(seed: u64) -> ProfileFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(60..=200);
    let k = rng.random_range(2..=4usize);
    let profile: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let means: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = DMatrix::from_fn(n, k, |i, c| (profile[i] == c) as u8 as f64);
    let names: Vec<String> = (0..k).map(|c| format!("s{c}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
    let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
    let ds = Dataset::from_blocks(&s, &name_refs, &x, &["x"], &y).unwrap();
    let c: Vec<f64> = (0..n).map(|i| means[profile[i]] + rng.random_range(-0.3..0.3)).collect();
    let values = DMatrix::from_fn(n, k + 1, |i, j| if j == k { c[i] } else { 0.0 });
    let m = ImportanceMatrix::new(values, Notion::External, ds.feature_names()).unwrap();
    let lo = rng.random_range(0.05..0.4);
    let width = rng.random_range(0.1..0.3);
    ProfileFixture {
        ds,
        m,
        band: (lo, (lo + width).min(1.0)),
    }
}

pub struct SyntheticFiles {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub importance: PathBuf,
}

/// Writes a mixed-type synthetic table (numeric `age`, binary `sex`,
/// categorical `race` sensitive; `x1`, `x2` safe) with an importance file in
/// which `x1` is low for young men, `x2` is high for `race=B`, `age` tracks
/// age, `sex` is pure noise and the race indicators are identically zero.
pub fn write_synthetic(dir: &Path, n: usize, seed: u64) -> SyntheticFiles {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let races = ["A", "B", "C"];
    let mut rows = Vec::with_capacity(n);
    let mut csv = String::from("age,sex,race,x1,x2,y\n");
    for _ in 0..n {
        let age: f64 = rng.random_range(18.0..70.0f64).round();
        let sex = rng.random_bool(0.5) as u8;
        let race = races[rng.random_range(0..3)];
        let x1 = normal.sample(&mut rng);
        let x2 = normal.sample(&mut rng);
        let logit = 0.8 * x1 - 0.5 * x2 + 0.02 * (40.0 - age);
        let y = rng.random_bool(1.0 / (1.0 + (-logit).exp())) as u8;
        writeln!(csv, "{age},{sex},{race},{x1:.6},{x2:.6},{y}").unwrap();
        rows.push((age, sex, race));
    }
    let schema = vec![
        ColumnSchema::new("age", ColumnKind::Numeric).sensitive(),
        ColumnSchema::new("sex", ColumnKind::Binary).sensitive(),
        ColumnSchema::new("race", ColumnKind::Categorical).sensitive(),
        ColumnSchema::new("x1", ColumnKind::Numeric),
        ColumnSchema::new("x2", ColumnKind::Numeric),
        ColumnSchema::new("y", ColumnKind::Binary).target(),
    ];
    let data = dir.join("synthetic.csv");
    let schema_path = dir.join("synthetic_schema.json");
    std::fs::write(&data, &csv).unwrap();
    std::fs::write(&schema_path, serde_json::to_string(&schema).unwrap()).unwrap();

    let ds = load_dataset(&data, &schema).unwrap();
    let names = ds.feature_names();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let values = DMatrix::from_fn(n, names.len(), |i, j| {
        let (age, sex, race) = rows[i];
        match names[j].as_str() {
            "x1" => -((age < 30.0 && sex == 1) as u8 as f64) + noise.sample(&mut rng),
            "x2" => 0.5 * ((race == "B") as u8 as f64) + noise.sample(&mut rng),
            "age" => age / 70.0 + noise.sample(&mut rng),
            "sex" => noise.sample(&mut rng),
            _ => 0.0,
        }
    });
    let m = ImportanceMatrix::new(values, Notion::External, names).unwrap();
    let importance = dir.join("synthetic_importance.csv");
    m.write_csv(std::fs::File::create(&importance).unwrap()).unwrap();
    SyntheticFiles {
        data,
        schema: schema_path,
        importance,
    }
}
