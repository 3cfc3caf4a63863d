//! Preparation of the public ProPublica `compas-scores-two-years.csv`.
//!
//! Rows follow the usual screening filters (arrest within 30 days of the
//! screening, known recidivism outcome, no ordinary traffic offenses, a
//! scored assessment). Sensitive attributes are age, sex and race; the other
//! features are juvenile and prior counts, felony degree, and one indicator
//! per charge description seen at least [`MIN_CHARGE_COUNT`] times.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::dataset::{ColumnKind, ColumnSchema, Dataset};
use crate::error::{AuditError, Result};

pub const MIN_CHARGE_COUNT: usize = 10;
pub const TARGET: &str = "two_year_recid";
const COUNT_COLUMNS: [&str; 4] = ["juv_fel_count", "juv_misd_count", "juv_other_count", "priors_count"];
const CHARGE_PREFIX: &str = "charge=";

/// The filtered table as a flat CSV plus its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCompas {
    pub csv: String,
    pub schema: Vec<ColumnSchema>,
    pub rows: usize,
}

impl PreparedCompas {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_csv_reader(self.csv.as_bytes(), &self.schema)
    }

    pub fn write(&self, csv_path: &Path, schema_path: &Path) -> Result<()> {
        std::fs::write(csv_path, &self.csv).map_err(|e| AuditError::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(&self.schema)?;
        std::fs::write(schema_path, json).map_err(|e| AuditError::io(schema_path, e))
    }
}

struct RawRow {
    age: String,
    male: bool,
    race: String,
    counts: [String; 4],
    felony: bool,
    charge: String,
    target: String,
}

fn lookup(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    // the raw file repeats some headers; the first occurrence wins
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| AuditError::Schema(format!("raw COMPAS file lacks column `{name}`")))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn prepare_compas_reader<R: Read>(reader: R) -> Result<PreparedCompas> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| lookup(&headers, name);
    let (i_days, i_recid, i_degree, i_score) = (
        col("days_b_screening_arrest")?,
        col("is_recid")?,
        col("c_charge_degree")?,
        col("score_text")?,
    );
    let (i_age, i_sex, i_race, i_desc, i_target) =
        (col("age")?, col("sex")?, col("race")?, col("c_charge_desc")?, col(TARGET)?);
    let i_counts = [col(COUNT_COLUMNS[0])?, col(COUNT_COLUMNS[1])?, col(COUNT_COLUMNS[2])?, col(COUNT_COLUMNS[3])?];

    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let days: f64 = match rec[i_days].trim() {
            "" => continue,
            v => v.parse().map_err(|_| AuditError::Parse {
                row: line,
                column: "days_b_screening_arrest".into(),
                message: format!("not a number: {v}"),
            })?,
        };
        if !(-30.0..=30.0).contains(&days) || &rec[i_recid] == "-1" || &rec[i_degree] == "O" || &rec[i_score] == "N/A" {
            continue;
        }
        rows.push(RawRow {
            age: rec[i_age].to_string(),
            male: &rec[i_sex] == "Male",
            race: rec[i_race].to_string(),
            counts: i_counts.map(|i| rec[i].to_string()),
            felony: &rec[i_degree] == "F",
            charge: rec[i_desc].to_string(),
            target: rec[i_target].to_string(),
        });
    }

    let mut charge_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *charge_counts.entry(r.charge.as_str()).or_default() += 1;
    }
    let charges: Vec<&str> = charge_counts
        .into_iter()
        .filter(|&(c, k)| k >= MIN_CHARGE_COUNT && !c.is_empty())
        .map(|(c, _)| c)
        .collect();

    let mut schema = vec![
        ColumnSchema::new("age", ColumnKind::Numeric).sensitive(),
        ColumnSchema::new("sex", ColumnKind::Binary).sensitive(),
        ColumnSchema::new("race", ColumnKind::Categorical).sensitive(),
    ];
    schema.extend(COUNT_COLUMNS.iter().map(|c| ColumnSchema::new(*c, ColumnKind::Numeric)));
    schema.push(ColumnSchema::new("felony", ColumnKind::Binary));
    schema.extend(
        charges
            .iter()
            .map(|c| ColumnSchema::new(format!("{CHARGE_PREFIX}{c}"), ColumnKind::Binary)),
    );
    schema.push(ColumnSchema::new(TARGET, ColumnKind::Binary).target());

    let mut csv = String::new();
    let header: Vec<String> = schema.iter().map(|c| csv_field(&c.name)).collect();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for r in &rows {
        let mut fields = vec![r.age.clone(), (r.male as u8).to_string(), csv_field(&r.race)];
        fields.extend(r.counts.iter().cloned());
        fields.push((r.felony as u8).to_string());
        fields.extend(charges.iter().map(|c| ((r.charge == *c) as u8).to_string()));
        fields.push(r.target.clone());
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    Ok(PreparedCompas {
        csv,
        schema,
        rows: rows.len(),
    })
}

pub fn prepare_compas(raw: impl AsRef<Path>) -> Result<PreparedCompas> {
    let raw = raw.as_ref();
    let file = File::open(raw).map_err(|e| AuditError::io(raw, e))?;
    prepare_compas_reader(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RAW: &str = "\
id,age,sex,race,juv_fel_count,juv_misd_count,juv_other_count,priors_count,days_b_screening_arrest,is_recid,c_charge_degree,c_charge_desc,score_text,priors_count,two_year_recid
1,30,Male,Caucasian,0,0,0,2,-1,1,F,Battery,Low,2,1
2,41,Female,Hispanic,0,1,0,0,0,0,M,\"Possess, Cannabis\",High,0,0
3,22,Male,Caucasian,0,0,0,5,45,1,F,Battery,Low,5,1
4,25,Male,Other,0,0,0,1,,1,F,Battery,Low,1,1
5,50,Female,Caucasian,0,0,0,0,3,-1,M,Battery,Low,0,0
6,33,Male,Caucasian,0,0,0,0,2,0,O,Battery,Low,0,0
7,60,Female,Caucasian,1,0,0,9,2,1,F,Battery,N/A,9,1
";

    #[test]
    fn filters_and_encodes() {
        let p = prepare_compas_reader(RAW.as_bytes()).unwrap();
        assert_eq!(p.rows, 2);
        // both charges occur once, below the indicator threshold
        assert_eq!(p.schema.len(), 3 + 4 + 1 + 1);
        let ds = p.dataset().unwrap();
        assert_eq!(ds.n_rows(), 2);
        // age, sex, race=Caucasian, race=Hispanic
        assert_eq!(ds.sensitive_columns().len(), 4);
        assert_eq!(ds.labels().as_slice(), &[1.0, 0.0]);
        assert_eq!(ds.features()[(0, 1)], 1.0);
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let err = prepare_compas_reader("age,sex\n1,Male\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AuditError::Schema(_)));
    }
}
