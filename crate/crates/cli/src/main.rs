//! `audit`: run feature-importance-disparity audits from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 no feature
//! converged.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fid_audit::compas::prepare_compas;
use fid_audit::pipeline::{
    parse_ranges, run_linear, run_separable, score_subgroup, FeatureSelection, ImportanceSource, LinearOptions,
    RunManifest, RunReport,
};
use fid_audit::search::{CostForm, DualResponse, SearchTuning, DEFAULT_ETA, DEFAULT_MAX_ITERS};
use fid_audit::AuditError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const JOBS_ENV: &str = "AUDIT_JOBS";
const SUMMARY_ROWS: usize = 10;

#[derive(Parser)]
#[command(name = "audit", version, about = "Find subgroups where a feature's importance differs most from the population")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Constrained search for separable importance notions (AVG-FID).
    Separable {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Gradient search for the regression-coefficient disparity (LIN-FID).
    Linear {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        linear: LinearArgs,
    },
    /// Score an externally supplied subgroup.
    Score {
        #[command(flatten)]
        common: Common,
        /// Subgroup JSON (sensitive feature names and threshold coefficients).
        #[arg(long)]
        subgroup: PathBuf,
    },
    /// Filter and encode the public `compas-scores-two-years.csv`.
    PrepareCompas {
        /// The raw ProPublica file.
        #[arg(long)]
        raw: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out_csv: PathBuf,
        /// Output schema JSON.
        #[arg(long)]
        out_schema: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// `grad` or `file:PATH`.
    #[arg(long, default_value = "grad")]
    importance: ImportanceSource,
    /// Comma-separated `LO-HI` size bands.
    #[arg(long, default_value = "0.01-0.05,0.05-0.1,0.1-0.15,0.15-0.2,0.2-0.25", value_parser = parse_ranges_arg)]
    ranges: Bands,
    /// `all` or comma-separated encoded feature names.
    #[arg(long, default_value = "all")]
    features: FeatureSelection,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train fraction; defaults to 0.8 from 1000 rows up, else 0.5.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; the AUDIT_JOBS environment variable takes precedence.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostFormArg {
    Gradient,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum DualArg {
    Best,
    Literal,
}

#[derive(Args)]
struct SearchArgs {
    /// Exponentiated-gradient rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Use the regret-analysis rate `ν / (2 n² B)`.
    #[arg(long, conflicts_with = "eta")]
    theoretical_eta: bool,
    /// Dual bound `B`; defaults to `10⁴·μ`.
    #[arg(long)]
    bound: Option<f64>,
    /// Gap tolerance; defaults to `0.05·μ·n·α_L`.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, value_enum, default_value = "gradient")]
    cost_form: CostFormArg,
    #[arg(long, value_enum, default_value = "best")]
    dual_response: DualArg,
    /// Unscaled costs with `η = 10⁻⁵`, as in the original experiments.
    #[arg(long, conflicts_with_all = ["eta", "theoretical_eta", "cost_form"])]
    published_constants: bool,
}

#[derive(Args)]
struct LinearArgs {
    #[arg(long)]
    lambda_size: Option<f64>,
    #[arg(long)]
    lambda_coef: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Clone)]
struct Bands(Vec<(f64, f64)>);

fn parse_ranges_arg(s: &str) -> Result<Bands, AuditError> {
    parse_ranges(s).map(Bands)
}

fn jobs(flag: usize) -> Result<usize, AuditError> {
    match std::env::var(JOBS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&j| j > 0)
            .ok_or_else(|| AuditError::Config(format!("{JOBS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn manifest(common: Common) -> Result<RunManifest, AuditError> {
    let mut m = RunManifest::new(common.data, common.schema, common.out);
    m.importance = common.importance;
    m.ranges = common.ranges.0;
    m.features = common.features;
    m.seed = common.seed;
    m.split_fraction = common.split;
    m.jobs = jobs(common.jobs)?;
    m.validate()?;
    Ok(m)
}

impl SearchArgs {
    fn tuning(&self) -> SearchTuning {
        let base = if self.published_constants {
            SearchTuning::published()
        } else {
            SearchTuning {
                eta: Some(self.eta.unwrap_or(DEFAULT_ETA)),
                theoretical_eta: self.theoretical_eta,
                cost_form: match self.cost_form {
                    CostFormArg::Gradient => CostForm::Gradient,
                    CostFormArg::Literal => CostForm::Literal,
                },
                ..SearchTuning::default()
            }
        };
        SearchTuning {
            bound: self.bound,
            nu: self.nu,
            max_iters: self.max_iters,
            dual_response: match self.dual_response {
                DualArg::Best => DualResponse::BestResponse,
                DualArg::Literal => DualResponse::Literal,
            },
            ..base
        }
    }
}

impl LinearArgs {
    fn options(&self) -> LinearOptions {
        let d = LinearOptions::default();
        LinearOptions {
            lambda_size: self.lambda_size.unwrap_or(d.lambda_size),
            lambda_coef: self.lambda_coef.unwrap_or(d.lambda_coef),
            lr: self.lr.unwrap_or(d.lr),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
        }
    }
}

fn print_summary(report: &RunReport) {
    println!(
        "{} audit: {} features, {} train / {} test rows",
        report.notion,
        report.features.len(),
        report.n_train,
        report.n_test
    );
    for f in report.ranked().into_iter().take(SUMMARY_ROWS) {
        let r = f.representative();
        println!(
            "  {:<40} band [{}, {}] size {:.4} avg_fid {:.6} test {} converged {}",
            f.feature_name,
            r.alpha_lo,
            r.alpha_hi,
            r.size_train,
            r.avg_fid_train,
            r.avg_fid_test.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            r.converged,
        );
    }
}

fn is_invalid_input(e: &AuditError) -> bool {
    !matches!(
        e,
        AuditError::Singular(_) | AuditError::NonFinite(_) | AuditError::EmptyGroup | AuditError::Io { .. }
    )
}

fn run(command: Command) -> Result<u8, AuditError> {
    match command {
        Command::Separable { common, search } => {
            let mut m = manifest(common)?;
            m.tuning = search.tuning();
            let report = run_separable(&m)?;
            print_summary(&report);
            Ok(if report.any_converged() { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Linear { common, linear } => {
            let mut m = manifest(common)?;
            m.linear = linear.options();
            let report = run_linear(&m)?;
            print_summary(&report);
            Ok(if report.any_converged() { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Score { common, subgroup } => {
            let m = manifest(common)?;
            let report = score_subgroup(&m, &subgroup)?;
            for r in &report.results {
                println!(
                    "{:<40} size {:.4} avg_fid {:.6} test {}",
                    r.feature_name,
                    r.size_train,
                    r.avg_fid_train,
                    r.avg_fid_test.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
                );
            }
            Ok(0)
        }
        Command::PrepareCompas { raw, out_csv, out_schema } => {
            let prepared = prepare_compas(&raw)?;
            prepared.write(&out_csv, &out_schema)?;
            println!("{} rows, {} columns", prepared.rows, prepared.schema.len());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_invalid_input(&e) { EXIT_INVALID } else { EXIT_RUNTIME })
        }
    }
}
