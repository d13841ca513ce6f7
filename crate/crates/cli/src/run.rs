use std::fs::{self, File};
use std::path::{Path, PathBuf};

use dualbounds::pipeline::{estimate_bounds, BoundReport};
use dualbounds::sim::{run_method_comparison, Heteroskedasticity, SimEstimand, SimReport};
use serde::Serialize;

use crate::config::{load, relative_to, EstimateConfig, SimulateConfig};
use crate::data::{read_dataset, Dataset};
use crate::error::CliError;

/// Version of the `report.json` layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_OUTPUT: &str = "dualbounds-out";

/// Flags shared by both commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

/// Rendered outputs, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub files: Vec<(&'static str, String)>,
}

impl Rendered {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| *n == name).map(|(_, s)| s.as_str())
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        for (name, body) in &self.files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display())))?;
        }
        Ok(())
    }
}

fn output_dir(opts: &RunOptions, configured: &Option<String>) -> PathBuf {
    match (&opts.output, configured) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => relative_to(&opts.config, p),
        (None, None) => PathBuf::from(DEFAULT_OUTPUT),
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Io(e.to_string()))
}

fn csv_rows<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Serialize)]
struct InputSummary<'a> {
    path: &'a str,
    n_rows: usize,
    covariates: &'a [String],
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    schema_version: u32,
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a EstimateConfig,
    input: InputSummary<'a>,
    result: &'a BoundReport,
}

#[derive(Serialize)]
struct EstimateSummary<'a> {
    estimand: &'a str,
    n: usize,
    alpha: f64,
    seed: u64,
    theta_lower: Option<f64>,
    se_lower: Option<f64>,
    lcb: Option<f64>,
    theta_upper: Option<f64>,
    se_upper: Option<f64>,
    ucb: Option<f64>,
    interval_lower: Option<f64>,
    interval_upper: Option<f64>,
}

/// Validate and parse everything an estimate run needs.
pub fn prepare_estimate(opts: &RunOptions) -> Result<(EstimateConfig, Dataset), CliError> {
    let mut cfg: EstimateConfig = load(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.pipeline.seed = s;
    }
    cfg.validate()?;
    let spec = cfg.estimand.build().map_err(|e| CliError::Config(e.to_string()))?;
    if spec.is_compound() && cfg.data.selection.is_none() {
        return Err(CliError::Data(format!(
            "estimand {} needs a selection column; map one with data.selection",
            cfg.estimand.label
        )));
    }
    let path = relative_to(&opts.config, &cfg.data.input);
    let file = File::open(&path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let data = read_dataset(file, &cfg.data)?;
    Ok((cfg, data))
}

/// Run the pipeline and render `report.json` and `summary.csv`.
pub fn render_estimate(cfg: &EstimateConfig, data: &Dataset) -> Result<Rendered, CliError> {
    let spec = cfg.estimand.build().map_err(|e| CliError::Config(e.to_string()))?;
    let result = estimate_bounds(&data.rows, &spec, &cfg.pipeline).map_err(CliError::from_data_stage)?;
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        version: VERSION,
        seed: cfg.pipeline.seed,
        config: cfg,
        input: InputSummary { path: &cfg.data.input, n_rows: data.rows.len(), covariates: &data.covariates },
        result: &result,
    };
    let summary = EstimateSummary {
        estimand: &result.estimand,
        n: result.n,
        alpha: cfg.pipeline.alpha,
        seed: cfg.pipeline.seed,
        theta_lower: result.lower.as_ref().map(|b| b.theta_hat),
        se_lower: result.lower.as_ref().map(|b| b.se),
        lcb: result.lower.as_ref().map(|b| b.confidence_bound),
        theta_upper: result.upper.as_ref().map(|b| b.theta_hat),
        se_upper: result.upper.as_ref().map(|b| b.se),
        ucb: result.upper.as_ref().map(|b| b.confidence_bound),
        interval_lower: result.interval.as_ref().map(|i| i.lower),
        interval_upper: result.interval.as_ref().map(|i| i.upper),
    };
    Ok(Rendered { files: vec![("report.json", json(&report)?), ("summary.csv", csv_rows(&[summary])?)] })
}

pub fn run_estimate(opts: &RunOptions) -> Result<PathBuf, CliError> {
    let (cfg, data) = prepare_estimate(opts)?;
    let rendered = render_estimate(&cfg, &data)?;
    let dir = output_dir(opts, &cfg.output);
    rendered.write(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    schema_version: u32,
    command: &'static str,
    version: &'static str,
    seed: Option<u64>,
    config: &'a SimulateConfig,
    reports: &'a [SimReport],
}

#[derive(Serialize)]
struct SimSummaryRow {
    scenario: usize,
    estimand: SimEstimand,
    n: usize,
    p: usize,
    heteroskedasticity: Heteroskedasticity,
    method: &'static str,
    seed: u64,
    n_reps: usize,
    oracle_theta_l: f64,
    oracle_mc_se: f64,
    mean_estimate: f64,
    mean_lcb: f64,
    coverage: f64,
    completed_reps: usize,
    failed_reps: usize,
    pilot_sd: Option<f64>,
}

/// One row per (setting, n, method): the coverage figure's data.
#[derive(Serialize)]
struct CoverageRow {
    heteroskedasticity: Heteroskedasticity,
    n: usize,
    method: &'static str,
    coverage: f64,
    nominal: f64,
    mean_estimate: f64,
    oracle_theta_l: f64,
    reps: usize,
}

/// Run every scenario and render `report.json`, `summary.csv` and
/// `coverage.csv`. Runtimes appear only in the JSON report.
pub fn render_simulate(cfg: &SimulateConfig) -> Result<Rendered, CliError> {
    let reports: Vec<SimReport> = cfg
        .scenarios
        .iter()
        .map(|sc| {
            run_method_comparison(sc).map_err(|e| match e {
                dualbounds::Error::InvalidInput(m) => CliError::Config(m),
                other => CliError::Numerical(other.to_string()),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut summary = Vec::new();
    let mut coverage = Vec::new();
    for (i, rep) in reports.iter().enumerate() {
        let sc = &rep.scenario;
        for row in &rep.rows {
            let label = row.method.label();
            summary.push(SimSummaryRow {
                scenario: i,
                estimand: sc.estimand,
                n: sc.n,
                p: sc.p,
                heteroskedasticity: sc.heteroskedasticity,
                method: label,
                seed: sc.seed,
                n_reps: sc.n_reps,
                oracle_theta_l: rep.oracle.theta_l,
                oracle_mc_se: rep.oracle.mc_se,
                mean_estimate: row.mean_estimate,
                mean_lcb: row.mean_lcb,
                coverage: row.coverage,
                completed_reps: row.completed_reps,
                failed_reps: row.failed_reps,
                pilot_sd: row.pilot_sd,
            });
            coverage.push(CoverageRow {
                heteroskedasticity: sc.heteroskedasticity,
                n: sc.n,
                method: label,
                coverage: row.coverage,
                nominal: 1.0 - sc.alpha,
                mean_estimate: row.mean_estimate,
                oracle_theta_l: rep.oracle.theta_l,
                reps: row.completed_reps,
            });
        }
    }
    let report = SimulateReport {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        version: VERSION,
        seed: cfg.seed,
        config: cfg,
        reports: &reports,
    };
    Ok(Rendered {
        files: vec![
            ("report.json", json(&report)?),
            ("summary.csv", csv_rows(&summary)?),
            ("coverage.csv", csv_rows(&coverage)?),
        ],
    })
}

pub fn prepare_simulate(opts: &RunOptions) -> Result<SimulateConfig, CliError> {
    let mut cfg: SimulateConfig = load(&opts.config)?;
    cfg.resolve_seed(opts.seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_simulate(opts: &RunOptions) -> Result<PathBuf, CliError> {
    let cfg = prepare_simulate(opts)?;
    let rendered = render_simulate(&cfg)?;
    let dir = output_dir(opts, &cfg.output);
    rendered.write(&dir)?;
    Ok(dir)
}
