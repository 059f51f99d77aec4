//! Command-line interface: `fit`, `predict`, `diagnose`, `simulate` and
//! `demo-splines`. Every command writes its outputs atomically together with a
//! JSON run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{crude_rate, format_month, load_panel_from_reader, parse_month, write_panel, DataError, LoadOptions, Panel};
use crate::diagnostics::{
    moran_permutation, morans_i, neighbor_graph_from_reader, temporal_acf, DiagnosticsError, PermutationSummary,
    ACF_LEVELS, CRUDE_RATE,
};
use crate::fitter::{predict, select_smoothing, FitError, FitOptions, FitResult, SCHEMA_VERSION};
use crate::model_dsl::{parse_formula, Family, OffsetRule, ParseError};
use crate::simulate::{simulate_panel, spline_demo, SimConfig, SimulateError};

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for usage, parse and load failures.
pub const EXIT_ERROR: i32 = 1;
/// Exit status for a result that was produced but is not trustworthy
/// (unconverged fit, constant field).
pub const EXIT_DEGRADED: i32 = 2;

/// Name of the rate column in prediction tables under the person-years offset.
pub const RATE_COLUMN: &str = "rate_per_100k_py";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: DataError },
    #[error("formula `{formula}`: {source}")]
    Formula { formula: String, source: ParseError },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diagnostics(DiagnosticsError::ConstantField(_)) => EXIT_DEGRADED,
            _ => EXIT_ERROR,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nbgam", version, about = "Negative binomial GAMs for unit-by-month count panels")]
pub struct Cli {
    /// Print progress to stdout.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model with GCV smoothing selection.
    Fit(FitArgs),
    /// Predict rates from a saved fit on a covariate grid.
    Predict(PredictArgs),
    /// Moran's I for one month, or lagged autocorrelation bands.
    Diagnose(DiagnoseArgs),
    /// Simulate a panel from a known surface.
    Simulate(SimulateArgs),
    /// Tables illustrating a penalized B-spline fit.
    DemoSplines(DemoArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub formula: String,
    #[arg(long, default_value = "nb", value_parser = parse_family)]
    pub family: Family,
    #[arg(long, default_value = "person-years")]
    pub offset: OffsetRule,
    /// Keep only units listed in this file (one id per line).
    #[arg(long)]
    pub roster: Option<PathBuf>,
    /// Evaluation budget of each smoothing-parameter search.
    #[arg(long, default_value_t = FitOptions::default().max_evals)]
    pub max_evals: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Cartesian grid `col=lo:hi:n,...`; months may be given as YYYY-MM.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    pub grid_spec: Option<String>,
    /// CSV file whose columns are covariates.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Hold a covariate at a value, e.g. `median_age=38.8`.
    #[arg(long = "fix", value_name = "COL=VALUE")]
    pub fix: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["month", "acf_maxlag"])))]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Edge list CSV with header `id_a,id_b`; required for Moran's I.
    #[arg(long, required_unless_present = "acf_maxlag")]
    pub edges: Option<PathBuf>,
    #[arg(long)]
    pub roster: Option<PathBuf>,
    /// Month (YYYY-MM) for Moran's I.
    #[arg(long)]
    pub month: Option<String>,
    #[arg(long)]
    pub acf_maxlag: Option<usize>,
    /// Rate to analyse: `crude_rate` or a panel column.
    #[arg(long, default_value = CRUDE_RATE)]
    pub rate_column: String,
    /// Permutations for a Moran's I reference distribution.
    #[arg(long, default_value_t = 0)]
    pub permutations: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat `key = value` configuration; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "nb" => Ok(Family::NegBin),
        "poisson" => Ok(Family::Poisson),
        _ => Err(format!("unknown family `{s}` (expected nb or poisson)")),
    }
}

/// Audit record written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub inputs: Vec<InputDigest>,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

struct Run {
    command_line: Vec<String>,
    inputs: Vec<InputDigest>,
    seeds: Vec<u64>,
    outputs: Vec<String>,
    started: SystemTime,
    clock: Instant,
    verbose: bool,
}

impl Run {
    fn new(command_line: Vec<String>, verbose: bool) -> Run {
        Run {
            command_line,
            inputs: Vec::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
            verbose,
        }
    }

    fn progress(&self, msg: &str) {
        if self.verbose {
            println!("{msg}");
        }
    }

    /// Read an input completely and record the digest of exactly those bytes.
    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex_digest(&bytes),
            bytes: bytes.len(),
        });
        Ok(bytes)
    }

    fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.display().to_string());
        self.progress(&format!("wrote {}", path.display()));
        Ok(())
    }

    fn finish(self, manifest_path: &Path) -> Result<(), CliError> {
        let versions = [
            ("nbgam".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("fit_schema".to_string(), SCHEMA_VERSION.to_string()),
        ]
        .into();
        let manifest = RunManifest {
            command_line: self.command_line,
            inputs: self.inputs,
            seeds: self.seeds,
            versions,
            outputs: self.outputs,
            started_unix_seconds: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        write_atomic(manifest_path, &text)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.into(), source };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.into(), source })
}

/// `fit.json` gets its manifest at `fit.manifest.json`.
fn manifest_beside(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Unit ids, one per line. Blank lines and `#` comments are skipped, as is a
/// leading `fips` header.
pub fn parse_roster(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .enumerate()
        .filter(|&(i, l)| !l.is_empty() && !(i == 0 && l == "fips"))
        .map(|(_, l)| l.to_string())
        .collect()
}

fn load_panel_input(run: &mut Run, data: &Path, roster: Option<&Path>) -> Result<Panel, CliError> {
    let roster = match roster {
        Some(p) => {
            let bytes = run.read_input(p)?;
            Some(parse_roster(&String::from_utf8_lossy(&bytes)))
        }
        None => None,
    };
    let bytes = run.read_input(data)?;
    let (panel, report) = load_panel_from_reader(&bytes[..], &LoadOptions { roster })
        .map_err(|source| CliError::Data { path: data.into(), source })?;
    if !report.dropped.is_empty() || report.units_filtered > 0 {
        eprint!("{}: {report}", data.display());
    }
    run.progress(&format!("loaded {} rows from {}", panel.len(), data.display()));
    Ok(panel)
}

/// A grid or `--fix` value: a number, or a month as YYYY-MM.
fn parse_value(text: &str) -> Result<(f64, bool), CliError> {
    let text = text.trim();
    if let Ok(v) = text.parse::<f64>() {
        if v.is_finite() {
            return Ok((v, false));
        }
    }
    parse_month(text)
        .map(|m| (m as f64, true))
        .map_err(|_| CliError::Usage(format!("`{text}` is neither a number nor a YYYY-MM month")))
}

fn format_value(v: f64, is_month: bool) -> String {
    if is_month && v.fract() == 0.0 {
        format_month(v as i32)
    } else {
        format!("{v}")
    }
}

/// One grid axis: column name, values and whether they are months.
type Axis = (String, Vec<f64>, bool);

/// Parse `col=lo:hi:n,...` into axes.
pub fn parse_grid_spec(spec: &str) -> Result<Vec<(String, Vec<f64>, bool)>, CliError> {
    let mut axes: Vec<Axis> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || CliError::Usage(format!("grid axis `{part}` must look like col=lo:hi:n"));
        let (name, range) = part.split_once('=').ok_or_else(bad)?;
        let fields: Vec<&str> = range.split(':').collect();
        let [lo, hi, n] = fields[..] else { return Err(bad()) };
        let (lo, lo_month) = parse_value(lo)?;
        let (hi, hi_month) = parse_value(hi)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        if n == 0 || (n == 1 && lo != hi) || hi < lo {
            return Err(CliError::Usage(format!("grid axis `{part}`: need lo <= hi and n >= 1 (n = 1 only when lo = hi)")));
        }
        let values = (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64 })
            .collect();
        let name = name.trim().to_string();
        if axes.iter().any(|a| a.0 == name) {
            return Err(CliError::Usage(format!("grid column `{name}` given twice")));
        }
        axes.push((name, values, lo_month && hi_month));
    }
    if axes.is_empty() {
        return Err(CliError::Usage("empty grid specification".into()));
    }
    Ok(axes)
}

/// Cartesian product with the first axis varying slowest.
fn expand_grid(axes: &[Axis]) -> Vec<Vec<f64>> {
    let mut rows = vec![Vec::new()];
    for (_, values, _) in axes {
        rows = rows
            .into_iter()
            .flat_map(|r| {
                values.iter().map(move |&v| {
                    let mut r = r.clone();
                    r.push(v);
                    r
                })
            })
            .collect();
    }
    rows
}

/// Grid read from a CSV file: column names, per-column month flags and rows.
fn read_grid_file(bytes: &[u8]) -> Result<(Vec<String>, Vec<bool>, Vec<Vec<f64>>), CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut months = vec![true; names.len()];
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let mut row = Vec::with_capacity(names.len());
        for (j, field) in record.iter().enumerate() {
            let (v, m) = parse_value(field)?;
            months[j] &= m;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        months = vec![false; names.len()];
    }
    Ok((names, months, rows))
}

fn parse_fix(items: &[String]) -> Result<Vec<(String, f64, bool)>, CliError> {
    items
        .iter()
        .map(|item| {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--fix `{item}` must look like col=value")))?;
            let (v, m) = parse_value(value)?;
            Ok((name.trim().to_string(), v, m))
        })
        .collect()
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(&row)?;
    }
    wtr.into_inner().map_err(|e| CliError::Io { path: PathBuf::from("<csv buffer>"), source: e.into_error() })
}

fn cmd_fit(args: &FitArgs, run: &mut Run) -> Result<i32, CliError> {
    let mut spec = parse_formula(&args.formula)
        .map_err(|source| CliError::Formula { formula: args.formula.clone(), source })?;
    spec.family = args.family;
    spec.offset_rule = args.offset.clone();
    let panel = load_panel_input(run, &args.data, args.roster.as_deref())?;
    run.progress(&format!("fitting {} smoothing parameter(s)", spec.num_smoothing_params()));
    let options = FitOptions { max_evals: args.max_evals, ..FitOptions::default() };
    let fit = select_smoothing(&spec, &panel, &options)?;
    let mut json = fit.to_json().into_bytes();
    json.push(b'\n');
    run.write_output(&args.out, &json)?;
    let phi = fit.phi.map(|p| format!(", phi {p:.6}")).unwrap_or_default();
    let report = format!(
        "{} after {} PIRLS iterations, {} GCV evaluations; edf {:.3}, deviance {:.6}, aic {:.6}{phi}",
        if fit.converged { "converged" } else { "NOT converged" },
        fit.pirls_iterations,
        fit.gcv_evaluations,
        fit.edf_total,
        fit.deviance,
        fit.aic,
    );
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    if fit.converged {
        run.progress(&report);
        Ok(EXIT_OK)
    } else {
        eprintln!("{report}");
        Ok(EXIT_DEGRADED)
    }
}

fn cmd_predict(args: &PredictArgs, run: &mut Run) -> Result<i32, CliError> {
    let bytes = run.read_input(&args.fit)?;
    let fit = FitResult::from_json(&String::from_utf8_lossy(&bytes))?;
    let (names, months, grid) = match (&args.grid_spec, &args.grid) {
        (Some(spec), _) => {
            let axes = parse_grid_spec(spec)?;
            let rows = expand_grid(&axes);
            (axes.iter().map(|a| a.0.clone()).collect(), axes.iter().map(|a| a.2).collect(), rows)
        }
        (None, Some(path)) => {
            let bytes = run.read_input(path)?;
            read_grid_file(&bytes)?
        }
        (None, None) => return Err(CliError::Usage("one of --grid-spec or --grid is required".into())),
    };
    let fixed = parse_fix(&args.fix)?;
    let covariates = fit.spec.covariates();
    let missing: Vec<&String> = covariates
        .iter()
        .filter(|c| !names.contains(c) && !fixed.iter().any(|f| &f.0 == *c))
        .collect();
    if !missing.is_empty() {
        let list: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        return Err(CliError::Usage(format!("grid does not cover covariate(s) {}", list.join(", "))));
    }
    let rows: Vec<BTreeMap<String, f64>> =
        grid.iter().map(|r| names.iter().cloned().zip(r.iter().copied()).collect()).collect();
    let fixed_map: BTreeMap<String, f64> = fixed.iter().map(|(n, v, _)| (n.clone(), *v)).collect();
    let predictions = predict(&fit, &rows, &fixed_map)?;

    let rate_name = match fit.spec.offset_rule {
        OffsetRule::PersonYears100k => RATE_COLUMN.to_string(),
        OffsetRule::None => "expected_count".to_string(),
        OffsetRule::Column(_) => "rate".to_string(),
    };
    let mut header = names.clone();
    let extra_fixed: Vec<&(String, f64, bool)> = fixed.iter().filter(|f| !names.contains(&f.0)).collect();
    header.extend(extra_fixed.iter().map(|f| f.0.clone()));
    header.push(rate_name);
    let out_rows = grid.iter().zip(&predictions).map(|(r, p)| {
        let mut out: Vec<String> = names
            .iter()
            .zip(r)
            .zip(&months)
            .map(|((name, &v), &m)| match fixed.iter().find(|f| &f.0 == name) {
                Some((_, fv, fm)) => format_value(*fv, *fm),
                None => format_value(v, m),
            })
            .collect();
        out.extend(extra_fixed.iter().map(|f| format_value(f.1, f.2)));
        out.push(format!("{}", p.rate));
        out
    });
    let bytes = csv_bytes(&header, out_rows)?;
    run.write_output(&args.out, &bytes)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct MoranSummaryDoc {
    month: String,
    rate_column: String,
    #[serde(rename = "I")]
    i: f64,
    slope: f64,
    n_used: usize,
    n_isolated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    permutation: Option<PermutationSummary>,
}

fn rate_values(panel: &Panel, rate_column: &str) -> Result<Vec<Option<f64>>, CliError> {
    if rate_column == CRUDE_RATE {
        return Ok(panel.deaths().iter().zip(panel.popsize()).map(|(&d, &p)| Some(crude_rate(d, p))).collect());
    }
    panel
        .column(rate_column)
        .ok_or_else(|| CliError::Diagnostics(DiagnosticsError::UnknownColumn(rate_column.to_string())))
}

fn cmd_diagnose(args: &DiagnoseArgs, run: &mut Run) -> Result<i32, CliError> {
    let panel = load_panel_input(run, &args.data, args.roster.as_deref())?;
    create_dir(&args.out)?;
    if let Some(month_text) = &args.month {
        let month = parse_month(month_text).map_err(|e| CliError::Usage(format!("--month: {e}")))?;
        if !panel.months().contains(&month) {
            return Err(CliError::Usage(format!("month {month_text} is not in the panel")));
        }
        let edges_path = args.edges.as_ref().ok_or_else(|| CliError::Usage("--edges is required with --month".into()))?;
        let edge_bytes = run.read_input(edges_path)?;
        let roster: BTreeSet<String> = panel.units().into_iter().collect();
        let graph = neighbor_graph_from_reader(&edge_bytes[..], Some(&roster))?;
        let rates = rate_values(&panel, &args.rate_column)?;
        let values: BTreeMap<String, f64> = (0..panel.len())
            .filter(|&i| panel.months()[i] == month)
            .filter_map(|i| rates[i].filter(|v| v.is_finite()).map(|v| (panel.unit_ids()[i].clone(), v)))
            .collect();
        let result = match morans_i(&values, &graph) {
            Err(DiagnosticsError::ConstantField(n)) => {
                eprintln!(
                    "{} is constant across the {n} connected units in {month_text}; Moran's I is undefined",
                    args.rate_column
                );
                return Ok(EXIT_DEGRADED);
            }
            other => other?,
        };
        let permutation = if args.permutations > 0 {
            run.seeds.push(args.seed);
            Some(moran_permutation(&values, &graph, args.permutations, args.seed)?)
        } else {
            None
        };
        let rows = values.iter().map(|(id, v)| {
            let mean = result.neighbor_means.get(id).map(|m| format!("{m}")).unwrap_or_default();
            vec![id.clone(), format!("{v}"), mean]
        });
        let header = ["id", "value", "neighbor_mean"].map(String::from);
        run.write_output(&args.out.join("moran.csv"), &csv_bytes(&header, rows)?)?;
        let doc = MoranSummaryDoc {
            month: format_month(month),
            rate_column: args.rate_column.clone(),
            i: result.i,
            slope: result.slope,
            n_used: result.n_used,
            n_isolated: result.n_isolated,
            permutation,
        };
        let mut json = serde_json::to_vec_pretty(&doc)?;
        json.push(b'\n');
        run.write_output(&args.out.join("moran_summary.json"), &json)?;
        run.progress(&format!("Moran's I = {} over {} units", result.i, result.n_used));
    } else if let Some(max_lag) = args.acf_maxlag {
        let report = temporal_acf(&panel, &args.rate_column, max_lag)?;
        let mut header = vec!["lag".to_string()];
        header.extend(ACF_LEVELS.iter().map(|l| format!("q{:02}", (l * 100.0).round() as u32)));
        header.push("n_units".into());
        let rows = report.summaries.iter().map(|s| {
            let mut row = vec![s.lag.to_string()];
            row.extend(s.weighted_quantiles.iter().map(|q| format!("{}", q.value)));
            row.push(s.per_unit_acf.len().to_string());
            row
        });
        run.write_output(&args.out.join("acf.csv"), &csv_bytes(&header, rows)?)?;
        let unit_rows = report.summaries.iter().flat_map(|s| {
            s.per_unit_acf.iter().map(move |(u, a)| vec![u.clone(), s.lag.to_string(), format!("{a}")])
        });
        let header = ["unit", "lag", "acf"].map(String::from);
        run.write_output(&args.out.join("acf_units.csv"), &csv_bytes(&header, unit_rows)?)?;
        if !report.excluded_units.is_empty() {
            eprintln!(
                "excluded {} unit(s) with constant series: {}",
                report.excluded_units.len(),
                report.excluded_units.join(", ")
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(args: &SimulateArgs, run: &mut Run) -> Result<i32, CliError> {
    let mut config = match &args.config {
        Some(path) => SimConfig::parse(&String::from_utf8_lossy(&run.read_input(path)?))?,
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    run.seeds.push(config.seed);
    let sim = simulate_panel(&config)?;
    create_dir(&args.out)?;
    let mut panel_bytes = Vec::new();
    write_panel(&sim.panel, &mut panel_bytes).map_err(|source| CliError::Data { path: args.out.join("panel.csv"), source })?;
    run.write_output(&args.out.join("panel.csv"), &panel_bytes)?;
    let mut truth = Vec::new();
    sim.write_truth(&mut truth)?;
    run.write_output(&args.out.join("truth.csv"), &truth)?;
    let header = ["id_a", "id_b"].map(String::from);
    let edges = csv_bytes(&header, sim.rook_edges().into_iter().map(|(a, b)| vec![a, b]))?;
    run.write_output(&args.out.join("edges.csv"), &edges)?;
    run.write_output(&args.out.join("config.txt"), config.to_text().as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_demo(args: &DemoArgs, run: &mut Run) -> Result<i32, CliError> {
    run.seeds.push(args.seed);
    let demo = spline_demo(args.seed)?;
    create_dir(&args.out)?;
    let header = ["x", "y"].map(String::from);
    let rows = demo.data.iter().map(|(x, y)| vec![format!("{x}"), y.to_string()]);
    run.write_output(&args.out.join("demo_data.csv"), &csv_bytes(&header, rows)?)?;

    let k = demo.basis.first().map_or(0, Vec::len);
    let mut header = vec!["x".to_string()];
    header.extend((1..=k).map(|j| format!("b{j}")));
    let rows = demo.grid.iter().zip(&demo.basis).map(|(x, b)| {
        std::iter::once(format!("{x}")).chain(b.iter().map(|v| format!("{v}"))).collect()
    });
    run.write_output(&args.out.join("demo_basis.csv"), &csv_bytes(&header, rows)?)?;

    let mut header = vec!["x".to_string()];
    header.extend((1..=k).map(|j| format!("weighted_b{j}")));
    header.extend(["intercept", "fitted", "truth"].map(String::from));
    let rows = (0..demo.grid.len()).map(|i| {
        let mut row = vec![format!("{}", demo.grid[i])];
        row.extend(demo.weighted[i].iter().map(|v| format!("{v}")));
        row.extend([demo.intercept, demo.fitted[i], demo.truth[i]].map(|v| format!("{v}")));
        row
    });
    run.write_output(&args.out.join("demo_fit.csv"), &csv_bytes(&header, rows)?)?;
    run.progress(&format!("fitted RMSE {} (constant {})", demo.fitted_rmse(), demo.constant_rmse()));
    Ok(EXIT_OK)
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut run = Run::new(command_line, cli.verbose);
    let (result, manifest) = match &cli.command {
        Command::Fit(a) => (cmd_fit(a, &mut run), manifest_beside(&a.out)),
        Command::Predict(a) => (cmd_predict(a, &mut run), manifest_beside(&a.out)),
        Command::Diagnose(a) => (cmd_diagnose(a, &mut run), a.out.join("manifest.json")),
        Command::Simulate(a) => (cmd_simulate(a, &mut run), a.out.join("manifest.json")),
        Command::DemoSplines(a) => (cmd_demo(a, &mut run), a.out.join("manifest.json")),
    };
    match result {
        Ok(code) => match run.finish(&manifest) {
            Ok(()) => code,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
