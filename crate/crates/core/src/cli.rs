//! Command-line driver.
//!
//! Every subcommand takes `--seed`, `--config`, `--out` and `--format`.
//! Values given as flags win over values from the JSON config file, which
//! win over built-in defaults. When `--out` is set, a `<out>.meta.json`
//! sidecar records the command, seed and resolved configuration.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or schema
//! error, 4 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::channel::{
    fit_model, normality_score, predict_success_uniform, synthesize_trace_in, ChannelModel,
    RssTrace,
};
use crate::entropy::tcomplexity::T_ENTROPY_SCALE;
use crate::entropy::{
    alice_mean_vectors, default_grid, entropy_curve, write_report_csv, TSTRING_SYMBOLS,
};
use crate::error::Error;
use crate::predict::{
    entropy_projection, write_projection_csv, LagFallback, Method, ProjectionRequest,
};
use crate::protocol::{
    agreed_rate, first_try_rate, run_batch, write_summary_csv, ProtocolConfig, RetryPolicy,
    RunSummary,
};
use crate::quantizer::MetricSpace;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_POSITIONS: usize = 250;
pub const DEFAULT_RUNS: usize = 1000;
pub const DEFAULT_REPLICATES: usize = 100;
pub const DEFAULT_MAX_TARGET: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "fskey", version, about = "RSS key generation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with default values for any option.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize an RSS trace from a channel model.
    TraceGen(TraceGenArgs),
    /// Monte-Carlo runs of the key generation protocol.
    Simulate(SimulateArgs),
    /// Fit a channel model to a trace.
    Fit(FitArgs),
    /// Entropy of quantized channel means over a tolerance grid.
    Entropy(EntropyArgs),
    /// Secrecy projection to more channels.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct TraceGenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_min: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_max: Option<i32>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Base tolerance(s) in dB. More than one value produces a sweep table.
    #[arg(long, value_delimiter = ',')]
    pub tolerances: Option<Vec<f64>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_min: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_max: Option<i32>,
    #[arg(long, value_enum)]
    pub retry_policy: Option<RetryPolicyArg>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub loss_probability: Option<f64>,
    /// Where to write the aggregate statistics; defaults to `<out>.stats.json`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetryPolicyArg {
    Uniform,
    PerChannel,
}

impl From<RetryPolicyArg> for RetryPolicy {
    fn from(p: RetryPolicyArg) -> Self {
        match p {
            RetryPolicyArg::Uniform => RetryPolicy::Uniform,
            RetryPolicyArg::PerChannel => RetryPolicy::PerChannel,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, conflicts_with = "model")]
    pub trace: Option<PathBuf>,
    /// Model to synthesize `--positions` positions from instead of a trace.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_min: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_max: Option<i32>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Option<Vec<MethodArg>>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_enum)]
    pub fallback: Option<FallbackArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    FixedDeterminant,
    DiagonalUniform,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::FixedDeterminant => Method::FixedDeterminant,
            MethodArg::DiagonalUniform => Method::DiagonalUniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FallbackArg {
    Geometric,
    HighestLag,
}

impl From<FallbackArg> for LagFallback {
    fn from(f: FallbackArg) -> Self {
        match f {
            FallbackArg::Geometric => LagFallback::Geometric,
            FallbackArg::HighestLag => LagFallback::HighestLag,
        }
    }
}

/// Values a `--config` file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub positions: Option<usize>,
    pub k: Option<usize>,
    pub mu_min: Option<i32>,
    pub mu_max: Option<i32>,
    pub runs: Option<usize>,
    pub tolerances: Option<Vec<f64>>,
    pub retry_policy: Option<RetryPolicy>,
    pub max_retries: Option<u32>,
    pub loss_probability: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub targets: Option<Vec<usize>>,
    pub methods: Option<Vec<Method>>,
    pub stride: Option<usize>,
    pub replicates: Option<usize>,
    pub fallback: Option<LagFallback>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e {
                Error::InvalidParameter(_) | Error::AlphabetOverflow { .. } => 2,
                Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
                Error::NotPositiveDefinite(_)
                | Error::NotPositiveSemiDefinite(_)
                | Error::UnknownLevel(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::TraceGen(a) => cmd_trace_gen(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Entropy(a) => cmd_entropy(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn load_config(common: &Common) -> CliResult<FileConfig> {
    let Some(path) = &common.config else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

struct Resolved {
    seed: u64,
    format: Format,
    out: Option<PathBuf>,
}

fn resolve_common(common: &Common, file: &FileConfig, default_format: Format) -> Resolved {
    Resolved {
        seed: common.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        format: common.format.or(file.format).unwrap_or(default_format),
        out: common.out.clone().or_else(|| file.out.clone()),
    }
}

fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

fn required(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn space(mu_min: i32, mu_max: i32) -> CliResult<MetricSpace> {
    MetricSpace::new(mu_min, mu_max).map_err(|e| CliError::Usage(e.to_string()))
}

fn read_model(path: &Path) -> CliResult<ChannelModel> {
    let text = fs::read_to_string(path).map_err(Error::Io)?;
    Ok(ChannelModel::from_json(&text)?)
}

fn read_trace(path: &Path) -> CliResult<RssTrace> {
    let file = fs::File::open(path).map_err(Error::Io)?;
    Ok(RssTrace::read_csv(std::io::BufReader::new(file))?)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(Error::Io)?,
        None => std::io::stdout()
            .lock()
            .write_all(bytes)
            .map_err(Error::Io)?,
    }
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn write_meta(
    out: Option<&Path>,
    command: &str,
    seed: u64,
    config: Value,
    report: Option<Value>,
) -> CliResult<()> {
    let Some(out) = out else { return Ok(()) };
    let mut meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
    });
    if let Some(report) = report {
        meta["report"] = report;
    }
    fs::write(sidecar(out, ".meta.json"), pretty(&meta)?).map_err(Error::Io)?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::Json)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn cmd_trace_gen(a: &TraceGenArgs) -> CliResult<()> {
    let file = load_config(&a.common)?;
    let r = resolve_common(&a.common, &file, Format::Csv);
    let model_path = required(&a.model, &file.model, "model")?;
    let positions = pick(&a.positions, &file.positions, DEFAULT_POSITIONS);
    let k = pick(&a.k, &file.k, 16);
    let defaults = MetricSpace::default();
    let space = space(
        pick(&a.mu_min, &file.mu_min, defaults.mu_min),
        pick(&a.mu_max, &file.mu_max, defaults.mu_max),
    )?;
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let model = read_model(&model_path)?;
    let trace = synthesize_trace_in(&model, space, positions, k, r.seed)?;
    let bytes = match r.format {
        Format::Csv => {
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            buf
        }
        Format::Json => pretty(&trace.rows)?,
    };
    emit(r.out.as_deref(), &bytes)?;
    let config = json!({
        "model": path_str(&model_path),
        "positions": positions,
        "k": k,
        "mu_min": space.mu_min,
        "mu_max": space.mu_max,
        "format": r.format,
    });
    write_meta(r.out.as_deref(), "trace-gen", r.seed, config, None)
}

/// Aggregate statistics of one simulated tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateStats {
    pub tolerance: f64,
    pub runs: usize,
    pub first_try_success_rate: f64,
    pub agreed_rate: f64,
    /// Closed-form first-try success probability for the model's noise.
    pub predicted_success: f64,
    /// Empirical minus predicted first-try success.
    pub divergence: f64,
    pub mean_retries: f64,
    /// Empirical quantiles of the largest per-channel |mu_A - mu_B| of the
    /// first attempt, at probabilities 0, 0.01, ..., 1.
    pub max_deviation_ecdf: Vec<EcdfPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoint {
    pub probability: f64,
    pub max_deviation: f64,
}

pub fn simulate_stats(rows: &[RunSummary], tolerance: f64, model: &ChannelModel) -> SimulateStats {
    let first = first_try_rate(rows);
    let predicted = predict_success_uniform(tolerance, model.noise_sigma(), model.n());
    let mut dev: Vec<f64> = rows.iter().filter_map(|r| r.max_deviation).collect();
    dev.sort_by(f64::total_cmp);
    let max_deviation_ecdf = if dev.is_empty() {
        Vec::new()
    } else {
        (0..=100)
            .map(|i| {
                let probability = f64::from(i) / 100.0;
                let idx =
                    ((probability * dev.len() as f64).ceil() as usize).clamp(1, dev.len()) - 1;
                EcdfPoint {
                    probability,
                    max_deviation: dev[idx],
                }
            })
            .collect()
    };
    SimulateStats {
        tolerance,
        runs: rows.len(),
        first_try_success_rate: first,
        agreed_rate: agreed_rate(rows),
        predicted_success: predicted,
        divergence: first - predicted,
        mean_retries: if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| f64::from(r.retries)).sum::<f64>() / rows.len() as f64
        },
        max_deviation_ecdf,
    }
}

pub const SWEEP_HEADER: &str =
    "tolerance,runs,first_try_success_rate,agreed_rate,predicted_success";

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let file = load_config(&a.common)?;
    let r = resolve_common(&a.common, &file, Format::Csv);
    let model_path = required(&a.model, &file.model, "model")?;
    let runs = pick(&a.runs, &file.runs, DEFAULT_RUNS);
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let tolerances = pick(&a.tolerances, &file.tolerances, vec![1.0]);
    if tolerances.is_empty() {
        return Err(CliError::Usage(
            "--tolerances needs at least one value".into(),
        ));
    }
    let model = read_model(&model_path)?;
    let defaults = ProtocolConfig::default();
    let base = ProtocolConfig {
        n: model.n(),
        k: pick(&a.k, &file.k, defaults.k),
        mu_min: pick(&a.mu_min, &file.mu_min, defaults.mu_min),
        mu_max: pick(&a.mu_max, &file.mu_max, defaults.mu_max),
        base_tolerance: tolerances[0],
        retry_policy: a
            .retry_policy
            .map(RetryPolicy::from)
            .or(file.retry_policy)
            .unwrap_or_default(),
        max_retries: pick(&a.max_retries, &file.max_retries, defaults.max_retries),
        loss_probability: pick(
            &a.loss_probability,
            &file.loss_probability,
            defaults.loss_probability,
        ),
    };
    let configs: Vec<ProtocolConfig> = tolerances
        .iter()
        .map(|&t| ProtocolConfig {
            base_tolerance: t,
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }

    let mut results = Vec::with_capacity(configs.len());
    for c in &configs {
        let rows = run_batch(&model, c, runs, r.seed)?;
        let stats = simulate_stats(&rows, c.base_tolerance, &model);
        results.push((rows, stats));
    }

    let sweep = results.len() > 1;
    let bytes = match (r.format, sweep) {
        (Format::Csv, false) => {
            let mut buf = Vec::new();
            write_summary_csv(&results[0].0, &mut buf)?;
            buf
        }
        (Format::Csv, true) => {
            let mut buf = String::from(SWEEP_HEADER);
            buf.push('\n');
            for (_, s) in &results {
                buf.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    s.tolerance,
                    s.runs,
                    s.first_try_success_rate,
                    s.agreed_rate,
                    s.predicted_success
                ));
            }
            buf.into_bytes()
        }
        (Format::Json, false) => pretty(&json!({ "runs": results[0].0, "stats": results[0].1 }))?,
        (Format::Json, true) => pretty(&results.iter().map(|(_, s)| s).collect::<Vec<_>>())?,
    };
    emit(r.out.as_deref(), &bytes)?;

    let stats_path = a
        .stats
        .clone()
        .or_else(|| file.stats.clone())
        .or_else(|| r.out.as_deref().map(|o| sidecar(o, ".stats.json")));
    if let Some(path) = stats_path {
        let stats: Vec<&SimulateStats> = results.iter().map(|(_, s)| s).collect();
        let body = if sweep {
            pretty(&stats)?
        } else {
            pretty(stats[0])?
        };
        fs::write(path, body).map_err(Error::Io)?;
    }
    let config = json!({
        "model": path_str(&model_path),
        "runs": runs,
        "tolerances": tolerances,
        "protocol": base,
        "format": r.format,
    });
    write_meta(r.out.as_deref(), "simulate", r.seed, config, None)
}

/// Fit diagnostics written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub positions: usize,
    pub samples_per_channel: usize,
    pub degenerate: bool,
    pub warnings: Vec<String>,
    /// PPCC of each channel's position means; absent for constant channels
    /// or fewer than 10 positions.
    pub ppcc: Vec<Option<f64>>,
    pub ppcc_min: Option<f64>,
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let file = load_config(&a.common)?;
    let r = resolve_common(&a.common, &file, Format::Json);
    if r.format != Format::Json {
        return Err(CliError::Usage(
            "fit writes a JSON model; --format csv is not supported".into(),
        ));
    }
    let trace_path = required(&a.trace, &file.trace, "trace")?;
    let trace = read_trace(&trace_path)?;
    let positions = trace.positions()?;
    if positions.len() < 2 {
        return Err(CliError::Usage(format!(
            "fitting needs at least 2 positions, trace has {}",
            positions.len()
        )));
    }
    let fitted = fit_model(&trace)?;
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    let means: Vec<Vec<f64>> = positions
        .iter()
        .map(|p| {
            p.alice_means()
                .iter()
                .zip(p.bob_means())
                .map(|(x, y)| 0.5 * (x + y))
                .collect()
        })
        .collect();
    let ppcc: Vec<Option<f64>> = (0..fitted.model.n())
        .map(|ch| normality_score(&means.iter().map(|v| v[ch]).collect::<Vec<_>>()).ok())
        .collect();
    let ppcc_min = ppcc.iter().flatten().copied().reduce(f64::min);
    let report = FitReport {
        positions: fitted.positions,
        samples_per_channel: fitted.samples_per_channel,
        degenerate: fitted.degenerate,
        warnings: fitted.warnings.clone(),
        ppcc,
        ppcc_min,
    };
    let mut bytes = fitted.model.to_json().into_bytes();
    bytes.push(b'\n');
    emit(r.out.as_deref(), &bytes)?;
    let config = json!({ "trace": path_str(&trace_path), "format": r.format });
    write_meta(
        r.out.as_deref(),
        "fit",
        r.seed,
        config,
        Some(serde_json::to_value(&report).map_err(Error::Json)?),
    )
}

pub fn cmd_entropy(a: &EntropyArgs) -> CliResult<()> {
    let file = load_config(&a.common)?;
    let r = resolve_common(&a.common, &file, Format::Csv);
    let defaults = MetricSpace::default();
    let space = space(
        pick(&a.mu_min, &file.mu_min, defaults.mu_min),
        pick(&a.mu_max, &file.mu_max, defaults.mu_max),
    )?;
    let grid = pick(&a.grid, &file.grid, default_grid());
    if grid.is_empty() {
        return Err(CliError::Usage(
            "--grid needs at least one tolerance".into(),
        ));
    }
    if let Some(&t) = grid.iter().find(|t| t.is_nan() || **t <= 0.0) {
        return Err(CliError::Usage(format!(
            "tolerances must be positive, got {t}"
        )));
    }
    let trace_flag = a.trace.clone().or_else(|| {
        if a.model.is_none() {
            file.trace.clone()
        } else {
            None
        }
    });
    let (source, means) = match (trace_flag, a.model.clone().or_else(|| file.model.clone())) {
        (Some(trace_path), _) => {
            let trace = read_trace(&trace_path)?;
            let positions = trace.positions()?;
            (
                json!({ "trace": path_str(&trace_path) }),
                alice_mean_vectors(&positions),
            )
        }
        (None, Some(model_path)) => {
            let positions = pick(&a.positions, &file.positions, DEFAULT_POSITIONS);
            let k = pick(&a.k, &file.k, 16);
            let model = read_model(&model_path)?;
            let trace = synthesize_trace_in(&model, space, positions, k, r.seed)?;
            let source = json!({ "model": path_str(&model_path), "positions": positions, "k": k });
            (source, alice_mean_vectors(&trace.positions()?))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "one of --trace or --model is required".into(),
            ))
        }
    };
    if means.is_empty() {
        return Err(CliError::Lib(Error::Data("no positions to analyze".into())));
    }
    let reports = entropy_curve(&means, space, &grid).map_err(|e| match e {
        Error::AlphabetOverflow { .. } => CliError::Usage(format!(
            "{e}; tolerances must exceed {:.4} dB for this metric space",
            space.width() / (2.0 * (TSTRING_SYMBOLS + 1) as f64)
        )),
        other => CliError::Lib(other),
    })?;
    let bytes = match r.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_report_csv(&reports, &mut buf)?;
            buf
        }
        Format::Json => pretty(&reports)?,
    };
    emit(r.out.as_deref(), &bytes)?;
    let config = json!({
        "source": source,
        "grid": grid,
        "t_entropy_scale": T_ENTROPY_SCALE,
        "mu_min": space.mu_min,
        "mu_max": space.mu_max,
        "format": r.format,
    });
    write_meta(r.out.as_deref(), "entropy", r.seed, config, None)
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let file = load_config(&a.common)?;
    let r = resolve_common(&a.common, &file, Format::Csv);
    let model_path = required(&a.model, &file.model, "model")?;
    let model = read_model(&model_path)?;
    let stride = pick(&a.stride, &file.stride, 1);
    if stride == 0 {
        return Err(CliError::Usage("--stride must be at least 1".into()));
    }
    let thinned = model.n().div_ceil(stride);
    if thinned < 2 {
        return Err(CliError::Usage(format!(
            "stride {stride} leaves fewer than two of the model's {} channels",
            model.n()
        )));
    }
    let targets = a
        .targets
        .clone()
        .or_else(|| file.targets.clone())
        .unwrap_or_else(|| (thinned..=DEFAULT_MAX_TARGET.max(thinned)).collect());
    if let Some(&m) = targets.iter().find(|&&m| m < thinned) {
        return Err(CliError::Usage(format!(
            "target {m} is below the {thinned} channels left after stride {stride}"
        )));
    }
    let methods: Vec<Method> = a
        .methods
        .as_ref()
        .map(|m| m.iter().map(|&x| x.into()).collect())
        .or_else(|| file.methods.clone())
        .unwrap_or_else(|| vec![Method::FixedDeterminant, Method::DiagonalUniform]);
    let replicates = pick(&a.replicates, &file.replicates, DEFAULT_REPLICATES);
    if replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    let fallback = a
        .fallback
        .map(LagFallback::from)
        .or(file.fallback)
        .unwrap_or_default();
    let request = ProjectionRequest {
        targets: targets.clone(),
        methods: methods.clone(),
        stride,
        replicates,
        seed: r.seed,
        fallback,
    };
    let rows = entropy_projection(model.cov(), &request)?;
    for row in rows.iter().filter(|r| r.clipped > 0) {
        eprintln!(
            "warning: {} eigenvalues clipped at {} channels ({})",
            row.clipped,
            row.channels,
            row.method.name()
        );
    }
    let bytes = match r.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_projection_csv(&rows, &mut buf)?;
            buf
        }
        Format::Json => pretty(&rows)?,
    };
    emit(r.out.as_deref(), &bytes)?;
    let config = json!({
        "model": path_str(&model_path),
        "targets": targets,
        "methods": methods,
        "stride": stride,
        "replicates": replicates,
        "fallback": fallback,
        "format": r.format,
    });
    write_meta(r.out.as_deref(), "predict", r.seed, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let file = FileConfig {
            seed: Some(5),
            format: Some(Format::Json),
            ..FileConfig::default()
        };
        let flags = Common {
            seed: Some(9),
            ..Common::default()
        };
        let r = resolve_common(&flags, &file, Format::Csv);
        assert_eq!((r.seed, r.format), (9, Format::Json));
        let r = resolve_common(&Common::default(), &FileConfig::default(), Format::Csv);
        assert_eq!((r.seed, r.format), (DEFAULT_SEED, Format::Csv));
        assert_eq!(pick(&None, &Some(3), 1), 3);
        assert_eq!(pick(&Some(2), &Some(3), 1), 2);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"seed": 1, "sead": 2}"#).is_err());
        let c: FileConfig =
            serde_json::from_str(r#"{"methods": ["diagonal_uniform"], "fallback": "highest_lag"}"#)
                .unwrap();
        assert_eq!(c.methods, Some(vec![Method::DiagonalUniform]));
        assert_eq!(c.fallback, Some(LagFallback::HighestLag));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Lib(Error::Data(String::new())).exit_code(), 3);
        assert_eq!(
            CliError::Lib(Error::NotPositiveDefinite(-1.0)).exit_code(),
            4
        );
        assert_eq!(run(["fskey", "simulate", "--runs", "x"]), 2);
        assert_eq!(run(["fskey", "bogus"]), 2);
        assert_eq!(run(["fskey", "predict"]), 2);
    }

    #[test]
    fn ecdf_quantiles() {
        let model = ChannelModel::toeplitz(2, -70.0, 4.0, 0.5, 0.5).unwrap();
        let rows: Vec<RunSummary> = (0..10)
            .map(|i| RunSummary {
                run: i,
                outcome: crate::protocol::Outcome::Agreed,
                retries: 0,
                secret_bits: 10,
                first_try_success: i < 5,
                max_deviation: Some(i as f64),
            })
            .collect();
        let s = simulate_stats(&rows, 1.0, &model);
        assert_eq!(s.first_try_success_rate, 0.5);
        assert_eq!(s.max_deviation_ecdf.len(), 101);
        assert_eq!(s.max_deviation_ecdf[0].max_deviation, 0.0);
        assert_eq!(s.max_deviation_ecdf[50].max_deviation, 4.0);
        assert_eq!(s.max_deviation_ecdf[100].max_deviation, 9.0);
        assert!((s.divergence - (0.5 - s.predicted_success)).abs() < 1e-15);
    }
}
