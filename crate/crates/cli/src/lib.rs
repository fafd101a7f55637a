//! Command implementations behind the `modal-simex` binary.
//!
//! `fit` runs SIMEX on a user data file, `simulate` runs a Monte Carlo
//! scenario and `oracle-check` runs the built-in extrapolation oracles.
//! Results go to the output file or standard output; progress and errors go
//! to standard error.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use modal_simex::estimators::EstimatorOptions;
use modal_simex::model::ModelKind;
use modal_simex::simex::{
    equally_spaced, evaluate_extrapolant, fit_extrapolant, naive_estimate, simex_estimate, MeasurementError,
};
use modal_simex::simstudy::{
    emit_table, generate_linear_normal, run_scenario, ScenarioFile, StudySettings, TableFormat,
};
use modal_simex::{Bandwidth, Dataset, Error, Estimator, Extrapolant, Method, RegressionModel, RowMatrix, SimexConfig};

const BUNDLED: [(&str, &str); 6] = [
    ("table1", include_str!("../scenarios/table1.toml")),
    ("table2", include_str!("../scenarios/table2.toml")),
    ("table3", include_str!("../scenarios/table3.toml")),
    ("table4", include_str!("../scenarios/table4.toml")),
    ("table5", include_str!("../scenarios/table5.toml")),
    ("table6", include_str!("../scenarios/table6.toml")),
];

/// Tolerance of the analytic extrapolation oracle.
pub const ANALYTIC_TOL: f64 = 1e-6;
/// Minimum misfit expected from the linear extrapolant on the rational curve.
pub const LINEAR_MISFIT_MIN: f64 = 0.01;
/// Tolerance of the linear-normal Monte Carlo oracle.
pub const MONTE_CARLO_TOL: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "modal-simex", version, about = "SIMEX modal regression with covariate measurement error")]
pub struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV file with columns `y,w` or `y,w1,...,wp`.
    Fit(FitArgs),
    /// Run a Monte Carlo scenario and write the summary table.
    Simulate(SimulateArgs),
    /// Run the analytic and Monte Carlo extrapolation oracles.
    OracleCheck(OracleArgs),
}

/// SIMEX settings; unset flags take the study defaults (or the scenario
/// file's values).
#[derive(Debug, Clone, Default, Args)]
pub struct SimexFlags {
    /// Number of equally spaced λ-values on [0, lambda-max].
    #[arg(long)]
    pub lambda_points: Option<usize>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// Remeasurements per λ.
    #[arg(long = "b", visible_alias = "B")]
    pub b: Option<usize>,
    /// linear, quadratic or rational.
    #[arg(long)]
    pub extrapolant: Option<Extrapolant>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputFlags {
    /// Output file (default: standard output).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// csv or text.
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    pub format: TableFormat,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Known measurement-error variance (single covariate).
    #[arg(long, conflicts_with = "sigma_u_file")]
    pub sigma_u2: Option<f64>,
    /// CSV holding Σ_u row-major, one matrix row per line, no header.
    #[arg(long)]
    pub sigma_u_file: Option<PathBuf>,
    #[arg(long, default_value = "s-modal")]
    pub method: Method,
    /// exp or linear.
    #[arg(long, default_value = "exp")]
    pub model: ModelKind,
    /// Bandwidth constant c in h = c·n^(-1/7).
    #[arg(long, default_value_t = 0.8)]
    pub bandwidth_c: f64,
    #[command(flatten)]
    pub simex: SimexFlags,
    /// Write the per-(λ, b) trace CSV here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputFlags,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario TOML file, or a bundled name (table1 … table6).
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma_u2: Option<f64>,
    #[arg(long)]
    pub bandwidth_c: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated method labels, e.g. `S-Modal,N-Modal`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Grid points per coordinate for the second modal EM start (0: least-squares start only).
    #[arg(long)]
    pub em_screen_points: Option<usize>,
    #[command(flatten)]
    pub simex: SimexFlags,
    #[command(flatten)]
    pub output: OutputFlags,
    /// Suppress progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Sample size of the Monte Carlo check.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = StudySettings::default().seed)]
    pub seed: u64,
    /// Run only the analytic checks.
    #[arg(long)]
    pub skip_monte_carlo: bool,
}

fn parse_format(s: &str) -> Result<TableFormat, Error> {
    s.parse()
}

/// Runs a parsed command line, writing results to `out` unless an output
/// file was given.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    match cli.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
            pool.install(|| dispatch(&cli.command, out))
        }
        None => dispatch(&cli.command, out),
    }
}

fn dispatch(command: &Command, out: &mut (dyn Write + Send)) -> Result<()> {
    match command {
        Command::Fit(args) => cmd_fit(args, out),
        Command::Simulate(args) => cmd_simulate(args, out),
        Command::OracleCheck(args) => cmd_oracle_check(args, out),
    }
}

/// One machine-readable line, `error: <kind>: <message>`.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = match err.downcast_ref::<Error>() {
        Some(Error::Parse(_)) => "parse",
        Some(Error::Config(_)) => "config",
        Some(Error::InvalidArgument(_) | Error::Dimension { .. }) => "invalid-input",
        Some(Error::Extrapolation { .. } | Error::Pole { .. }) => "extrapolation",
        Some(Error::Singular(_)) => "numerical",
        Some(Error::Internal(_)) => "internal",
        None if err.downcast_ref::<io::Error>().is_some() => "io",
        None => "error",
    };
    let message = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error: {kind}: {message}")
}

fn write_output(flags: &OutputFlags, text: &str, out: &mut (dyn Write + Send)) -> Result<()> {
    match &flags.output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => out.write_all(text.as_bytes()).context("writing standard output"),
    }
}

/// Reads `y,w` / `y,w1,...,wp` data. Errors name the offending line.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let name = path.display();
    let mut reader =
        csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).with_context(|| format!("reading {name}"))?;
    let headers = reader.headers().map_err(|e| Error::Parse(format!("{name}: line 1: {e}")))?.clone();
    let columns: Vec<&str> = headers.iter().collect();
    let p = columns.len().saturating_sub(1);
    let header_ok = match columns.as_slice() {
        ["y", "w"] => true,
        ["y", rest @ ..] => !rest.is_empty() && rest.iter().enumerate().all(|(k, c)| *c == format!("w{}", k + 1)),
        _ => false,
    };
    if !header_ok {
        return Err(Error::Parse(format!(
            "{name}: line 1: expected header `y,w` or `y,w1,...,wp`, got `{}`",
            columns.join(",")
        ))
        .into());
    }

    let mut y = Vec::new();
    let mut x = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse(format!("{name}: line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (k, field) in record.iter().enumerate() {
            let value: f64 = field.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::Parse(format!("{name}: line {line}: column `{}`: not a finite number: `{field}`", columns[k]))
            })?;
            if k == 0 {
                y.push(value);
            } else {
                x.push(value);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Parse(format!("{name}: no data rows")).into());
    }
    let x = RowMatrix::new(y.len(), p, x)?;
    Ok(Dataset::new(y, x)?)
}

/// Reads a `p × p` covariance matrix, one row per line, no header.
pub fn read_covariance(path: &Path) -> Result<MeasurementError> {
    let name = path.display();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {name}"))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse(format!("{name}: line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for field in record.iter() {
            let v: f64 =
                field.parse().map_err(|_| Error::Parse(format!("{name}: line {line}: not a number: `{field}`")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 || values.len() != rows * rows {
        return Err(Error::Parse(format!(
            "{name}: expected a square matrix, got {rows} rows and {} values",
            values.len()
        ))
        .into());
    }
    Ok(MeasurementError::new(rows, values)?)
}

fn simex_config(flags: &SimexFlags, base: &StudySettings, noise: MeasurementError) -> Result<SimexConfig> {
    let config = SimexConfig::new(
        equally_spaced(flags.lambda_points.unwrap_or(base.lambda_points), flags.lambda_max.unwrap_or(base.lambda_max)),
        flags.b.unwrap_or(base.b),
        noise,
        flags.extrapolant.unwrap_or(base.extrapolant),
        flags.seed.unwrap_or(base.seed),
    )?;
    Ok(config)
}

pub fn cmd_fit(args: &FitArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let noise = match (&args.sigma_u2, &args.sigma_u_file) {
        (Some(s2), None) => MeasurementError::scalar(*s2)?,
        (None, Some(path)) => read_covariance(path)?,
        _ => {
            return Err(Error::Config(
                "the measurement-error variance is required: pass --sigma-u2 or --sigma-u-file".into(),
            )
            .into())
        }
    };
    // Validate the SIMEX settings before touching the data.
    let config = simex_config(&args.simex, &StudySettings::default(), noise)?;
    let data = read_dataset(&args.input)?;
    let model = RegressionModel::new(args.model, data.p())?;
    if data.n() < model.dim_theta() {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot identify {} parameters",
            data.n(),
            model.dim_theta()
        ))
        .into());
    }
    if config.noise().p() != data.p() {
        return Err(Error::Config(format!(
            "Σ_u is {0}×{0} but the data have {1} covariate column(s)",
            config.noise().p(),
            data.p()
        ))
        .into());
    }
    let h = Bandwidth::from_rule(args.bandwidth_c, data.n())?.h();
    let estimator = args.method.estimator(h);
    let opts = EstimatorOptions::default();
    let naive = naive_estimate(&estimator, &model, &data, &opts)?;

    let mut report = Report::default();
    report.push("n", "", data.n());
    report.push("method", "", args.method);
    report.push("model", "", args.model);
    if matches!(estimator, Estimator::Modal { .. }) {
        report.push("bandwidth", "", h);
    }
    report.push_vec("theta_naive", &naive.theta);
    report.push("naive_converged", "", naive.converged);

    if !args.method.is_simex() {
        if args.trace.is_some() {
            return Err(Error::Config(format!("{} is a naive method and has no λ-trace", args.method)).into());
        }
        return write_output(&args.output, &report.render(args.output.format), out);
    }

    let result = simex_estimate(&estimator, &data, &model, &config, 0, &opts);
    let trace = match &result {
        Ok(output) => Some(&output.trace),
        Err(Error::Extrapolation { trace, .. }) => Some(trace.as_ref()),
        Err(_) => None,
    };
    if let (Some(path), Some(trace)) = (&args.trace, trace) {
        let mut buf = Vec::new();
        trace.write_csv(model.dim_theta(), &mut buf)?;
        fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    }
    let output = result?;

    report.push_vec("theta_simex", &output.theta_simex);
    report.push("extrapolant", "", output.fit.family);
    for (k, gamma) in output.fit.gamma_hat.iter().enumerate() {
        for (j, g) in gamma.iter().enumerate() {
            report.push("extrapolant_param", format!("{}.{}", k + 1, j + 1), g);
        }
    }
    report.push("extrapolant_sse", "", output.fit.residual_sse);
    report.push("extrapolant_converged", "", output.fit.converged);
    let trace = &output.trace;
    for (j, (lambda, theta)) in trace.lambdas.iter().zip(&trace.theta_by_lambda).enumerate() {
        report.push("lambda", j + 1, lambda);
        for (k, t) in theta.iter().enumerate() {
            report.push("theta_lambda", format!("{}.{}", j + 1, k + 1), t);
        }
        report.push("dropped", j + 1, trace.dropped_count[j]);
    }
    report.push("quality_warning", "", trace.quality_warning);
    write_output(&args.output, &report.render(args.output.format), out)
}

/// `quantity,index,value` rows; the text form aligns the same rows.
#[derive(Default)]
struct Report {
    rows: Vec<(String, String, String)>,
}

impl Report {
    fn push(&mut self, quantity: &str, index: impl ToString, value: impl ReportValue) {
        self.rows.push((quantity.to_string(), index.to_string(), value.render()));
    }

    fn push_vec(&mut self, quantity: &str, values: &[f64]) {
        for (k, v) in values.iter().enumerate() {
            self.push(quantity, k + 1, *v);
        }
    }

    fn render(&self, format: TableFormat) -> String {
        let mut s = String::new();
        match format {
            TableFormat::Csv => {
                s.push_str("quantity,index,value\n");
                for (q, i, v) in &self.rows {
                    let _ = writeln!(s, "{q},{i},{v}");
                }
            }
            TableFormat::Text => {
                for (q, i, v) in &self.rows {
                    let label = if i.is_empty() { q.clone() } else { format!("{q}[{i}]") };
                    let _ = writeln!(s, "{label:<24}{v}");
                }
            }
        }
        s
    }
}

trait ReportValue {
    fn render(&self) -> String;
}

impl ReportValue for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ReportValue for &f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ReportValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, bool, Method, ModelKind, Extrapolant);

/// Looks a scenario up among the bundled files, then on disk.
pub fn load_scenario(name: &str) -> Result<ScenarioFile> {
    if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == name) {
        return Ok(ScenarioFile::parse(text)?);
    }
    let text = fs::read_to_string(name).with_context(|| format!("reading scenario {name}"))?;
    ScenarioFile::parse(&text).map_err(|e| anyhow::Error::new(e).context(format!("scenario {name}")))
}

/// The bundled scenario names.
pub fn bundled_scenarios() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Merges a scenario file with the flag overrides.
pub fn resolve_scenario(args: &SimulateArgs) -> Result<ScenarioFile> {
    let mut file = match &args.scenario {
        Some(name) => load_scenario(name)?,
        None if args.n.is_some() && args.sigma_u2.is_some() && args.reps.is_some() => ScenarioFile::default(),
        None => {
            return Err(Error::Config("simulate needs --scenario, or at least --n, --sigma-u2 and --reps".into()).into())
        }
    };
    if let Some(n) = args.n {
        file.n = n;
    }
    if let Some(s) = args.sigma_u2 {
        file.sigma_u2 = s;
    }
    if let Some(c) = args.bandwidth_c {
        file.bandwidth_c = c;
    }
    if let Some(r) = args.reps {
        file.reps = r;
    }
    if let Some(k) = args.em_screen_points {
        file.em_screen_points = k;
    }
    if let Some(m) = &args.methods {
        file.methods = m.iter().map(|m| m.label().to_string()).collect();
    }
    let f = &args.simex;
    if let Some(v) = f.lambda_points {
        file.lambda_points = v;
    }
    if let Some(v) = f.lambda_max {
        file.lambda_max = v;
    }
    if let Some(v) = f.b {
        file.b = v;
    }
    if let Some(v) = f.extrapolant {
        file.extrapolant = v;
    }
    if let Some(v) = f.seed {
        file.seed = v;
    }
    Ok(file)
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let file = resolve_scenario(args)?;
    let scenario = file.scenario()?;
    let settings = file.settings();
    let methods = file.methods()?;
    // Fail on a bad SIMEX configuration before any replication runs.
    settings.simex_config(scenario.sigma_u2)?;
    let quiet = args.quiet;
    let progress = move |done: usize, total: usize| {
        if !quiet {
            eprintln!("progress: {done}/{total} replications");
        }
    };
    let result = run_scenario(&scenario, &methods, &settings, &progress)?;
    write_output(&args.output, &emit_table(&result, args.output.format), out)
}

/// Extrapolated `θ̂(−1)` from the exact linear-normal attenuation curve
/// `θ(λ) = 1/(1 + (1+λ)·0.25)` on the default grid.
pub fn oracle_analytic(family: Extrapolant) -> Result<f64> {
    let (theta0, sigma_x2, sigma_u2) = (1.0, 1.0, 0.25);
    let grid = equally_spaced(10, 2.0);
    let values: Vec<f64> = grid.iter().map(|l| theta0 * sigma_x2 / (sigma_x2 + (1.0 + l) * sigma_u2)).collect();
    let (gamma, _) = fit_extrapolant(&grid, &values, family)?;
    Ok(evaluate_extrapolant(family, &gamma, -1.0)?)
}

/// SIMEX slope on seeded linear-normal data (`θ₀ = 1`, `σ_u² = 0.25`) with
/// the rational extrapolant and default λ-grid and B.
pub fn oracle_monte_carlo(estimator: &Estimator, n: usize, seed: u64) -> Result<f64> {
    let sigma_u2 = 0.25;
    let rep = generate_linear_normal(n, 1.0, sigma_u2, seed);
    let data = Dataset::new(rep.y, RowMatrix::column(rep.w))?;
    let model = RegressionModel::Linear { p: 1 };
    let config = SimexConfig::new(
        equally_spaced(10, 2.0),
        50,
        MeasurementError::scalar(sigma_u2)?,
        Extrapolant::Rational,
        seed,
    )?;
    let output = simex_estimate(estimator, &data, &model, &config, 0, &EstimatorOptions::default())?;
    Ok(output.theta_simex[0])
}

pub fn cmd_oracle_check(args: &OracleArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let mut failures = Vec::new();
    let mut report = |name: &str, ok: bool, detail: String| -> io::Result<()> {
        if !ok {
            failures.push(format!("{name} ({detail})"));
        }
        writeln!(out, "{name}: {} {detail}", if ok { "pass" } else { "FAIL" })
    };

    let rational = oracle_analytic(Extrapolant::Rational)?;
    let err = (rational - 1.0).abs();
    report(
        "analytic-rational",
        err < ANALYTIC_TOL,
        format!("theta(-1)={rational:.12} |error|={err:.3e} tol={ANALYTIC_TOL:e}"),
    )?;

    // The linear family cannot represent the rational curve; a large misfit
    // is the expected outcome.
    let linear = oracle_analytic(Extrapolant::Linear)?;
    let err = (linear - 1.0).abs();
    report(
        "analytic-linear-expected-misfit",
        err > LINEAR_MISFIT_MIN,
        format!("theta(-1)={linear:.6} |error|={err:.4} min={LINEAR_MISFIT_MIN}"),
    )?;

    if !args.skip_monte_carlo {
        let theta = oracle_monte_carlo(&Estimator::Lse, args.n, args.seed)?;
        let err = (theta - 1.0).abs();
        report(
            "monte-carlo-linear-normal",
            err < MONTE_CARLO_TOL,
            format!("n={} theta_simex={theta:.6} |error|={err:.4} tol={MONTE_CARLO_TOL}", args.n),
        )?;
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Internal(format!("oracle check failed: {}", failures.join("; "))).into())
    }
}
