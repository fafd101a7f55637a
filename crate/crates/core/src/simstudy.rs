//! Monte Carlo study: data generation, the six competing methods, and
//! mean / bias / MSE tables.
//!
//! Data follow `Y = α·exp(βX) + γ·exp(βX)·ε` with `X ~ U(0, 1)`, `ε` a
//! two-component normal mixture, and `W = X + U`, `U ~ N(0, σ_u²)`.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimators::{modal_fit, Dataset, EmOptions, Estimator, EstimatorOptions};
use crate::exec;
use crate::kernel::{phi, Bandwidth};
use crate::matrix::RowMatrix;
use crate::model::RegressionModel;
use crate::rng::{self, tag, Stream};
use crate::simex::{equally_spaced, naive_lse, simex_estimate, Extrapolant, MeasurementError, SimexConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Finite normal mixture for the model error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMixture {
    components: Vec<MixtureComponent>,
}

impl ErrorMixture {
    /// Mode of the default mixture (reference constant).
    pub const DEFAULT_MODE: f64 = 1.0;
    /// Median of the default mixture (reference constant, two decimals).
    pub const DEFAULT_MEDIAN: f64 = 0.67;

    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if components.iter().any(|c| !(c.weight > 0.0 && c.sd > 0.0 && c.mean.is_finite() && c.sd.is_finite())) {
            return Err(Error::invalid("mixture weights and sds must be positive and finite"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(ErrorMixture { components })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }
}

impl Default for ErrorMixture {
    /// `0.5·N(−1, 2.5²) + 0.5·N(1, 0.5²)`: mean 0, mode 1, median ≈ 0.67.
    fn default() -> Self {
        ErrorMixture {
            components: vec![
                MixtureComponent { weight: 0.5, mean: -1.0, sd: 2.5 },
                MixtureComponent { weight: 0.5, mean: 1.0, sd: 0.5 },
            ],
        }
    }
}

/// `n` i.i.d. mixture draws: pick a component by weight, then draw from it.
pub fn sample_mixture(mix: &ErrorMixture, n: usize, stream: &mut Stream) -> Vec<f64> {
    let normals: Vec<Normal<f64>> =
        mix.components.iter().map(|c| Normal::new(c.mean, c.sd).expect("validated sd")).collect();
    let last = mix.components.len() - 1;
    (0..n)
        .map(|_| {
            let u: f64 = stream.random();
            let mut acc = 0.0;
            let mut k = last;
            for (i, c) in mix.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            normals[k].sample(stream)
        })
        .collect()
}

/// Mode of a Gaussian kernel density estimate, found on a grid of spacing
/// `resolution` after binning the sample at the same spacing.
pub fn kde_mode(samples: &[f64], h: f64, resolution: f64) -> f64 {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = ((hi - lo) / resolution).floor() as usize + 1;
    let mut counts = vec![0u32; bins];
    for &s in samples {
        counts[((s - lo) / resolution) as usize] += 1;
    }
    let reach = (6.0 * h / resolution).ceil() as isize;
    let kernel: Vec<f64> = (-reach..=reach).map(|k| phi(k as f64 * resolution / h)).collect();
    let density = exec::map_indexed(bins, |i| {
        let mut total = 0.0;
        for (o, kv) in kernel.iter().enumerate() {
            let j = i as isize + o as isize - reach;
            if j >= 0 && (j as usize) < bins {
                total += kv * counts[j as usize] as f64;
            }
        }
        total
    });
    let best = (0..bins).max_by(|&a, &b| density[a].total_cmp(&density[b]).then(b.cmp(&a))).unwrap_or(0);
    lo + (best as f64 + 0.5) * resolution
}

/// The six estimation procedures compared in the study, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    NMean,
    SMean,
    SHuber,
    SMedian,
    SModal,
    NModal,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::NMean, Method::SMean, Method::SHuber, Method::SMedian, Method::SModal, Method::NModal];

    pub fn label(self) -> &'static str {
        match self {
            Method::NMean => "N-Mean",
            Method::SMean => "S-Mean",
            Method::SHuber => "S-Huber",
            Method::SMedian => "S-Median",
            Method::SModal => "S-Modal",
            Method::NModal => "N-Modal",
        }
    }

    pub fn is_simex(self) -> bool {
        !matches!(self, Method::NMean | Method::NModal)
    }

    pub fn estimator(self, h: f64) -> Estimator {
        match self {
            Method::NMean | Method::SMean => Estimator::Lse,
            Method::SHuber => Estimator::Huber,
            Method::SMedian => Estimator::Median,
            Method::SModal | Method::NModal => Estimator::Modal { h },
        }
    }

    /// `(α-like, β)` the method estimates under the given truth.
    pub fn target(self, truth: &Truth) -> [f64; 2] {
        let alpha = match self {
            Method::NMean | Method::SMean | Method::SHuber => truth.alpha,
            Method::SMedian => truth.alpha + ErrorMixture::DEFAULT_MEDIAN * truth.gamma,
            Method::SModal | Method::NModal => truth.alpha + ErrorMixture::DEFAULT_MODE * truth.gamma,
        };
        [alpha, truth.beta]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.label().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Truth { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub sigma_u2: f64,
    pub bandwidth_c: f64,
    pub reps: usize,
    pub truth: Truth,
    pub mixture: ErrorMixture,
}

impl Scenario {
    pub fn new(n: usize, sigma_u2: f64, bandwidth_c: f64, reps: usize) -> Result<Self> {
        let s = Scenario { n, sigma_u2, bandwidth_c, reps, truth: Truth::default(), mixture: ErrorMixture::default() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("n must be at least 3, got {}", self.n)));
        }
        if !(self.sigma_u2 > 0.0 && self.sigma_u2.is_finite()) {
            return Err(Error::Config(format!("sigma_u2 must be positive, got {}", self.sigma_u2)));
        }
        if !(self.bandwidth_c > 0.0 && self.bandwidth_c.is_finite()) {
            return Err(Error::Config(format!("bandwidth_c must be positive, got {}", self.bandwidth_c)));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        Ok(())
    }

    pub fn bandwidth(&self) -> Result<Bandwidth> {
        Bandwidth::from_rule(self.bandwidth_c, self.n)
    }

    pub fn method_target(&self, method: Method) -> [f64; 2] {
        method.target(&self.truth)
    }

    /// `n ∈ {200, 400} × σ_u² ∈ {0.01, 0.02, 0.04} × c ∈ {0.5, 0.8, 1.0, 1.2}`, 100 replications each.
    pub fn default_matrix() -> Vec<Scenario> {
        let mut out = Vec::new();
        for n in [200, 400] {
            for sigma_u2 in [0.01, 0.02, 0.04] {
                for c in [0.5, 0.8, 1.0, 1.2] {
                    out.push(Scenario::new(n, sigma_u2, c, 100).expect("valid defaults"));
                }
            }
        }
        out
    }
}

/// SIMEX settings shared by every replication of a study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudySettings {
    pub lambda_points: usize,
    pub lambda_max: f64,
    pub b: usize,
    pub extrapolant: Extrapolant,
    pub seed: u64,
    /// Grid points per coordinate for the second modal EM start; 0 runs EM
    /// from the least-squares start only.
    pub em_screen_points: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            lambda_points: 10,
            lambda_max: 2.0,
            b: 50,
            extrapolant: Extrapolant::default(),
            seed: 20_240_601,
            em_screen_points: EmOptions::default().screen_points,
        }
    }
}

impl StudySettings {
    pub fn estimator_options(&self) -> EstimatorOptions {
        let mut opts = EstimatorOptions::default();
        opts.em.screen_points = self.em_screen_points;
        opts
    }

    pub fn simex_config(&self, sigma_u2: f64) -> Result<SimexConfig> {
        SimexConfig::new(
            equally_spaced(self.lambda_points, self.lambda_max),
            self.b,
            MeasurementError::scalar(sigma_u2)?,
            self.extrapolant,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub y: Vec<f64>,
    pub x_true: Vec<f64>,
    pub w: Vec<f64>,
}

/// Draws one replication; each ingredient has its own keyed stream.
pub fn generate_replication(scenario: &Scenario, rep_index: u64, master_seed: u64) -> Replication {
    let n = scenario.n;
    let Truth { alpha, beta, gamma } = scenario.truth;
    let mut xs = rng::stream(master_seed, &[rep_index, tag::COVARIATE]);
    let x_true: Vec<f64> = (0..n).map(|_| xs.random::<f64>()).collect();
    let eps = sample_mixture(&scenario.mixture, n, &mut rng::stream(master_seed, &[rep_index, tag::MODEL_ERROR]));
    let y = x_true
        .iter()
        .zip(&eps)
        .map(|(x, e)| {
            let g = (beta * x).exp();
            alpha * g + gamma * g * e
        })
        .collect();
    let noise = Normal::new(0.0, scenario.sigma_u2.sqrt()).expect("validated sigma_u2");
    let mut us = rng::stream(master_seed, &[rep_index, tag::MEASUREMENT_ERROR]);
    let w = x_true.iter().map(|x| x + noise.sample(&mut us)).collect();
    Replication { y, x_true, w }
}

/// Linear-normal errors-in-variables data: `X ~ N(0, 1)`, `Y = θ₀X + ε` with
/// `ε ~ N(0, 1)`, `W = X + U`, `U ~ N(0, σ_u²)`. The naive slope on `W` is
/// attenuated to `θ₀/(1 + (1+λ)σ_u²)` at remeasurement level `λ`, so the exact
/// extrapolant is rational and `θ(−1) = θ₀`.
pub fn generate_linear_normal(n: usize, theta0: f64, sigma_u2: f64, seed: u64) -> Replication {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |tag: u64, n: usize| -> Vec<f64> {
        let mut s = rng::stream(seed, &[tag]);
        (0..n).map(|_| std_normal.sample(&mut s)).collect()
    };
    let x_true = draw(tag::COVARIATE, n);
    let eps = draw(tag::MODEL_ERROR, n);
    let sd_u = sigma_u2.sqrt();
    let w = x_true.iter().zip(draw(tag::MEASUREMENT_ERROR, n)).map(|(x, u)| x + sd_u * u).collect();
    let y = x_true.iter().zip(&eps).map(|(x, e)| theta0 * x + e).collect();
    Replication { y, x_true, w }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamStats {
    pub mean: f64,
    pub bias: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub target: [f64; 2],
    /// `[α, β]`.
    pub stats: [ParamStats; 2],
    /// Replications where the method failed and was excluded.
    pub failures: usize,
    /// Per-replication estimates in replication order.
    pub estimates: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub methods: Vec<MethodSummary>,
}

impl ScenarioResult {
    pub fn get(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Mean, bias and population-form MSE of the successful estimates.
pub fn summarize(estimates: &[Option<[f64; 2]>], target: [f64; 2]) -> [ParamStats; 2] {
    let ok: Vec<&[f64; 2]> = estimates.iter().flatten().collect();
    let count = ok.len() as f64;
    let stat = |k: usize| {
        if ok.is_empty() {
            return ParamStats { mean: f64::NAN, bias: f64::NAN, mse: f64::NAN };
        }
        let mean = ok.iter().map(|e| e[k]).sum::<f64>() / count;
        let mse = ok.iter().map(|e| (e[k] - target[k]).powi(2)).sum::<f64>() / count;
        ParamStats { mean, bias: mean - target[k], mse }
    };
    [stat(0), stat(1)]
}

/// Runs one method on one replication's `(y, w)`.
pub fn estimate_method(
    method: Method,
    data: &Dataset,
    h: f64,
    config: &SimexConfig,
    replication: u64,
    opts: &EstimatorOptions,
) -> Result<[f64; 2]> {
    let model = RegressionModel::Exponential;
    let theta = match method {
        Method::NMean => {
            let start = crate::simex::default_start(&model, data);
            let fit = crate::estimators::lse_fit_with(&model, data, &start, &opts.gn)?;
            if !fit.converged {
                return Err(Error::Internal(format!("N-Mean did not converge ({:?})", fit.termination)));
            }
            fit.theta_hat
        }
        Method::NModal => {
            let start = naive_lse(&model, data, opts)?;
            let (theta, diag) = modal_fit(&model, data, h, &start, &opts.em)?;
            if !diag.converged {
                return Err(Error::Internal(format!("N-Modal EM did not converge in {} iterations", diag.iterations)));
            }
            theta
        }
        _ => simex_estimate(&method.estimator(h), data, &model, config, replication, opts)?.theta_simex,
    };
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Internal(format!("{method} produced a non-finite estimate")));
    }
    Ok([theta[0], theta[1]])
}

/// Runs every requested method on every replication. Replications are
/// independent tasks; per-replication results are kept by index and
/// aggregated in index order. `progress` is called with the number of
/// completed replications.
pub fn run_scenario(
    scenario: &Scenario,
    methods: &[Method],
    settings: &StudySettings,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<ScenarioResult> {
    scenario.validate()?;
    let config = settings.simex_config(scenario.sigma_u2)?;
    let h = scenario.bandwidth()?.h();
    let opts = settings.estimator_options();
    let mut methods: Vec<Method> = methods.to_vec();
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }

    let done = AtomicUsize::new(0);
    let per_rep: Vec<Vec<Option<[f64; 2]>>> = exec::map_indexed(scenario.reps, |r| {
        let rep = generate_replication(scenario, r as u64, settings.seed);
        let row = match Dataset::new(rep.y, RowMatrix::column(rep.w)) {
            Ok(data) => methods.iter().map(|&m| estimate_method(m, &data, h, &config, r as u64, &opts).ok()).collect(),
            Err(_) => vec![None; methods.len()],
        };
        let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
        progress(finished, scenario.reps);
        row
    });

    let summaries = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let estimates: Vec<Option<[f64; 2]>> = per_rep.iter().map(|row| row[k]).collect();
            let target = scenario.method_target(method);
            MethodSummary {
                method,
                target,
                stats: summarize(&estimates, target),
                failures: estimates.iter().filter(|e| e.is_none()).count(),
                estimates,
            }
        })
        .collect();
    Ok(ScenarioResult { scenario: scenario.clone(), methods: summaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "text" | "txt" => Ok(TableFormat::Text),
            other => Err(Error::invalid(format!("unknown table format `{other}`"))),
        }
    }
}

const PARAMS: [&str; 2] = ["alpha", "beta"];

/// Renders the result as CSV (`parameter,statistic,method,value`) or as a
/// fixed-width table with parameters × {Mean, Bias, MSE} rows and one column
/// per method.
pub fn emit_table(result: &ScenarioResult, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("parameter,statistic,method,value\n");
            for (k, param) in PARAMS.iter().enumerate() {
                for stat in ["mean", "bias", "mse"] {
                    for m in &result.methods {
                        let s = m.stats[k];
                        let v = match stat {
                            "mean" => s.mean,
                            "bias" => s.bias,
                            _ => s.mse,
                        };
                        let _ = writeln!(out, "{param},{stat},{},{v:?}", m.method);
                    }
                }
            }
            for m in &result.methods {
                let _ = writeln!(out, "all,failures,{},{}", m.method, m.failures);
            }
        }
        TableFormat::Text => {
            let s = &result.scenario;
            let _ = writeln!(out, "n={}, sigma_u2={}, c={}, reps={}", s.n, s.sigma_u2, s.bandwidth_c, s.reps);
            let _ = write!(out, "{:<8}{:<6}", "", "");
            for m in &result.methods {
                let _ = write!(out, "{:>10}", m.method.label());
            }
            out.push('\n');
            for (k, param) in PARAMS.iter().enumerate() {
                for (i, stat) in ["Mean", "Bias", "MSE"].iter().enumerate() {
                    let _ = write!(out, "{:<8}{:<6}", if i == 1 { *param } else { "" }, stat);
                    for m in &result.methods {
                        let st = m.stats[k];
                        let v = [st.mean, st.bias, st.mse][i];
                        let _ = write!(out, "{v:>10.3}");
                    }
                    out.push('\n');
                }
            }
            let _ = write!(out, "{:<14}", "failures");
            for m in &result.methods {
                let _ = write!(out, "{:>10}", m.failures);
            }
            out.push('\n');
        }
    }
    out
}

/// Scenario file contents (TOML). Every key is optional and defaults to the
/// study's standard setting.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioFile {
    pub n: usize,
    pub sigma_u2: f64,
    pub bandwidth_c: f64,
    pub reps: usize,
    pub lambda_points: usize,
    pub lambda_max: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub extrapolant: Extrapolant,
    pub seed: u64,
    pub em_screen_points: usize,
    pub methods: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        let s = StudySettings::default();
        let t = Truth::default();
        ScenarioFile {
            n: 200,
            sigma_u2: 0.01,
            bandwidth_c: 0.8,
            reps: 100,
            lambda_points: s.lambda_points,
            lambda_max: s.lambda_max,
            b: s.b,
            extrapolant: s.extrapolant,
            seed: s.seed,
            em_screen_points: s.em_screen_points,
            methods: Method::ALL.iter().map(|m| m.label().to_string()).collect(),
            alpha: t.alpha,
            beta: t.beta,
            gamma: t.gamma,
        }
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("scenario: {e}")))
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let mut s = Scenario::new(self.n, self.sigma_u2, self.bandwidth_c, self.reps)?;
        s.truth = Truth { alpha: self.alpha, beta: self.beta, gamma: self.gamma };
        Ok(s)
    }

    pub fn settings(&self) -> StudySettings {
        StudySettings {
            lambda_points: self.lambda_points,
            lambda_max: self.lambda_max,
            b: self.b,
            extrapolant: self.extrapolant,
            seed: self.seed,
            em_screen_points: self.em_screen_points,
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }
}
