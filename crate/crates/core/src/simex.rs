//! Simulation–extrapolation engine.
//!
//! For every λ on the grid, `B` remeasured copies `W + √λ·V` of the observed
//! covariates are drawn (`V ~ N_p(0, Σ_u)`), the estimator is run on each, and
//! the converged estimates are averaged. An extrapolant is then fitted to the
//! averaged estimates componentwise and evaluated at λ = −1.
//!
//! The λ-levels run in sequence (each level warm-starts from the previous
//! average); the `B` fits within a level run through [`crate::exec`].

use std::fmt::{self, Write as _};
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{lse_fit_with, Dataset, Estimator, EstimatorOptions, Fit};
use crate::exec;
use crate::matrix::RowMatrix;
use crate::model::{Evaluation, RegressionModel};
use crate::optim::{levenberg_marquardt, GaussNewtonOptions, LeastSquaresProblem};
use crate::rng::{self, tag, Stream};

/// Rational fits with `|d − 1|` at or below this are rejected (pole at λ = −1).
pub const POLE_GUARD: f64 = 1e-6;
/// Rational evaluation needs `|d + λ|` above this.
pub const EVAL_POLE_GUARD: f64 = 1e-9;
/// Share of non-converged fits at a λ above which the trace is flagged.
pub const MAX_DROP_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolant {
    /// `a + bλ`
    Linear,
    /// `a + bλ + cλ²`
    #[default]
    Quadratic,
    /// `a + c/(d + λ)`
    Rational,
}

impl Extrapolant {
    pub fn n_params(self) -> usize {
        match self {
            Extrapolant::Linear => 2,
            Extrapolant::Quadratic | Extrapolant::Rational => 3,
        }
    }
}

impl FromStr for Extrapolant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Extrapolant::Linear),
            "quadratic" => Ok(Extrapolant::Quadratic),
            "rational" | "nonlinear" => Ok(Extrapolant::Rational),
            other => Err(Error::invalid(format!("unknown extrapolant `{other}`"))),
        }
    }
}

impl fmt::Display for Extrapolant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extrapolant::Linear => "linear",
            Extrapolant::Quadratic => "quadratic",
            Extrapolant::Rational => "rational",
        })
    }
}

/// Known measurement-error covariance `Σ_u` with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementError {
    p: usize,
    cov: Vec<f64>,
    chol: Vec<f64>,
}

impl MeasurementError {
    /// `cov` is `p × p`, row-major, symmetric positive definite.
    pub fn new(p: usize, cov: Vec<f64>) -> Result<Self> {
        if p == 0 || cov.len() != p * p {
            return Err(Error::Config(format!("Σ_u must be {p}×{p} ({} entries), got {}", p * p, cov.len())));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("Σ_u has non-finite entries".into()));
        }
        for i in 0..p {
            for j in 0..i {
                let (a, b) = (cov[i * p + j], cov[j * p + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Config(format!("Σ_u is not symmetric at ({i}, {j})")));
                }
            }
        }
        let m = DMatrix::from_row_slice(p, p, &cov);
        let chol =
            m.cholesky().ok_or_else(|| Error::Config("Σ_u is not positive definite (Cholesky failed)".into()))?;
        let l = chol.l();
        let mut flat = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                flat[i * p + j] = l[(i, j)];
            }
        }
        Ok(MeasurementError { p, cov, chol: flat })
    }

    /// Scalar covariate with variance `sigma_u2`.
    pub fn scalar(sigma_u2: f64) -> Result<Self> {
        MeasurementError::new(1, vec![sigma_u2])
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimexConfig {
    lambda_grid: Vec<f64>,
    b: usize,
    noise: MeasurementError,
    extrapolant: Extrapolant,
    seed: u64,
}

impl SimexConfig {
    pub fn new(
        lambda_grid: Vec<f64>,
        b: usize,
        noise: MeasurementError,
        extrapolant: Extrapolant,
        seed: u64,
    ) -> Result<Self> {
        if lambda_grid.len() < extrapolant.n_params() {
            return Err(Error::Config(format!(
                "{} λ-values cannot identify the {extrapolant} extrapolant ({} parameters)",
                lambda_grid.len(),
                extrapolant.n_params()
            )));
        }
        if lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("λ-values must be finite and nonnegative".into()));
        }
        if lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("λ-grid must be strictly increasing".into()));
        }
        if b == 0 {
            return Err(Error::Config("B must be positive".into()));
        }
        Ok(SimexConfig { lambda_grid, b, noise, extrapolant, seed })
    }

    /// Ten equally spaced λ on `[0, 2]`, `B = 50`, quadratic extrapolant.
    pub fn with_defaults(noise: MeasurementError, seed: u64) -> Result<Self> {
        SimexConfig::new(equally_spaced(10, 2.0), 50, noise, Extrapolant::default(), seed)
    }

    pub fn lambda_grid(&self) -> &[f64] {
        &self.lambda_grid
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn noise(&self) -> &MeasurementError {
        &self.noise
    }

    pub fn extrapolant(&self) -> Extrapolant {
        self.extrapolant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// `m` equally spaced points from 0 to `max`.
pub fn equally_spaced(m: usize, max: f64) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..m).map(|i| max * i as f64 / (m - 1) as f64).collect(),
    }
}

/// Stream for remeasurement `b` at λ-index `lambda_index` of a replication.
pub fn remeasurement_stream(seed: u64, replication: u64, lambda_index: usize, b: usize) -> Stream {
    rng::stream(seed, &[replication, tag::REMEASUREMENT, lambda_index as u64, b as u64])
}

/// Pseudo-covariates `W + √λ·V` with rows of `V` i.i.d. `N_p(0, Σ_u)`.
///
/// At λ = 0 the input is returned unchanged and the stream is left untouched;
/// streams are keyed per `(λ-index, b)`, so this does not shift other draws.
pub fn simulate_pseudo(w: &RowMatrix, lambda: f64, noise: &MeasurementError, stream: &mut Stream) -> Result<RowMatrix> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("λ must be finite and nonnegative, got {lambda}")));
    }
    let p = noise.p;
    if w.cols() != p {
        return Err(Error::Dimension { what: "Σ_u vs covariates", expected: w.cols(), got: p });
    }
    let mut out = w.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let scale = lambda.sqrt();
    let mut z = vec![0.0; p];
    for row in out.as_mut_slice().chunks_exact_mut(p) {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(stream);
        }
        for i in 0..p {
            let li = &noise.chol[i * p..i * p + i + 1];
            let draw: f64 = li.iter().zip(&z).map(|(l, z)| l * z).sum();
            row[i] += scale * draw;
        }
    }
    Ok(out)
}

/// One (λ, b) estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct RemeasuredFit {
    /// `None` when the estimator returned an error.
    pub theta: Option<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTrace {
    pub lambdas: Vec<f64>,
    /// `θ̂(λⱼ)`: mean of the converged fits at each λ (NaN when none converged).
    pub theta_by_lambda: Vec<Vec<f64>>,
    /// `per_b[j][b]`.
    pub per_b: Vec<Vec<RemeasuredFit>>,
    pub dropped_count: Vec<usize>,
    /// Some λ dropped more than [`MAX_DROP_SHARE`] of its fits.
    pub quality_warning: bool,
}

impl LambdaTrace {
    pub fn per_b_converged(&self) -> Vec<Vec<bool>> {
        self.per_b.iter().map(|row| row.iter().map(|f| f.converged).collect()).collect()
    }

    /// CSV with columns `lambda,b,converged,theta_1..theta_q,em_iterations`.
    pub fn write_csv<W: Write>(&self, q: usize, mut out: W) -> io::Result<()> {
        let mut header = String::from("lambda,b,converged");
        for k in 1..=q {
            let _ = write!(header, ",theta_{k}");
        }
        header.push_str(",em_iterations");
        writeln!(out, "{header}")?;
        for (lambda, row) in self.lambdas.iter().zip(&self.per_b) {
            for (b, fit) in row.iter().enumerate() {
                let mut line = format!("{lambda},{},{}", b + 1, fit.converged);
                for k in 0..q {
                    match &fit.theta {
                        Some(t) => {
                            let _ = write!(line, ",{}", t[k]);
                        }
                        None => line.push_str(",NaN"),
                    }
                }
                let _ = write!(line, ",{}", fit.iterations);
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationFit {
    pub family: Extrapolant,
    /// Fitted extrapolant parameters, one vector per component of θ.
    pub gamma_hat: Vec<Vec<f64>>,
    /// `Σⱼ ‖θ̂(λⱼ) − G(λⱼ, Γ̂)‖²` over all components.
    pub residual_sse: f64,
    /// `G(−1, Γ̂)`.
    pub theta_simex: Vec<f64>,
    /// Every nonlinear (rational) component fit met its convergence test.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimexOutput {
    pub theta_simex: Vec<f64>,
    pub trace: LambdaTrace,
    pub fit: ExtrapolationFit,
}

/// `G(λ, Γ)` for the family.
pub fn evaluate_extrapolant(family: Extrapolant, gamma: &[f64], lambda: f64) -> Result<f64> {
    if gamma.len() != family.n_params() {
        return Err(Error::Dimension { what: "extrapolant parameters", expected: family.n_params(), got: gamma.len() });
    }
    match family {
        Extrapolant::Linear => Ok(gamma[0] + gamma[1] * lambda),
        Extrapolant::Quadratic => Ok(gamma[0] + gamma[1] * lambda + gamma[2] * lambda * lambda),
        Extrapolant::Rational => {
            let denom = gamma[2] + lambda;
            if denom.abs() <= EVAL_POLE_GUARD {
                return Err(Error::Pole { d: gamma[2] });
            }
            Ok(gamma[0] + gamma[1] / denom)
        }
    }
}

/// Least-squares fit of the extrapolant to `(λⱼ, valuesⱼ)`; returns the
/// parameters and the residual sum of squares.
pub fn fit_extrapolant(lambdas: &[f64], values: &[f64], family: Extrapolant) -> Result<(Vec<f64>, f64)> {
    fit_extrapolant_detailed(lambdas, values, family).map(|(g, sse, _)| (g, sse))
}

fn fit_extrapolant_detailed(lambdas: &[f64], values: &[f64], family: Extrapolant) -> Result<(Vec<f64>, f64, bool)> {
    if lambdas.len() != values.len() {
        return Err(Error::Dimension { what: "extrapolation values", expected: lambdas.len(), got: values.len() });
    }
    if lambdas.len() < family.n_params() {
        return Err(Error::invalid(format!("{} points cannot identify the {family} extrapolant", lambdas.len())));
    }
    if lambdas.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(Error::invalid("extrapolation inputs must be finite"));
    }
    let (gamma, converged) = match family {
        Extrapolant::Linear => (polynomial_fit(lambdas, values, 1)?, true),
        Extrapolant::Quadratic => (polynomial_fit(lambdas, values, 2)?, true),
        Extrapolant::Rational => rational_fit(lambdas, values)?,
    };
    let sse = residual_sse(lambdas, values, family, &gamma)?;
    Ok((gamma, sse, converged))
}

fn residual_sse(lambdas: &[f64], values: &[f64], family: Extrapolant, gamma: &[f64]) -> Result<f64> {
    let mut sse = 0.0;
    for (l, v) in lambdas.iter().zip(values) {
        let r = v - evaluate_extrapolant(family, gamma, *l)?;
        sse += r * r;
    }
    Ok(sse)
}

fn polynomial_fit(lambdas: &[f64], values: &[f64], degree: usize) -> Result<Vec<f64>> {
    let m = lambdas.len();
    let cols = degree + 1;
    let vander = DMatrix::from_fn(m, cols, |i, j| lambdas[i].powi(j as i32));
    let rhs = DVector::from_column_slice(values);
    let qr = vander.qr();
    let r = qr.r();
    let scale = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..cols).any(|i| r[(i, i)].abs() <= 1e-12 * scale.max(1.0)) {
        return Err(Error::invalid("polynomial extrapolant is not identified (duplicate λ-values)"));
    }
    let qtb = qr.q().transpose() * rhs;
    let coef = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Singular("polynomial extrapolant normal equations".into()))?;
    Ok(coef.iter().copied().collect())
}

/// Exact `a + c/(d + λ)` through three points, if one exists.
fn rational_through(points: [(f64, f64); 3]) -> Option<[f64; 3]> {
    let [(l1, v1), (l2, v2), (l3, v3)] = points;
    let (d12, d23) = (v1 - v2, v2 - v3);
    if d23 == 0.0 || d12 == 0.0 {
        return None;
    }
    let ratio = d12 / d23;
    let denom = ratio * (l3 - l2) - (l2 - l1);
    if denom.abs() < 1e-300 {
        return None;
    }
    let d = ((l2 - l1) * l3 - ratio * (l3 - l2) * l1) / denom;
    if [l1, l2, l3].iter().any(|l| (d + l).abs() <= EVAL_POLE_GUARD) {
        return None;
    }
    let c = d12 * (d + l1) * (d + l2) / (l2 - l1);
    let a = v1 - c / (d + l1);
    let g = [a, c, d];
    g.iter().all(|v| v.is_finite()).then_some(g)
}

struct RationalProblem<'a> {
    lambdas: &'a [f64],
    values: &'a [f64],
}

impl LeastSquaresProblem for RationalProblem<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn len(&self) -> usize {
        self.lambdas.len()
    }

    fn weight(&self, _i: usize) -> f64 {
        1.0
    }

    fn target(&self, i: usize) -> f64 {
        self.values[i]
    }

    fn predict(&self, i: usize, g: &[f64]) -> Evaluation {
        Evaluation { value: g[0] + g[1] / (g[2] + self.lambdas[i]), saturated: false }
    }

    fn predict_with_gradient(&self, i: usize, g: &[f64], grad: &mut [f64]) -> Evaluation {
        let inv = 1.0 / (g[2] + self.lambdas[i]);
        grad[0] = 1.0;
        grad[1] = inv;
        grad[2] = -g[1] * inv * inv;
        Evaluation { value: g[0] + g[1] * inv, saturated: false }
    }
}

fn rational_fit(lambdas: &[f64], values: &[f64]) -> Result<(Vec<f64>, bool)> {
    let m = lambdas.len();
    let mid = (m - 1) / 2;
    let start =
        rational_through([(lambdas[0], values[0]), (lambdas[mid], values[mid]), (lambdas[m - 1], values[m - 1])])
            .unwrap_or_else(|| {
                let mean = values.iter().sum::<f64>() / m as f64;
                [mean, 1.0, 1.5]
            });
    let problem = RationalProblem { lambdas, values };
    let result = levenberg_marquardt(&problem, &start, &GaussNewtonOptions::default())?;
    let gamma = result.theta_hat;
    if (gamma[2] - 1.0).abs() <= POLE_GUARD {
        return Err(Error::Pole { d: gamma[2] });
    }
    Ok((gamma, result.converged))
}

/// A starting value for least squares that needs no user input.
///
/// For the exponential model `α` enters linearly, so for each `β` on a grid
/// the best `α = Σ y e^{βx} / Σ e^{2βx}` is closed form; the grid point with
/// the smallest profile SSE is returned. The grid covers `|β·x| ≤ 5`.
pub fn default_start(model: &RegressionModel, data: &Dataset) -> Vec<f64> {
    match model {
        RegressionModel::Exponential => {
            const HALF_GRID: i32 = 200;
            let x: Vec<f64> = (0..data.n()).map(|i| data.x().row(i)[0]).collect();
            let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                let mean = data.y().iter().sum::<f64>() / data.n() as f64;
                return vec![mean, 0.0];
            }
            let mut best = (f64::INFINITY, vec![1.0, 0.0]);
            for k in -HALF_GRID..=HALF_GRID {
                let beta = 5.0 * f64::from(k) / (f64::from(HALF_GRID) * scale);
                let (mut sgy, mut sgg) = (0.0, 0.0);
                for (xi, yi) in x.iter().zip(data.y()) {
                    let g = (beta * xi).exp();
                    sgy += g * yi;
                    sgg += g * g;
                }
                let alpha = sgy / sgg;
                let sse: f64 = x.iter().zip(data.y()).map(|(xi, yi)| (yi - alpha * (beta * xi).exp()).powi(2)).sum();
                if sse < best.0 {
                    best = (sse, vec![alpha, beta]);
                }
            }
            best.1
        }
        RegressionModel::Linear { p } => vec![0.0; *p],
    }
}

/// Least-squares fit on the observed data, used to start the estimators.
pub fn naive_lse(model: &RegressionModel, data: &Dataset, opts: &EstimatorOptions) -> Result<Vec<f64>> {
    let start = default_start(model, data);
    Ok(lse_fit_with(model, data, &start, &opts.gn)?.theta_hat)
}

/// Runs the estimator on the observed data, started from [`naive_lse`].
pub fn naive_estimate(
    estimator: &Estimator,
    model: &RegressionModel,
    data: &Dataset,
    opts: &EstimatorOptions,
) -> Result<Fit> {
    let theta0 = naive_lse(model, data, opts)?;
    estimator.fit(model, data, &theta0, opts)
}

/// Full simulation / estimation / extrapolation run.
///
/// `replication` is folded into the stream keys, so a Monte Carlo study can
/// give every replication its own remeasurement draws under one seed.
pub fn simex_estimate(
    estimator: &Estimator,
    data: &Dataset,
    model: &RegressionModel,
    config: &SimexConfig,
    replication: u64,
    opts: &EstimatorOptions,
) -> Result<SimexOutput> {
    if data.p() != model.dim_x() {
        return Err(Error::Dimension { what: "covariate columns", expected: model.dim_x(), got: data.p() });
    }
    if config.noise.p != data.p() {
        return Err(Error::Dimension { what: "Σ_u dimension", expected: data.p(), got: config.noise.p });
    }
    let q = model.dim_theta();
    let m = config.lambda_grid.len();
    let mut theta_by_lambda: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut per_b = Vec::with_capacity(m);
    let mut dropped_count = Vec::with_capacity(m);
    let mut start = naive_lse(model, data, opts)?;

    for (j, &lambda) in config.lambda_grid.iter().enumerate() {
        let fits: Vec<RemeasuredFit> = exec::map_indexed(config.b, |b| {
            let mut stream = remeasurement_stream(config.seed, replication, j, b);
            let mut run = || -> Result<Fit> {
                let pseudo = simulate_pseudo(data.x(), lambda, &config.noise, &mut stream)?;
                let pseudo = data.with_covariates(pseudo)?;
                estimator.fit(model, &pseudo, &start, opts)
            };
            match run() {
                Ok(fit) => {
                    let finite = fit.theta.iter().all(|t| t.is_finite());
                    RemeasuredFit {
                        converged: fit.converged && finite,
                        iterations: fit.iterations,
                        theta: Some(fit.theta),
                    }
                }
                Err(_) => RemeasuredFit { theta: None, converged: false, iterations: 0 },
            }
        });

        let mut sum = vec![0.0; q];
        let mut count = 0usize;
        for fit in fits.iter().filter(|f| f.converged) {
            if let Some(t) = &fit.theta {
                sum.iter_mut().zip(t).for_each(|(s, v)| *s += v);
                count += 1;
            }
        }
        let mean: Vec<f64> = if count > 0 { sum.iter().map(|s| s / count as f64).collect() } else { vec![f64::NAN; q] };
        dropped_count.push(config.b - count);
        per_b.push(fits);
        if count > 0 {
            start = mean.clone();
        }
        theta_by_lambda.push(mean);
    }

    let quality_warning = dropped_count.iter().any(|&d| d as f64 / config.b as f64 > MAX_DROP_SHARE);
    let trace =
        LambdaTrace { lambdas: config.lambda_grid.clone(), theta_by_lambda, per_b, dropped_count, quality_warning };

    match extrapolate(&trace, config.extrapolant, q) {
        Ok(fit) => Ok(SimexOutput { theta_simex: fit.theta_simex.clone(), trace, fit }),
        Err(e) => Err(Error::Extrapolation { source: Box::new(e), trace: Box::new(trace) }),
    }
}

/// Componentwise extrapolant fit of a λ-trace, evaluated at λ = −1.
pub fn extrapolate(trace: &LambdaTrace, family: Extrapolant, q: usize) -> Result<ExtrapolationFit> {
    if let Some(j) = trace.theta_by_lambda.iter().position(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Internal(format!("no converged fits at λ = {}", trace.lambdas[j])));
    }
    let mut gamma_hat = Vec::with_capacity(q);
    let mut theta_simex = Vec::with_capacity(q);
    let mut residual = 0.0;
    let mut converged = true;
    for k in 0..q {
        let values: Vec<f64> = trace.theta_by_lambda.iter().map(|t| t[k]).collect();
        let (gamma, sse, ok) = fit_extrapolant_detailed(&trace.lambdas, &values, family)?;
        theta_simex.push(evaluate_extrapolant(family, &gamma, -1.0)?);
        residual += sse;
        converged &= ok;
        gamma_hat.push(gamma);
    }
    Ok(ExtrapolationFit { family, gamma_hat, residual_sse: residual, theta_simex, converged })
}

/// Checks that the estimate on remeasured data at λ = 0 reproduces the naive
/// estimate on `W` (within 1e-6 for the simplex-based median fit, 1e-10
/// otherwise).
pub fn naive_equivalence_check(
    estimator: &Estimator,
    data: &Dataset,
    model: &RegressionModel,
    config: &SimexConfig,
    opts: &EstimatorOptions,
) -> Result<bool> {
    let tol = match estimator {
        Estimator::Median => 1e-6,
        _ => 1e-10,
    };
    let theta0 = naive_lse(model, data, opts)?;
    let naive = estimator.fit(model, data, &theta0, opts)?;
    let mut stream = remeasurement_stream(config.seed, 0, 0, 0);
    let pseudo = data.with_covariates(simulate_pseudo(data.x(), 0.0, &config.noise, &mut stream)?)?;
    let at_zero = estimator.fit(model, &pseudo, &theta0, opts)?;
    Ok(naive.theta.iter().zip(&at_zero.theta).all(|(a, b)| (a - b).abs() <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Vec<f64> {
        equally_spaced(10, 2.0)
    }

    /// Attenuated slope of the linear-normal model: θ₀σx²/(σx² + (1+λ)σu²).
    fn attenuation(lambda: f64) -> f64 {
        1.0 / (1.0 + (1.0 + lambda) * 0.25)
    }

    #[test]
    fn default_grid() {
        let g = grid();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[9], 2.0);
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(evaluate_extrapolant(Extrapolant::Quadratic, &[1.0, 2.0, 3.0], -1.0).unwrap(), 2.0);
        assert_eq!(evaluate_extrapolant(Extrapolant::Rational, &[0.0, 4.0, 5.0], -1.0).unwrap(), 1.0);
        assert_eq!(evaluate_extrapolant(Extrapolant::Linear, &[0.5, -0.25], 2.0).unwrap(), 0.0);
        assert!(matches!(evaluate_extrapolant(Extrapolant::Rational, &[0.0, 1.0, 1.0], -1.0), Err(Error::Pole { .. })));
        assert!(evaluate_extrapolant(Extrapolant::Linear, &[0.0], 1.0).is_err());
    }

    #[test]
    fn quadratic_recovery() {
        let g = grid();
        let v: Vec<f64> = g.iter().map(|l| 2.0 - l + 0.5 * l * l).collect();
        let (gamma, sse) = fit_extrapolant(&g, &v, Extrapolant::Quadratic).unwrap();
        for (a, b) in gamma.iter().zip([2.0, -1.0, 0.5]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(sse < 1e-20);
    }

    #[test]
    fn rational_recovers_attenuation_curve() {
        let g = grid();
        let v: Vec<f64> = g.iter().map(|&l| attenuation(l)).collect();
        assert!((v[0] - 0.8).abs() < 1e-15);
        assert!((v[9] - 0.571_428_571_428_571_4).abs() < 1e-15);
        let (gamma, sse) = fit_extrapolant(&g, &v, Extrapolant::Rational).unwrap();
        assert!(sse < 1e-18);
        let at = evaluate_extrapolant(Extrapolant::Rational, &gamma, -1.0).unwrap();
        assert!((at - 1.0).abs() < 1e-6, "{gamma:?} -> {at}");
    }

    #[test]
    fn linear_misfits_attenuation_curve() {
        let g = grid();
        let v: Vec<f64> = g.iter().map(|&l| attenuation(l)).collect();
        let (gamma, _) = fit_extrapolant(&g, &v, Extrapolant::Linear).unwrap();
        let at = evaluate_extrapolant(Extrapolant::Linear, &gamma, -1.0).unwrap();
        assert!((at - 1.0).abs() > 0.01, "{at}");
    }

    #[test]
    fn constant_trend_extrapolates_to_constant() {
        for family in [Extrapolant::Linear, Extrapolant::Quadratic, Extrapolant::Rational] {
            for grid in [grid(), vec![0.0, 0.3, 1.1, 4.0]] {
                let v = vec![0.731; grid.len()];
                let (gamma, _) = fit_extrapolant(&grid, &v, family).unwrap();
                let at = evaluate_extrapolant(family, &gamma, -1.0).unwrap();
                assert!((at - 0.731).abs() < 1e-10, "{family}: {gamma:?} -> {at}");
            }
        }
    }

    #[test]
    fn duplicate_lambdas_rejected() {
        let err = fit_extrapolant(&[0.5, 0.5], &[1.0, 2.0], Extrapolant::Linear);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(fit_extrapolant(&[0.0, 1.0], &[1.0, 2.0], Extrapolant::Quadratic).is_err());
    }

    #[test]
    fn rational_pole_rejected() {
        let g = grid();
        let v: Vec<f64> = g.iter().map(|l| 0.5 + 2.0 / (1.0 + l)).collect();
        assert!(matches!(fit_extrapolant(&g, &v, Extrapolant::Rational), Err(Error::Pole { .. })));
    }

    #[test]
    fn config_validation() {
        let noise = MeasurementError::scalar(0.01).unwrap();
        assert!(SimexConfig::new(vec![0.0], 1, noise.clone(), Extrapolant::Quadratic, 1).is_err());
        assert!(SimexConfig::new(vec![0.0, 1.0], 1, noise.clone(), Extrapolant::Quadratic, 1).is_err());
        assert!(SimexConfig::new(vec![0.0, 1.0], 1, noise.clone(), Extrapolant::Linear, 1).is_ok());
        assert!(SimexConfig::new(vec![0.0, 1.0, 1.0], 5, noise.clone(), Extrapolant::Linear, 1).is_err());
        assert!(SimexConfig::new(vec![-0.5, 1.0, 2.0], 5, noise.clone(), Extrapolant::Linear, 1).is_err());
        assert!(SimexConfig::new(grid(), 0, noise, Extrapolant::Linear, 1).is_err());
        assert!(MeasurementError::scalar(0.0).is_err());
        assert!(MeasurementError::new(2, vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(MeasurementError::new(2, vec![1.0, 0.3, 0.2, 1.0]).is_err());
        assert!(MeasurementError::new(2, vec![1.0, 0.3, 0.3, 1.0]).is_ok());
    }

    #[test]
    fn pseudo_identity_at_zero() {
        let w = RowMatrix::column(vec![0.1, -0.0, 3.5, f64::MIN_POSITIVE]);
        let noise = MeasurementError::scalar(0.3).unwrap();
        let out = simulate_pseudo(&w, 0.0, &noise, &mut remeasurement_stream(1, 0, 0, 0)).unwrap();
        let bits = |m: &RowMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&w));
    }

    #[test]
    fn pseudo_variance_matches_lambda_sigma() {
        let n = 100_000;
        let w = RowMatrix::column(vec![0.5; n]);
        let noise = MeasurementError::scalar(0.01).unwrap();
        let out = simulate_pseudo(&w, 1.0, &noise, &mut remeasurement_stream(42, 0, 3, 7)).unwrap();
        let d: Vec<f64> = out.as_slice().iter().map(|v| v - 0.5).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // SE of a normal sample variance: σ²·√(2/(n−1))
        let se = 0.01 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 0.01).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn pseudo_multivariate_covariance() {
        let n = 200_000;
        let w = RowMatrix::new(n, 2, vec![0.0; 2 * n]).unwrap();
        let noise = MeasurementError::new(2, vec![0.04, 0.01, 0.01, 0.09]).unwrap();
        let out = simulate_pseudo(&w, 2.0, &noise, &mut remeasurement_stream(5, 1, 1, 1)).unwrap();
        let mut s = [0.0; 4];
        for i in 0..n {
            let r = out.row(i);
            s[0] += r[0] * r[0];
            s[1] += r[0] * r[1];
            s[3] += r[1] * r[1];
        }
        let nf = n as f64;
        assert!((s[0] / nf - 0.08).abs() < 0.002);
        assert!((s[1] / nf - 0.02).abs() < 0.002);
        assert!((s[3] / nf - 0.18).abs() < 0.003);
    }

    #[test]
    fn pseudo_is_deterministic() {
        let w = RowMatrix::column((0..50).map(|i| i as f64 * 0.01).collect());
        let noise = MeasurementError::scalar(0.02).unwrap();
        let a = simulate_pseudo(&w, 1.5, &noise, &mut remeasurement_stream(9, 2, 4, 1)).unwrap();
        let b = simulate_pseudo(&w, 1.5, &noise, &mut remeasurement_stream(9, 2, 4, 1)).unwrap();
        let c = simulate_pseudo(&w, 1.5, &noise, &mut remeasurement_stream(9, 2, 4, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(simulate_pseudo(&w, -1.0, &noise, &mut remeasurement_stream(9, 2, 4, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn polynomial_families_are_exact(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64) {
            let g = grid();
            let lin: Vec<f64> = g.iter().map(|l| a + b * l).collect();
            let (_, sse) = fit_extrapolant(&g, &lin, Extrapolant::Linear).unwrap();
            prop_assert!(sse < 1e-18);
            let quad: Vec<f64> = g.iter().map(|l| a + b * l + c * l * l).collect();
            let (_, sse) = fit_extrapolant(&g, &quad, Extrapolant::Quadratic).unwrap();
            prop_assert!(sse < 1e-18);
        }

        #[test]
        fn rational_family_is_exact(a in -3.0..3.0f64, c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64], d in 1.2..8.0f64) {
            let g = grid();
            let v: Vec<f64> = g.iter().map(|l| a + c / (d + l)).collect();
            let (gamma, sse) = fit_extrapolant(&g, &v, Extrapolant::Rational).unwrap();
            prop_assert!(sse < 1e-18, "sse {} gamma {:?}", sse, gamma);
        }
    }
}
