//! Per-dataset estimators: modal regression by EM, least squares, Huber
//! M-estimation and L1 (median) regression.
//!
//! Every estimator first puts the rows in a canonical order (lexicographic in
//! `(x, y)`), so results are bitwise invariant to row permutation of the input.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kernel::{log_phi, phi};
use crate::matrix::RowMatrix;
use crate::model::RegressionModel;
use crate::optim::{
    check_regression_inputs, levenberg_marquardt, nelder_mead, weighted_gauss_newton, GaussNewtonOptions,
    ModelLeastSquares, NelderMeadOptions, OptimResult, Termination,
};

/// Responses and covariate rows. The covariates may be the true `X`, the
/// observed `W`, or remeasured pseudo-data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    x: RowMatrix,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: RowMatrix) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dimension { what: "dataset rows", expected: y.len(), got: x.rows() });
        }
        if y.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if y.iter().chain(x.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &RowMatrix {
        &self.x
    }

    /// Same responses with different covariates (used for pseudo-data).
    pub fn with_covariates(&self, x: RowMatrix) -> Result<Self> {
        Dataset::new(self.y.clone(), x)
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Dataset { y: order.iter().map(|&i| self.y[i]).collect(), x: self.x.select_rows(order) }
    }

    fn canonical(&self) -> Self {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by(|&a, &b| {
            let ra = self.x.row(a);
            let rb = self.x.row(b);
            ra.iter()
                .zip(rb)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.y[a].total_cmp(&self.y[b]))
        });
        self.permuted(&order)
    }

    fn check(&self, model: &RegressionModel, theta: &[f64]) -> Result<()> {
        check_regression_inputs(model, &self.x, &self.y, theta)
    }

    /// Shape checks only; no minimum sample size.
    fn check_shape(&self, model: &RegressionModel, theta: &[f64]) -> Result<()> {
        if self.x.cols() != model.dim_x() {
            return Err(Error::Dimension { what: "x columns", expected: model.dim_x(), got: self.x.cols() });
        }
        if theta.len() != model.dim_theta() {
            return Err(Error::Dimension { what: "theta", expected: model.dim_theta(), got: theta.len() });
        }
        Ok(())
    }

    fn residuals(&self, model: &RegressionModel, theta: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.y[i] - model.eval(self.x.row(i), theta).value).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Stop once `‖θ⁽ᵗ⁺¹⁾ − θ⁽ᵗ⁾‖∞` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub m_step: GaussNewtonOptions,
    /// Points per coordinate of the start-screening grid used by
    /// [`modal_fit`]; 0 or 1 disables the second start.
    pub screen_points: usize,
    /// Squared-extrapolation acceleration of the EM map. Every accepted
    /// iterate still has `Q_n` at least that of the previous one.
    pub accelerate: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-8,
            max_iter: 500,
            m_step: GaussNewtonOptions::default(),
            screen_points: 7,
            accelerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `Q_n` at the start and after every EM iteration.
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    /// Some M-step had effective sample size below `q` and was restricted
    /// to the most heavily weighted points.
    pub weight_guard_used: bool,
    pub saturated: bool,
}

/// E-step weights `π(j|θ) ∝ φ_h(yⱼ − m(xⱼ, θ))`, normalized in log space.
pub fn estep_weights(model: &RegressionModel, data: &Dataset, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    check_h(h)?;
    data.check_shape(model, theta)?;
    estep_unchecked(model, data, theta, h)
}

fn estep_unchecked(model: &RegressionModel, data: &Dataset, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut logs: Vec<f64> = data.residuals(model, theta).into_iter().map(|r| log_phi(r / h)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Internal(format!("E-step log-densities degenerate (max = {max})")));
    }
    let mut total = 0.0;
    for l in logs.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logs.iter_mut() {
        *l /= total;
    }
    Ok(logs)
}

/// Kernel estimate of the residual density at zero,
/// `(nh)⁻¹ Σ φ((yᵢ − m(xᵢ, θ))/h)`.
pub fn modal_objective(model: &RegressionModel, data: &Dataset, theta: &[f64], h: f64) -> Result<f64> {
    check_h(h)?;
    data.check_shape(model, theta)?;
    Ok(modal_objective_unchecked(model, data, theta, h))
}

fn modal_objective_unchecked(model: &RegressionModel, data: &Dataset, theta: &[f64], h: f64) -> f64 {
    let total: f64 = data.residuals(model, theta).into_iter().map(|r| phi(r / h)).sum();
    total / (data.n() as f64 * h)
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth must be positive and finite, got {h}")))
    }
}

/// Modal regression by EM: E-step kernel weights, M-step weighted least
/// squares started from the current iterate.
pub fn modal_em(
    model: &RegressionModel,
    data: &Dataset,
    h: f64,
    theta0: &[f64],
    opts: &EmOptions,
) -> Result<(Vec<f64>, EmDiagnostics)> {
    check_h(h)?;
    data.check(model, theta0)?;
    if theta0.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("theta0 must be finite"));
    }
    let data = data.canonical();
    let em = EmMap { model, data: &data, h, opts };
    let mut theta = theta0.to_vec();
    let mut trace = vec![modal_objective_unchecked(model, &data, &theta, h)];
    let mut converged = false;
    let mut flags = StepFlags::default();
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let current = *trace.last().unwrap_or(&f64::NEG_INFINITY);
        iterations += 1;
        let Some((t1, q1)) = em.step(&theta, current, &mut flags)? else { break };
        trace.push(q1);
        if max_abs_diff(&t1, &theta) < opts.tol {
            theta = t1;
            converged = true;
            break;
        }
        if !opts.accelerate || iterations >= opts.max_iter {
            theta = t1;
            continue;
        }
        iterations += 1;
        let Some((t2, q2)) = em.step(&t1, q1, &mut flags)? else {
            theta = t1;
            break;
        };
        trace.push(q2);
        if max_abs_diff(&t2, &t1) < opts.tol {
            theta = t2;
            converged = true;
            break;
        }
        // Squared extrapolation over the two plain steps; the extrapolated
        // point is kept only after one more EM step and only if Q_n has not
        // dropped below the plain two-step value.
        let r: Vec<f64> = t1.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = t2.iter().zip(&t1).zip(&r).map(|((a, b), r)| a - b - r).collect();
        let norm = |z: &[f64]| z.iter().map(|c| c * c).sum::<f64>().sqrt();
        let alpha = -norm(&r) / norm(&v);
        if !alpha.is_finite() || alpha >= -1.0 || iterations >= opts.max_iter {
            theta = t2;
            continue;
        }
        let jump: Vec<f64> =
            theta.iter().zip(&r).zip(&v).map(|((t, r), v)| t - 2.0 * alpha * r + alpha * alpha * v).collect();
        let q_jump = modal_objective_unchecked(model, &data, &jump, h);
        if !(q_jump.is_finite() && q_jump >= q2) {
            theta = t2;
            continue;
        }
        iterations += 1;
        match em.step(&jump, q_jump, &mut flags)? {
            Some((t3, q3)) if q3 >= q2 => {
                trace.push(q3);
                theta = t3;
            }
            _ => theta = t2,
        }
    }

    let final_objective = *trace.last().unwrap_or(&f64::NAN);
    Ok((
        theta,
        EmDiagnostics {
            iterations,
            converged,
            objective_trace: trace,
            final_objective,
            weight_guard_used: flags.guard_used,
            saturated: flags.saturated,
        },
    ))
}

#[derive(Default)]
struct StepFlags {
    guard_used: bool,
    saturated: bool,
}

struct EmMap<'a> {
    model: &'a RegressionModel,
    data: &'a Dataset,
    h: f64,
    opts: &'a EmOptions,
}

impl EmMap<'_> {
    /// One plain EM iteration from `theta` (whose objective is `current`).
    /// `None` when the M-step is degenerate and cannot move.
    fn step(&self, theta: &[f64], current: f64, flags: &mut StepFlags) -> Result<Option<(Vec<f64>, f64)>> {
        let (model, data, h) = (self.model, self.data, self.h);
        let q = model.dim_theta();
        let weights = estep_unchecked(model, data, theta, h)?;
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let mut step = None;
        if ess < q as f64 {
            // Guarded step on the heaviest points; kept only if Q_n does not drop,
            // otherwise the plain weighted step (which always ascends) is used.
            let mut restricted = weights.clone();
            restrict_to_heaviest(&mut restricted, 2 * q);
            let guarded = weighted_gauss_newton(model, data.x(), data.y(), &restricted, theta, &self.opts.m_step)?;
            let value = modal_objective_unchecked(model, data, &guarded.theta_hat, h);
            if value >= current {
                flags.guard_used = true;
                step = Some((guarded, value));
            }
        }
        let (m_step, value) = match step {
            Some(s) => s,
            None => {
                let plain = weighted_gauss_newton(model, data.x(), data.y(), &weights, theta, &self.opts.m_step)?;
                let value = modal_objective_unchecked(model, data, &plain.theta_hat, h);
                (plain, value)
            }
        };
        flags.saturated |= m_step.saturated;
        if m_step.termination == Termination::Degenerate && m_step.theta_hat == theta {
            return Ok(None);
        }
        Ok(Some((m_step.theta_hat, value)))
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()))
}

/// Modal estimate: EM from `theta0` and from the best point of a coarse grid
/// around it, keeping whichever run ends at the larger `Q_n`.
///
/// The kernel objective is multimodal for small `h`; EM alone stops at the
/// local maximum nearest its start. The grid spans `θ0ₖ ± max(1, |θ0ₖ|)` per
/// coordinate with `opts.screen_points` points each. Ties keep the run
/// started at `theta0`.
pub fn modal_fit(
    model: &RegressionModel,
    data: &Dataset,
    h: f64,
    theta0: &[f64],
    opts: &EmOptions,
) -> Result<(Vec<f64>, EmDiagnostics)> {
    let first = modal_em(model, data, h, theta0, opts)?;
    let Some(screened) = screen_start(model, data, h, theta0, opts.screen_points) else {
        return Ok(first);
    };
    let second = modal_em(model, data, h, &screened, opts)?;
    let better = match (first.1.converged, second.1.converged) {
        (true, false) => false,
        (false, true) => true,
        _ => second.1.final_objective > first.1.final_objective,
    };
    Ok(if better { second } else { first })
}

fn screen_start(model: &RegressionModel, data: &Dataset, h: f64, theta0: &[f64], points: usize) -> Option<Vec<f64>> {
    if points < 2 {
        return None;
    }
    let q = theta0.len();
    let total = points.checked_pow(q as u32)?;
    let spans: Vec<f64> = theta0.iter().map(|t| t.abs().max(1.0)).collect();
    let mut candidate = vec![0.0; q];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for idx in 0..total {
        let mut rest = idx;
        for k in 0..q {
            let step = rest % points;
            rest /= points;
            let t = -1.0 + 2.0 * step as f64 / (points - 1) as f64;
            candidate[k] = theta0[k] + t * spans[k];
        }
        let value = modal_objective_unchecked(model, data, &candidate, h);
        if value.is_finite() && best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, candidate.clone()));
        }
    }
    best.map(|(_, theta)| theta).filter(|theta| theta.as_slice() != theta0)
}

/// Replaces `weights` by uniform weights on the `k` largest entries.
fn restrict_to_heaviest(weights: &mut [f64], k: usize) {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let k = k.min(weights.len());
    weights.iter_mut().for_each(|w| *w = 0.0);
    for &i in &order[..k] {
        weights[i] = 1.0 / k as f64;
    }
}

/// Ordinary nonlinear least squares.
pub fn lse_fit(model: &RegressionModel, data: &Dataset, theta0: &[f64]) -> Result<OptimResult> {
    lse_fit_with(model, data, theta0, &GaussNewtonOptions::default())
}

pub fn lse_fit_with(
    model: &RegressionModel,
    data: &Dataset,
    theta0: &[f64],
    opts: &GaussNewtonOptions,
) -> Result<OptimResult> {
    data.check(model, theta0)?;
    let data = data.canonical();
    let problem = ModelLeastSquares { model, x: data.x(), y: data.y(), weights: None };
    levenberg_marquardt(&problem, theta0, opts)
}

/// Huber loss `ρ_c(r)`.
pub fn huber_rho(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        0.5 * r * r
    } else {
        c * a - 0.5 * c * c
    }
}

/// Consistency constant turning a MAD into a normal-scale estimate.
pub const MAD_TO_SIGMA: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberOptions {
    /// Threshold multiplier on the scale estimate (95% efficiency at the normal).
    pub k: f64,
    /// Use this threshold instead of `k·MAD/0.6745`.
    pub fixed_threshold: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub gn: GaussNewtonOptions,
}

impl Default for HuberOptions {
    fn default() -> Self {
        HuberOptions { k: 1.345, fixed_threshold: None, tol: 1e-8, max_iter: 500, gn: GaussNewtonOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HuberFit {
    pub result: OptimResult,
    /// Threshold `c` used in the last reweighting step.
    pub threshold: f64,
    /// Residual MAD was zero, so the least-squares fit was returned.
    pub lse_fallback: bool,
}

/// Huber M-estimate by iteratively reweighted Gauss–Newton, with the scale
/// re-estimated from the residual MAD at every outer iteration.
pub fn huber_fit(model: &RegressionModel, data: &Dataset, theta0: &[f64]) -> Result<HuberFit> {
    huber_fit_with(model, data, theta0, &HuberOptions::default())
}

pub fn huber_fit_with(
    model: &RegressionModel,
    data: &Dataset,
    theta0: &[f64],
    opts: &HuberOptions,
) -> Result<HuberFit> {
    data.check(model, theta0)?;
    if data.n() <= model.dim_theta() {
        return Err(Error::invalid(format!("huber_fit needs n > q (n = {}, q = {})", data.n(), model.dim_theta())));
    }
    let data = data.canonical();
    let mut theta = theta0.to_vec();
    let mut threshold = f64::NAN;
    let mut saturated = false;
    let mut termination = Termination::MaxIter;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let residuals = data.residuals(model, &theta);
        threshold = match opts.fixed_threshold {
            Some(c) => c,
            None => {
                let mad = median_abs_deviation(&residuals);
                if !(mad > 0.0) {
                    let lse = lse_fit_with(model, &data, &theta, &opts.gn)?;
                    return Ok(HuberFit { result: lse, threshold: f64::NAN, lse_fallback: true });
                }
                opts.k * mad / MAD_TO_SIGMA
            }
        };
        let weights: Vec<f64> =
            residuals.iter().map(|r| if r.abs() <= threshold { 1.0 } else { threshold / r.abs() }).collect();
        let step = weighted_gauss_newton(model, data.x(), data.y(), &weights, &theta, &opts.gn)?;
        saturated |= step.saturated;
        iterations += 1;
        if step.termination == Termination::Degenerate {
            termination = Termination::Degenerate;
            break;
        }
        let delta = step.theta_hat.iter().zip(&theta).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
        theta = step.theta_hat;
        if delta < opts.tol {
            termination = Termination::StepSmall;
            break;
        }
    }

    let objective_value = data.residuals(model, &theta).iter().map(|&r| huber_rho(r, threshold)).sum();
    Ok(HuberFit {
        result: OptimResult {
            theta_hat: theta,
            objective_value,
            iterations,
            converged: termination.is_converged(),
            termination,
            saturated,
        },
        threshold,
        lse_fallback: false,
    })
}

/// Median of `|rᵢ − median(r)|`.
pub fn median_abs_deviation(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least absolute deviations fit by Nelder–Mead.
pub fn median_fit(model: &RegressionModel, data: &Dataset, theta0: &[f64]) -> Result<OptimResult> {
    median_fit_with(model, data, theta0, &NelderMeadOptions::default())
}

pub fn median_fit_with(
    model: &RegressionModel,
    data: &Dataset,
    theta0: &[f64],
    opts: &NelderMeadOptions,
) -> Result<OptimResult> {
    data.check(model, theta0)?;
    if data.n() <= model.dim_theta() {
        return Err(Error::invalid(format!("median_fit needs n > q (n = {}, q = {})", data.n(), model.dim_theta())));
    }
    let data = data.canonical();
    let objective = |theta: &[f64]| -> f64 {
        (0..data.n()).map(|i| (data.y[i] - model.eval(data.x.row(i), theta).value).abs()).sum()
    };
    nelder_mead(objective, theta0, opts)
}

/// Tuning for every estimator, bundled for the SIMEX engine.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimatorOptions {
    pub em: EmOptions,
    pub gn: GaussNewtonOptions,
    pub huber: HuberOptions,
    pub nelder_mead: NelderMeadOptions,
}

/// One of the four per-dataset estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Modal regression by EM with kernel bandwidth `h`.
    Modal {
        h: f64,
    },
    Lse,
    Huber,
    Median,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Modal { .. } => "modal",
            Estimator::Lse => "lse",
            Estimator::Huber => "huber",
            Estimator::Median => "median",
        }
    }
}

/// Outcome of a single estimator run.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl Estimator {
    pub fn fit(&self, model: &RegressionModel, data: &Dataset, theta0: &[f64], opts: &EstimatorOptions) -> Result<Fit> {
        match *self {
            Estimator::Modal { h } => {
                let (theta, diag) = modal_fit(model, data, h, theta0, &opts.em)?;
                Ok(Fit { theta, converged: diag.converged, iterations: diag.iterations })
            }
            Estimator::Lse => Ok(from_optim(lse_fit_with(model, data, theta0, &opts.gn)?)),
            Estimator::Huber => {
                let f = huber_fit_with(model, data, theta0, &opts.huber)?;
                Ok(from_optim(f.result))
            }
            Estimator::Median => Ok(from_optim(median_fit_with(model, data, theta0, &opts.nelder_mead)?)),
        }
    }
}

fn from_optim(r: OptimResult) -> Fit {
    Fit { theta: r.theta_hat, converged: r.converged, iterations: r.iterations }
}
