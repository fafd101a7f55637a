//! Local optimizers: Nelder–Mead simplex search and Levenberg-damped
//! Gauss–Newton for weighted nonlinear least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::model::{Evaluation, RegressionModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientSmall,
    StepSmall,
    MaxIter,
    Degenerate,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        matches!(self, Termination::GradientSmall | Termination::StepSmall)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub theta_hat: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Some model evaluation hit the exponent clamp during the search.
    pub saturated: bool,
}

impl OptimResult {
    fn finish(
        theta_hat: Vec<f64>,
        objective_value: f64,
        iterations: usize,
        termination: Termination,
        saturated: bool,
    ) -> Self {
        OptimResult {
            theta_hat,
            objective_value,
            iterations,
            converged: termination.is_converged(),
            termination,
            saturated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Stop once the simplex fits in a box of this half-width around its best vertex.
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { step_tol: 1e-10, max_iter: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub damping_init: f64,
    pub damping_factor: f64,
    pub damping_cap: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            grad_tol: 1e-9,
            step_tol: 1e-10,
            max_iter: 500,
            damping_init: 1e-3,
            damping_factor: 10.0,
            damping_cap: 1e8,
        }
    }
}

/// Minimizes `objective` starting from `theta0` with the standard
/// reflection / expansion / contraction / shrink moves.
pub fn nelder_mead<F>(objective: F, theta0: &[f64], opts: &NelderMeadOptions) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64,
{
    let q = theta0.len();
    if q == 0 {
        return Err(Error::invalid("nelder_mead needs at least one parameter"));
    }
    let f0 = objective(theta0);
    if !f0.is_finite() {
        return Err(Error::invalid(format!("objective is not finite at the starting point ({f0})")));
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(q + 1);
    let mut values: Vec<f64> = Vec::with_capacity(q + 1);
    simplex.push(theta0.to_vec());
    values.push(f0);
    for i in 0..q {
        let mut v = theta0.to_vec();
        v[i] += f64::max(0.1, 0.1 * theta0[i].abs());
        values.push(objective(&v));
        simplex.push(v);
    }

    let eval = |p: &[f64]| {
        let v = objective(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut order: Vec<usize> = (0..=q).collect();
    let mut iterations = 0;
    let termination = loop {
        // stable sort keeps ties in index order -> deterministic
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[q];
        let second_worst = order[q - 1.min(q)];

        let diameter =
            simplex.iter().flat_map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        if diameter < opts.step_tol {
            break Termination::StepSmall;
        }
        if iterations >= opts.max_iter {
            break Termination::MaxIter;
        }
        iterations += 1;

        let mut centroid = vec![0.0; q];
        for &i in &order[..q] {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= q as f64);

        let along =
            |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[worst]).map(|(c, w)| c + t * (c - w)).collect() };

        let reflected = along(1.0);
        let f_r = eval(&reflected);
        if f_r < values[best] {
            let expanded = along(2.0);
            let f_e = eval(&expanded);
            if f_e < f_r {
                simplex[worst] = expanded;
                values[worst] = f_e;
            } else {
                simplex[worst] = reflected;
                values[worst] = f_r;
            }
            continue;
        }
        if f_r < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = f_r;
            continue;
        }
        let (contracted, f_c) = if f_r < values[worst] {
            let c = along(0.5);
            let f = eval(&c);
            (c, f)
        } else {
            let c = along(-0.5);
            let f = eval(&c);
            (c, f)
        };
        if f_c < values[worst].min(f_r) {
            simplex[worst] = contracted;
            values[worst] = f_c;
            continue;
        }
        // shrink toward the best vertex
        let anchor = simplex[best].clone();
        for i in 0..=q {
            if i == best {
                continue;
            }
            for (x, a) in simplex[i].iter_mut().zip(&anchor) {
                *x = a + 0.5 * (*x - a);
            }
            values[i] = eval(&simplex[i]);
        }
    };

    let best = (0..=q).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    let theta = simplex.swap_remove(best);
    let value = objective(&theta);
    Ok(OptimResult::finish(theta, value, iterations, termination, false))
}

/// A weighted least-squares problem `Σ wᵢ (targetᵢ − fᵢ(θ))²`.
pub trait LeastSquaresProblem {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn weight(&self, i: usize) -> f64;
    fn target(&self, i: usize) -> f64;
    fn predict(&self, i: usize, theta: &[f64]) -> Evaluation;
    /// Prediction plus `∂fᵢ/∂θ` written into `grad`.
    fn predict_with_gradient(&self, i: usize, theta: &[f64], grad: &mut [f64]) -> Evaluation;
}

/// Weighted SSE at `theta` and whether any evaluation saturated.
pub fn weighted_sse<P: LeastSquaresProblem + ?Sized>(problem: &P, theta: &[f64]) -> (f64, bool) {
    let mut sse = 0.0;
    let mut saturated = false;
    for i in 0..problem.len() {
        let w = problem.weight(i);
        if w == 0.0 {
            continue;
        }
        let e = problem.predict(i, theta);
        saturated |= e.saturated;
        let r = problem.target(i) - e.value;
        sse += w * r * r;
    }
    (sse, saturated)
}

/// Levenberg–Marquardt iteration: the damped normal equations
/// `(JᵀWJ + μ·diag(JᵀWJ)) δ = JᵀW r`, with μ raised on rejected steps and
/// lowered on accepted ones. Accepted iterates strictly decrease the SSE.
pub fn levenberg_marquardt<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    opts: &GaussNewtonOptions,
) -> Result<OptimResult> {
    let q = problem.dim();
    if theta0.len() != q {
        return Err(Error::Dimension { what: "theta0", expected: q, got: theta0.len() });
    }
    let mut theta = theta0.to_vec();
    let (mut sse, mut saturated) = weighted_sse(problem, &theta);
    if !sse.is_finite() {
        return Err(Error::invalid(format!("weighted SSE is not finite at the starting point ({sse})")));
    }
    let support = (0..problem.len()).filter(|&i| problem.weight(i) > 0.0).count();
    if support < q {
        return Ok(OptimResult::finish(theta, sse, 0, Termination::Degenerate, saturated));
    }

    let mut mu = opts.damping_init;
    let mut grad = vec![0.0; q];
    let mut jtj = DMatrix::<f64>::zeros(q, q);
    let mut jtr = DVector::<f64>::zeros(q);

    for iter in 0..opts.max_iter {
        jtj.fill(0.0);
        jtr.fill(0.0);
        for i in 0..problem.len() {
            let w = problem.weight(i);
            if w == 0.0 {
                continue;
            }
            let e = problem.predict_with_gradient(i, &theta, &mut grad);
            saturated |= e.saturated;
            let r = problem.target(i) - e.value;
            for a in 0..q {
                jtr[a] += w * grad[a] * r;
                for b in 0..=a {
                    jtj[(a, b)] += w * grad[a] * grad[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                jtj[(b, a)] = jtj[(a, b)];
            }
        }

        if jtr.amax() < opts.grad_tol {
            polish(problem, &jtj, &jtr, &mut theta, &mut sse);
            return Ok(OptimResult::finish(theta, sse, iter, Termination::GradientSmall, saturated));
        }

        let max_diag = (0..q).map(|a| jtj[(a, a)]).fold(0.0, f64::max);
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            return Ok(OptimResult::finish(theta, sse, iter, Termination::Degenerate, saturated));
        }
        let floor = 1e-12 * max_diag;

        loop {
            let mut damped = jtj.clone();
            for a in 0..q {
                damped[(a, a)] += mu * jtj[(a, a)].max(floor);
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&jtr),
                None => {
                    mu *= opts.damping_factor;
                    if mu > opts.damping_cap {
                        return Ok(OptimResult::finish(theta, sse, iter, Termination::Degenerate, saturated));
                    }
                    continue;
                }
            };
            let theta_norm = theta.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            if step.amax() <= opts.step_tol * (theta_norm + opts.step_tol) {
                polish(problem, &jtj, &jtr, &mut theta, &mut sse);
                return Ok(OptimResult::finish(theta, sse, iter + 1, Termination::StepSmall, saturated));
            }
            let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
            let (cand_sse, cand_sat) = weighted_sse(problem, &candidate);
            if cand_sse.is_finite() && cand_sse < sse {
                theta = candidate;
                sse = cand_sse;
                saturated |= cand_sat;
                mu = (mu / opts.damping_factor).max(1e-15);
                break;
            }
            mu *= opts.damping_factor;
            if mu > opts.damping_cap {
                return Ok(OptimResult::finish(theta, sse, iter + 1, Termination::Degenerate, saturated));
            }
        }
    }
    Ok(OptimResult::finish(theta, sse, opts.max_iter, Termination::MaxIter, saturated))
}

/// Final undamped Gauss–Newton step, kept unless it raises the SSE beyond
/// rounding noise. Makes problems with linear residuals exact to rounding.
fn polish<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    jtj: &DMatrix<f64>,
    jtr: &DVector<f64>,
    theta: &mut Vec<f64>,
    sse: &mut f64,
) {
    let Some(ch) = jtj.clone().cholesky() else {
        return;
    };
    let step = ch.solve(jtr);
    let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
    let (cand_sse, _) = weighted_sse(problem, &candidate);
    if cand_sse.is_finite() && cand_sse <= *sse * (1.0 + 8.0 * f64::EPSILON) {
        *theta = candidate;
        *sse = cand_sse;
    }
}

/// `Σ wᵢ (yᵢ − m(xᵢ, θ))²` for a regression model.
#[derive(Debug, Clone, Copy)]
pub struct ModelLeastSquares<'a> {
    pub model: &'a RegressionModel,
    pub x: &'a RowMatrix,
    pub y: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl LeastSquaresProblem for ModelLeastSquares<'_> {
    fn dim(&self) -> usize {
        self.model.dim_theta()
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    #[inline]
    fn target(&self, i: usize) -> f64 {
        self.y[i]
    }

    #[inline]
    fn predict(&self, i: usize, theta: &[f64]) -> Evaluation {
        self.model.eval(self.x.row(i), theta)
    }

    #[inline]
    fn predict_with_gradient(&self, i: usize, theta: &[f64], grad: &mut [f64]) -> Evaluation {
        self.model.eval_with_gradient(self.x.row(i), theta, grad)
    }
}

/// Minimizes `Σ wᵢ (yᵢ − m(xᵢ, θ))²` by damped Gauss–Newton.
pub fn weighted_gauss_newton(
    model: &RegressionModel,
    x: &RowMatrix,
    y: &[f64],
    weights: &[f64],
    theta0: &[f64],
    opts: &GaussNewtonOptions,
) -> Result<OptimResult> {
    let n = y.len();
    check_regression_inputs(model, x, y, theta0)?;
    if weights.len() != n {
        return Err(Error::Dimension { what: "weights", expected: n, got: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::invalid("weights sum to zero"));
    }
    let problem = ModelLeastSquares { model, x, y, weights: Some(weights) };
    levenberg_marquardt(&problem, theta0, opts)
}

pub(crate) fn check_regression_inputs(model: &RegressionModel, x: &RowMatrix, y: &[f64], theta0: &[f64]) -> Result<()> {
    let n = y.len();
    if x.rows() != n {
        return Err(Error::Dimension { what: "x rows", expected: n, got: x.rows() });
    }
    if x.cols() != model.dim_x() {
        return Err(Error::Dimension { what: "x columns", expected: model.dim_x(), got: x.cols() });
    }
    if theta0.len() != model.dim_theta() {
        return Err(Error::Dimension { what: "theta0", expected: model.dim_theta(), got: theta0.len() });
    }
    if n < model.dim_theta() {
        return Err(Error::invalid(format!("need at least {} observations, got {n}", model.dim_theta())));
    }
    Ok(())
}
