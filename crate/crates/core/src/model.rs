//! Parametric regression functions `m(x, θ)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound on `β·x` for the exponential model; larger exponents are clamped.
pub const EXPONENT_GUARD: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(rename = "exp")]
    Exponential,
    Linear,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exp" | "exponential" => Ok(ModelKind::Exponential),
            "linear" => Ok(ModelKind::Linear),
            other => Err(Error::invalid(format!("unknown model kind `{other}` (expected exp or linear)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Exponential => "exp",
            ModelKind::Linear => "linear",
        })
    }
}

/// A regression function with an analytic gradient in θ.
///
/// `Exponential` is `m(x, θ) = α·exp(β·x)` with scalar `x` and `θ = (α, β)`.
/// `Linear` is `m(x, θ) = θᵀx` with `dim θ = dim x = p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegressionModel {
    Exponential,
    Linear { p: usize },
}

/// A model value together with the overflow-guard flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// The exponent hit the ±[`EXPONENT_GUARD`] clamp.
    pub saturated: bool,
}

impl RegressionModel {
    pub fn new(kind: ModelKind, p: usize) -> Result<Self> {
        match kind {
            ModelKind::Exponential if p == 1 => Ok(RegressionModel::Exponential),
            ModelKind::Exponential => {
                Err(Error::Dimension { what: "exponential model covariate", expected: 1, got: p })
            }
            ModelKind::Linear if p >= 1 => Ok(RegressionModel::Linear { p }),
            ModelKind::Linear => Err(Error::invalid("linear model needs p >= 1")),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            RegressionModel::Exponential => ModelKind::Exponential,
            RegressionModel::Linear { .. } => ModelKind::Linear,
        }
    }

    /// Number of parameters `q`.
    pub fn dim_theta(&self) -> usize {
        match *self {
            RegressionModel::Exponential => 2,
            RegressionModel::Linear { p } => p,
        }
    }

    /// Covariate dimension `p`.
    pub fn dim_x(&self) -> usize {
        match *self {
            RegressionModel::Exponential => 1,
            RegressionModel::Linear { p } => p,
        }
    }

    fn check(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.dim_x() {
            return Err(Error::Dimension { what: "x", expected: self.dim_x(), got: x.len() });
        }
        if theta.len() != self.dim_theta() {
            return Err(Error::Dimension { what: "theta", expected: self.dim_theta(), got: theta.len() });
        }
        Ok(())
    }

    /// `m(x, θ)`, dimension-checked. Saturation is reported through
    /// [`RegressionModel::eval`]; here the clamped value is returned.
    pub fn evaluate(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.check(x, theta)?;
        Ok(self.eval(x, theta).value)
    }

    /// `∂m/∂θ`, dimension-checked.
    pub fn gradient(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check(x, theta)?;
        let mut g = vec![0.0; self.dim_theta()];
        self.eval_with_gradient(x, theta, &mut g);
        Ok(g)
    }

    /// Unchecked evaluation for inner loops.
    #[inline]
    pub fn eval(&self, x: &[f64], theta: &[f64]) -> Evaluation {
        match *self {
            RegressionModel::Exponential => {
                let (e, saturated) = guarded_exp(theta[1] * x[0]);
                Evaluation { value: theta[0] * e, saturated }
            }
            RegressionModel::Linear { .. } => {
                Evaluation { value: x.iter().zip(theta).map(|(a, b)| a * b).sum(), saturated: false }
            }
        }
    }

    /// Unchecked evaluation that also writes the gradient into `grad`.
    #[inline]
    pub fn eval_with_gradient(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> Evaluation {
        match *self {
            RegressionModel::Exponential => {
                let (e, saturated) = guarded_exp(theta[1] * x[0]);
                grad[0] = e;
                grad[1] = theta[0] * x[0] * e;
                Evaluation { value: theta[0] * e, saturated }
            }
            RegressionModel::Linear { .. } => {
                grad.copy_from_slice(x);
                Evaluation { value: x.iter().zip(theta).map(|(a, b)| a * b).sum(), saturated: false }
            }
        }
    }
}

#[inline]
fn guarded_exp(z: f64) -> (f64, bool) {
    if z > EXPONENT_GUARD {
        (EXPONENT_GUARD.exp(), true)
    } else if z < -EXPONENT_GUARD {
        ((-EXPONENT_GUARD).exp(), true)
    } else if z.is_nan() {
        (f64::NAN, true)
    } else {
        (z.exp(), false)
    }
}
