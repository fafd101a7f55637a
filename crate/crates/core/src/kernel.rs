//! Standard normal kernel and its scaled form `φ_h(t) = h⁻¹ φ(t/h)`.

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
// ln(2π) / 2
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
#[inline]
pub fn phi(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// `ln φ(t)`.
#[inline]
pub fn log_phi(t: f64) -> f64 {
    -0.5 * t * t - HALF_LN_2PI
}

/// Scaled kernel `h⁻¹ φ(t/h)`.
pub fn phi_h(t: f64, h: f64) -> Result<f64> {
    check_h(h)?;
    Ok(phi(t / h) / h)
}

/// `ln φ_h(t)`; stays finite where `phi_h` underflows.
pub fn log_phi_h(t: f64, h: f64) -> Result<f64> {
    check_h(h)?;
    Ok(log_phi(t / h) - h.ln())
}

/// Derivative of `φ_h` in `t` of the given order (1, 2 or 3).
pub fn phi_h_deriv(t: f64, h: f64, order: u32) -> Result<f64> {
    check_h(h)?;
    let u = t / h;
    let base = phi(u);
    match order {
        1 => Ok(-(t / (h * h * h)) * base),
        2 => Ok((u * u - 1.0) * base / h.powi(3)),
        3 => Ok((3.0 * u - u * u * u) * base / h.powi(4)),
        other => Err(Error::invalid(format!("kernel derivative order {other} not supported (1, 2 or 3)"))),
    }
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth must be positive and finite, got {h}")))
    }
}

/// Rule-of-thumb constants `h = c·n^(−1/7)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthRule {
    pub c: f64,
    pub n: usize,
}

/// Kernel bandwidth, optionally remembering the rule it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    h: f64,
    rule: Option<BandwidthRule>,
}

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self> {
        check_h(h)?;
        Ok(Bandwidth { h, rule: None })
    }

    /// `h = c·n^(−1/7)`.
    pub fn from_rule(c: f64, n: usize) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || n == 0 {
            return Err(Error::invalid(format!("bandwidth rule needs c > 0 and n > 0 (c={c}, n={n})")));
        }
        let h = c * (n as f64).powf(-1.0 / 7.0);
        Ok(Bandwidth { h, rule: Some(BandwidthRule { c, n }) })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn rule(&self) -> Option<BandwidthRule> {
        self.rule
    }
}
