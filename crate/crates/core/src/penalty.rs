//! Huber and truncated Huber penalties, and the two per-pair update rules of
//! the alternating minimization.
//!
//! The truncated penalty is rewritten as a Huber penalty on `x - l` plus an
//! L0 charge of `b - a/2` on the outlier variable `l`; the Huber penalty in
//! turn is a minimum over quadratics `μ x² + ψ(μ)`. [`HuberSpec::l_update`]
//! and [`HuberSpec::mu_update`] are the closed-form minimizers of those two
//! inner problems.

use crate::error::{Error, Result};

/// Which branch of the Huber penalty an argument falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HuberBranch {
    /// `|x| < a`: `x² / 2a`.
    Quadratic,
    /// `|x| ≥ a`: `|x| - a/2`.
    Linear,
}

#[inline]
pub fn branch(x: f64, a: f64) -> HuberBranch {
    if x.abs() < a {
        HuberBranch::Quadratic
    } else {
        HuberBranch::Linear
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberSpec {
    a: f64,
    b: f64,
}

impl HuberSpec {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Contract(format!("huber a > 0 (got {a})")));
        }
        if !(b >= a) || b.is_nan() {
            return Err(Error::Contract(format!("huber a ≤ b (got a={a}, b={b})")));
        }
        Ok(HuberSpec { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// The constant the truncated penalty saturates at, `b - a/2`.
    #[inline]
    pub fn ceiling(&self) -> f64 {
        self.b - 0.5 * self.a
    }

    #[inline]
    pub fn huber(&self, x: f64) -> f64 {
        huber_raw(x, self.a)
    }

    #[inline]
    pub fn truncated(&self, x: f64) -> f64 {
        if x.abs() <= self.b {
            huber_raw(x, self.a)
        } else {
            self.ceiling()
        }
    }

    /// Optimal outlier variable for a pair difference: zero unless the
    /// difference exceeds `b`, in which case it absorbs the whole difference.
    #[inline]
    pub fn l_update(&self, grad: f64) -> f64 {
        if grad.abs() <= self.b {
            0.0
        } else {
            grad
        }
    }

    /// Optimal half-quadratic weight for `residual = grad - l`.
    #[inline]
    pub fn mu_update(&self, residual: f64) -> f64 {
        mu_raw(residual, self.a)
    }

    /// The conjugate term `ψ(μ) = 1/(4μ) - a/2`, defined on `(0, 1/(2a)]`.
    #[inline]
    pub fn psi(&self, mu: f64) -> f64 {
        psi_raw(mu, self.a)
    }

    /// Largest admissible `μ`.
    #[inline]
    pub fn mu_max(&self) -> f64 {
        0.5 / self.a
    }

    #[inline]
    pub fn mu_in_domain(&self, mu: f64) -> bool {
        mu > 0.0 && mu <= self.mu_max()
    }
}

#[inline]
fn huber_raw(x: f64, a: f64) -> f64 {
    let ax = x.abs();
    if ax < a {
        x * x / (2.0 * a)
    } else {
        ax - 0.5 * a
    }
}

#[inline]
fn mu_raw(residual: f64, a: f64) -> f64 {
    let r = residual.abs();
    if r < a {
        0.5 / a
    } else {
        0.5 / r
    }
}

#[inline]
fn psi_raw(mu: f64, a: f64) -> f64 {
    0.25 / mu - 0.5 * a
}

fn check_a(a: f64) -> Result<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("huber a > 0 (got {a})")))
    }
}

pub fn huber(x: f64, a: f64) -> Result<f64> {
    check_a(a)?;
    Ok(huber_raw(x, a))
}

pub fn truncated_huber(x: f64, spec: HuberSpec) -> f64 {
    spec.truncated(x)
}

pub fn l_update(grad: f64, spec: HuberSpec) -> f64 {
    spec.l_update(grad)
}

pub fn mu_update(residual: f64, a: f64) -> Result<f64> {
    check_a(a)?;
    Ok(mu_raw(residual, a))
}

pub fn psi(mu: f64, a: f64) -> Result<f64> {
    check_a(a)?;
    if !(mu > 0.0 && mu <= 0.5 / a) {
        return Err(Error::Contract(format!(
            "psi domain is (0, {}], got mu = {mu}",
            0.5 / a
        )));
    }
    Ok(psi_raw(mu, a))
}
