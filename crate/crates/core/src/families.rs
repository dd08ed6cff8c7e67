//! Exponential-family response distributions in canonical form.
//!
//! The log density of a response `y` with canonical parameter `ν` and
//! dispersion `φ` is `(y ν − d(ν)) / φ + c(y, φ)`. Only the Gaussian family
//! with identity link and the binomial family with logit link are supported.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Gaussian response, identity link.
    Gaussian,
    /// Binomial count out of `trials`, logit link.
    Binomial,
}

/// Mean of a binomial proportion stored as the pair `(p, 1 − p)`, each
/// computed to full relative precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proportion {
    pub p: f64,
    pub q: f64,
}

/// Logistic function, stable for any finite argument.
pub fn expit(nu: f64) -> f64 {
    Scalar::expit(nu)
}

/// Inverse logit returning both `p` and `1 − p` accurately.
pub fn inverse_logit(nu: f64) -> Proportion {
    Proportion {
        p: expit(nu),
        q: expit(-nu),
    }
}

/// Logit of a proportion given as `(p, 1 − p)`.
pub fn logit(m: Proportion) -> f64 {
    m.p.ln() - m.q.ln()
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
        }
    }

    /// True when the dispersion parameter is fixed at one.
    pub fn fixed_dispersion(&self) -> bool {
        matches!(self, Family::Binomial)
    }

    /// Cumulant function `d(ν)`; `trials` is ignored for the Gaussian family.
    #[inline]
    pub fn cumulant<S: Scalar>(&self, nu: S, trials: f64) -> S {
        match self {
            Family::Gaussian => nu * nu * 0.5,
            Family::Binomial => nu.softplus() * trials,
        }
    }

    /// First derivative `d′(ν)`, the conditional mean.
    #[inline]
    pub fn mean<S: Scalar>(&self, nu: S, trials: f64) -> S {
        match self {
            Family::Gaussian => nu,
            Family::Binomial => nu.expit() * trials,
        }
    }

    /// Second derivative `d″(ν)`, the variance function.
    #[inline]
    pub fn variance<S: Scalar>(&self, nu: S, trials: f64) -> S {
        match self {
            Family::Gaussian => S::one(),
            Family::Binomial => nu.expit() * (-nu).expit() * trials,
        }
    }

    /// Mean and variance function together, sharing the logistic evaluation.
    #[inline]
    pub fn mean_variance<S: Scalar>(&self, nu: S, trials: f64) -> (S, S) {
        match self {
            Family::Gaussian => (nu, S::one()),
            Family::Binomial => {
                let p = nu.expit();
                let q = (-nu).expit();
                (p * trials, p * q * trials)
            }
        }
    }

    /// `c(y, φ)`, the part of the log density free of `ν`.
    pub fn log_normalizer<S: Scalar>(&self, y: f64, trials: f64, phi: S) -> S {
        match self {
            Family::Gaussian => {
                -(phi.recip() * (0.5 * y * y)) - (phi * std::f64::consts::TAU).ln() * 0.5
            }
            Family::Binomial => S::from_f64(ln_binomial_coefficient(trials, y)),
        }
    }

    /// Full log density; fails for non-positive dispersion or invalid binomial data.
    pub fn log_density<S: Scalar>(&self, y: f64, trials: f64, nu: S, phi: S) -> Result<S> {
        if phi.value() <= 0.0 || !phi.value().is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dispersion must be positive, got {}",
                phi.value()
            )));
        }
        if *self == Family::Binomial {
            validate_binomial(y, trials)?;
        }
        Ok((nu * y - self.cumulant(nu, trials)) / phi + self.log_normalizer(y, trials, phi))
    }

    /// Link function applied to a mean on the response scale.
    pub fn link(&self, mu: f64, trials: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Binomial => {
                let p = mu / trials;
                logit(Proportion { p, q: 1.0 - p })
            }
        }
    }
}

pub(crate) fn validate_binomial(y: f64, trials: f64) -> Result<()> {
    if !(trials >= 1.0 && trials.fract() == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "binomial trials must be a positive integer, got {trials}"
        )));
    }
    if !(y >= 0.0 && y <= trials && y.fract() == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "binomial response must be an integer in [0, {trials}], got {y}"
        )));
    }
    Ok(())
}

/// `ln C(m, y)` for integer-valued `m` and `y`.
pub fn ln_binomial_coefficient(m: f64, y: f64) -> f64 {
    ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0)
}
