//! Logistic psychometric model relating reference level to the probability
//! that a rater prefers the reference over the standard.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default slope in scale levels per logit unit.
pub const DEFAULT_SLOPE: f64 = 2.5;
/// Default symmetric lapse rate.
pub const DEFAULT_LAPSE: f64 = 0.02;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Outcome of one paired comparison, expressed relative to the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    PreferReference,
    PreferStandard,
}

impl Choice {
    pub fn from_prefers_reference(prefers_reference: bool) -> Self {
        if prefers_reference {
            Choice::PreferReference
        } else {
            Choice::PreferStandard
        }
    }

    pub fn prefers_reference(self) -> bool {
        matches!(self, Choice::PreferReference)
    }
}

/// Logistic preference model with midpoint, slope and symmetric lapse.
///
/// The lapse compresses the curve into `[lapse, 1 - lapse]`. A lapse of
/// exactly 0.5 is accepted and describes a chance observer whose
/// responses carry no information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricModel {
    midpoint: f64,
    slope: f64,
    lapse: f64,
}

impl PsychometricModel {
    pub fn new(midpoint: f64, slope: f64, lapse: f64) -> Result<Self> {
        validate_likelihood(slope, lapse)?;
        if !midpoint.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "midpoint must be finite, got {midpoint}"
            )));
        }
        Ok(Self {
            midpoint,
            slope,
            lapse,
        })
    }

    pub fn midpoint(&self) -> f64 {
        self.midpoint
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn lapse(&self) -> f64 {
        self.lapse
    }

    /// Probability that the reference at `level` is preferred over the standard.
    #[inline]
    pub fn prefer_reference_prob(&self, level: f64) -> f64 {
        prefer_reference_prob_raw(self.midpoint, self.slope, self.lapse, level)
    }

    /// Draws a simulated response at `level`.
    pub fn simulate_response<R: Rng + ?Sized>(&self, level: f64, rng: &mut R) -> Choice {
        let p = self.prefer_reference_prob(level);
        Choice::from_prefers_reference(rng.random::<f64>() < p)
    }
}

pub(crate) fn validate_likelihood(slope: f64, lapse: f64) -> Result<()> {
    if !(slope.is_finite() && slope > 0.0) {
        return Err(Error::ParameterDomain(format!(
            "slope must be finite and > 0, got {slope}"
        )));
    }
    if !(0.0..=0.5).contains(&lapse) {
        return Err(Error::ParameterDomain(format!(
            "lapse must lie in [0, 0.5], got {lapse}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn prefer_reference_prob_raw(midpoint: f64, slope: f64, lapse: f64, level: f64) -> f64 {
    lapse + (1.0 - 2.0 * lapse) * sigmoid((level - midpoint) / slope)
}

/// Free-function form of [`PsychometricModel::prefer_reference_prob`].
pub fn prefer_reference_prob(model: &PsychometricModel, level: f64) -> Result<f64> {
    if !level.is_finite() {
        return Err(Error::ParameterDomain(format!(
            "level must be finite, got {level}"
        )));
    }
    Ok(model.prefer_reference_prob(level))
}

/// Free-function form of [`PsychometricModel::simulate_response`].
pub fn simulate_response<R: Rng + ?Sized>(
    model: &PsychometricModel,
    level: f64,
    rng: &mut R,
) -> Choice {
    model.simulate_response(level, rng)
}

/// Logistic with free lower and upper asymptotes, used for post-hoc fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourParamLogistic {
    pub midpoint: f64,
    pub slope: f64,
    pub lower: f64,
    pub upper: f64,
}

impl FourParamLogistic {
    pub fn new(midpoint: f64, slope: f64, lower: f64, upper: f64) -> Result<Self> {
        let fit = Self {
            midpoint,
            slope,
            lower,
            upper,
        };
        fit.validate()?;
        Ok(fit)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.midpoint.is_finite() {
            return Err(Error::ParameterDomain("midpoint must be finite".into()));
        }
        if !(self.slope.is_finite() && self.slope > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "slope must be > 0, got {}",
                self.slope
            )));
        }
        if !(self.lower.is_finite() && self.upper.is_finite()) || self.lower >= self.upper {
            return Err(Error::ParameterDomain(format!(
                "need lower < upper, got lower={} upper={}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, level: f64) -> f64 {
        self.lower + (self.upper - self.lower) * sigmoid((level - self.midpoint) / self.slope)
    }
}

pub fn eval_four_param(fit: &FourParamLogistic, level: f64) -> Result<f64> {
    fit.validate()?;
    Ok(fit.eval(level))
}

/// Entropy of a Bernoulli variable in nats, without domain checks.
#[inline]
pub(crate) fn binary_entropy_unchecked(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    let q = 1.0 - p;
    if q > 0.0 {
        h -= q * q.ln();
    }
    h
}

/// Entropy of a Bernoulli(p) variable in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ParameterDomain(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(binary_entropy_unchecked(p))
}
