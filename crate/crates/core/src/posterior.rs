//! Weighted particle approximation of the posterior over the midpoint.
//!
//! Particle positions are fixed at initialization and only the weights move,
//! so the filter is an importance-weighted grid over candidate midpoints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psychometric::{
    prefer_reference_prob_raw, validate_likelihood, Choice, DEFAULT_LAPSE, DEFAULT_SLOPE,
};

pub const DEFAULT_PARTICLES: usize = 225;

/// Slope and lapse shared by every particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodModel {
    pub slope: f64,
    pub lapse: f64,
}

impl LikelihoodModel {
    pub fn new(slope: f64, lapse: f64) -> Result<Self> {
        validate_likelihood(slope, lapse)?;
        Ok(Self { slope, lapse })
    }

    /// Probability of preferring the reference at `level` if the midpoint is `midpoint`.
    #[inline]
    pub fn prob(&self, midpoint: f64, level: f64) -> f64 {
        prefer_reference_prob_raw(midpoint, self.slope, self.lapse, level)
    }

    #[inline]
    pub fn likelihood(&self, midpoint: f64, level: f64, choice: Choice) -> f64 {
        let p = self.prob(midpoint, level);
        match choice {
            Choice::PreferReference => p,
            Choice::PreferStandard => 1.0 - p,
        }
    }
}

impl Default for LikelihoodModel {
    fn default() -> Self {
        Self {
            slope: DEFAULT_SLOPE,
            lapse: DEFAULT_LAPSE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParticleInit {
    #[default]
    StratifiedGrid,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePosterior {
    particles: Vec<f64>,
    weights: Vec<f64>,
    model: LikelihoodModel,
    degenerate: bool,
}

impl ParticlePosterior {
    /// Uniform prior over `[scale_min, scale_max]`.
    ///
    /// Random mode draws i.i.d. uniform positions and stores them sorted.
    pub fn init<R: Rng + ?Sized>(
        scale_min: f64,
        scale_max: f64,
        n_particles: usize,
        mode: ParticleInit,
        model: LikelihoodModel,
        rng: &mut R,
    ) -> Result<Self> {
        if n_particles < 2 {
            return Err(Error::Config(format!(
                "need at least 2 particles, got {n_particles}"
            )));
        }
        if !(scale_min.is_finite() && scale_max.is_finite() && scale_min < scale_max) {
            return Err(Error::Config(format!(
                "invalid scale range [{scale_min}, {scale_max}]"
            )));
        }
        validate_likelihood(model.slope, model.lapse)?;
        let width = scale_max - scale_min;
        let particles = match mode {
            ParticleInit::StratifiedGrid => (0..n_particles)
                .map(|i| scale_min + (i as f64 + 0.5) * width / n_particles as f64)
                .collect(),
            ParticleInit::Random => {
                let mut p: Vec<f64> = (0..n_particles)
                    .map(|_| scale_min + width * rng.random::<f64>())
                    .collect();
                p.sort_by(f64::total_cmp);
                p
            }
        };
        let w = 1.0 / n_particles as f64;
        Ok(Self {
            particles,
            weights: vec![w; n_particles],
            model,
            degenerate: false,
        })
    }

    /// Stratified-grid prior; needs no random stream.
    pub fn stratified(
        scale_min: f64,
        scale_max: f64,
        n_particles: usize,
        model: LikelihoodModel,
    ) -> Result<Self> {
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::init(
            scale_min,
            scale_max,
            n_particles,
            ParticleInit::StratifiedGrid,
            model,
            &mut unused,
        )
    }

    /// Builds a posterior from explicit particles and weights (normalized here).
    pub fn from_parts(particles: Vec<f64>, weights: Vec<f64>, model: LikelihoodModel) -> Result<Self> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} particles vs {} weights",
                particles.len(),
                weights.len()
            )));
        }
        if particles.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("particle positions must be finite".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
        validate_likelihood(model.slope, model.lapse)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("weights sum to zero".into()));
        }
        Ok(Self {
            particles,
            weights: weights.into_iter().map(|w| w / total).collect(),
            model,
            degenerate: false,
        })
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn model(&self) -> LikelihoodModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Set when an update was rejected for wiping out all posterior mass.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Returns the posterior after observing `choice` at `level`.
    pub fn update(&self, level: f64, choice: Choice) -> Result<Self> {
        let mut next = self.clone();
        next.apply(level, choice)?;
        Ok(next)
    }

    /// In-place form of [`update`](Self::update). On a zero-mass observation
    /// the weights are left untouched and the posterior is flagged degenerate.
    pub fn apply(&mut self, level: f64, choice: Choice) -> Result<()> {
        if !level.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "level must be finite, got {level}"
            )));
        }
        let updated: Vec<f64> = self
            .particles
            .iter()
            .zip(&self.weights)
            .map(|(&q, &w)| w * self.model.likelihood(q, level, choice))
            .collect();
        let total: f64 = updated.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            self.degenerate = true;
            return Err(Error::DegeneratePosterior { level });
        }
        for (w, u) in self.weights.iter_mut().zip(updated) {
            *w = u / total;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(q, w)| q * w)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(q, w)| w * (q - mean) * (q - mean))
            .sum()
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Central interval holding at least `mass` of the weight, read off the
    /// cumulative weights of the position-sorted particles.
    pub fn credible_interval(&self, mass: f64) -> Result<(f64, f64)> {
        if !(mass > 0.0 && mass < 1.0) {
            return Err(Error::ParameterDomain(format!(
                "interval mass must lie in (0, 1), got {mass}"
            )));
        }
        let mut order: Vec<usize> = (0..self.particles.len()).collect();
        order.sort_by(|&a, &b| self.particles[a].total_cmp(&self.particles[b]));
        let tail = (1.0 - mass) / 2.0;
        let lo_target = tail;
        let hi_target = 1.0 - tail;
        let mut cumulative = 0.0;
        let mut lo = None;
        let mut hi = self.particles[*order.last().unwrap()];
        for &i in &order {
            cumulative += self.weights[i];
            if lo.is_none() && cumulative > lo_target {
                lo = Some(self.particles[i]);
            }
            if cumulative >= hi_target {
                hi = self.particles[i];
                break;
            }
        }
        Ok((lo.unwrap_or(self.particles[order[0]]), hi))
    }
}

pub fn init_posterior<R: Rng + ?Sized>(
    scale_min: f64,
    scale_max: f64,
    n_particles: usize,
    mode: ParticleInit,
    model: LikelihoodModel,
    rng: &mut R,
) -> Result<ParticlePosterior> {
    ParticlePosterior::init(scale_min, scale_max, n_particles, mode, model, rng)
}

pub fn update(posterior: &ParticlePosterior, level: f64, choice: Choice) -> Result<ParticlePosterior> {
    posterior.update(level, choice)
}

pub fn posterior_mean(posterior: &ParticlePosterior) -> f64 {
    posterior.mean()
}

pub fn posterior_sd(posterior: &ParticlePosterior) -> f64 {
    posterior.sd()
}

pub fn credible_interval(posterior: &ParticlePosterior, mass: f64) -> Result<(f64, f64)> {
    posterior.credible_interval(mass)
}
