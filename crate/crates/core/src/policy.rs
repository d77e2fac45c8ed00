//! Reference-level selection policies.
//!
//! * BALD picks the level maximizing the mutual information between the next
//!   response and the midpoint.
//! * The staircase moves one level down after a reference preference and one
//!   level up after a standard preference.
//! * The random baseline draws levels uniformly.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::ParticlePosterior;
use crate::psychometric::{binary_entropy_unchecked, Choice};

pub const DEFAULT_LEVELS: u32 = 50;
pub const STAIRCASE_DISCARD_REVERSALS: usize = 2;
pub const STAIRCASE_MIN_REVERSALS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Bald,
    Staircase,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Bald, PolicyKind::Staircase, PolicyKind::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Bald => "bald",
            PolicyKind::Staircase => "staircase",
            PolicyKind::Random => "random",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bald" => Ok(PolicyKind::Bald),
            "staircase" => Ok(PolicyKind::Staircase),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Mutual information (nats) between the next response and the midpoint, at
/// each candidate level.
pub fn bald_acquisition(posterior: &ParticlePosterior, candidate_levels: &[f64]) -> Vec<f64> {
    let model = posterior.model();
    candidate_levels
        .iter()
        .map(|&x| {
            let mut mean_p = 0.0;
            let mut mean_h = 0.0;
            for (&q, &w) in posterior.particles().iter().zip(posterior.weights()) {
                let p = model.prob(q, x);
                mean_p += w * p;
                mean_h += w * binary_entropy_unchecked(p);
            }
            mutual_information(mean_p, mean_h)
        })
        .collect()
}

#[inline]
fn mutual_information(mean_p: f64, mean_h: f64) -> f64 {
    (binary_entropy_unchecked(mean_p.clamp(0.0, 1.0)) - mean_h).clamp(0.0, std::f64::consts::LN_2)
}

/// Index of the largest score, lowest index on ties.
fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Picks the integer level in `1..=n_levels` with maximal acquisition.
pub fn select_next_bald(posterior: &ParticlePosterior, n_levels: u32) -> u32 {
    let levels: Vec<f64> = (1..=n_levels).map(f64::from).collect();
    argmax_lowest(&bald_acquisition(posterior, &levels)) as u32 + 1
}

/// Per-particle response probabilities and entropies at the integer levels,
/// cached because particle positions never move.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionTable {
    n_levels: u32,
    n_particles: usize,
    probs: Vec<f64>,
    entropies: Vec<f64>,
}

impl AcquisitionTable {
    pub fn new(posterior: &ParticlePosterior, n_levels: u32) -> Self {
        let model = posterior.model();
        let n_particles = posterior.len();
        let mut probs = Vec::with_capacity(n_levels as usize * n_particles);
        for level in 1..=n_levels {
            probs.extend(posterior.particles().iter().map(|&q| model.prob(q, f64::from(level))));
        }
        let entropies = probs.iter().map(|&p| binary_entropy_unchecked(p)).collect();
        Self {
            n_levels,
            n_particles,
            probs,
            entropies,
        }
    }

    /// Acquisition at levels `1..=n_levels` for the given weights.
    pub fn scores(&self, weights: &[f64]) -> Vec<f64> {
        debug_assert_eq!(weights.len(), self.n_particles);
        self.probs
            .chunks_exact(self.n_particles)
            .zip(self.entropies.chunks_exact(self.n_particles))
            .map(|(p, h)| {
                let mean_p: f64 = p.iter().zip(weights).map(|(p, w)| p * w).sum();
                let mean_h: f64 = h.iter().zip(weights).map(|(h, w)| h * w).sum();
                mutual_information(mean_p, mean_h)
            })
            .collect()
    }

    pub fn select(&self, weights: &[f64]) -> u32 {
        argmax_lowest(&self.scores(weights)) as u32 + 1
    }

    pub fn n_levels(&self) -> u32 {
        self.n_levels
    }
}

/// One-up/one-down staircase over integer levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaircaseState {
    min_level: u32,
    max_level: u32,
    current_level: u32,
    history: Vec<(u32, Choice)>,
    reversal_levels: Vec<u32>,
    last_direction: Option<i8>,
}

impl StaircaseState {
    pub fn new(start_level: u32, min_level: u32, max_level: u32) -> Result<Self> {
        if min_level > max_level || !(min_level..=max_level).contains(&start_level) {
            return Err(Error::Config(format!(
                "staircase start {start_level} outside [{min_level}, {max_level}]"
            )));
        }
        Ok(Self {
            min_level,
            max_level,
            current_level: start_level,
            history: Vec::new(),
            reversal_levels: Vec::new(),
            last_direction: None,
        })
    }

    /// Staircase starting at the top of `1..=n_levels`.
    pub fn from_top(n_levels: u32) -> Result<Self> {
        Self::new(n_levels, 1, n_levels)
    }

    pub fn current_level(&self) -> u32 {
        self.current_level
    }

    pub fn history(&self) -> &[(u32, Choice)] {
        &self.history
    }

    pub fn reversal_levels(&self) -> &[u32] {
        &self.reversal_levels
    }

    /// Records `choice` at the current level and moves one step.
    ///
    /// A reversal is logged at the current level whenever the intended
    /// direction differs from the previous one; clamped moves still count
    /// toward the direction.
    pub fn observe(&mut self, choice: Choice) -> u32 {
        let level = self.current_level;
        self.history.push((level, choice));
        let direction: i8 = match choice {
            Choice::PreferReference => -1,
            Choice::PreferStandard => 1,
        };
        if matches!(self.last_direction, Some(d) if d != direction) {
            self.reversal_levels.push(level);
        }
        self.last_direction = Some(direction);
        self.current_level = if direction < 0 {
            level.saturating_sub(1).max(self.min_level)
        } else {
            (level + 1).min(self.max_level)
        };
        self.current_level
    }

    pub fn estimate(&self) -> Result<StaircaseEstimate> {
        let levels: Vec<u32> = self.history.iter().map(|(l, _)| *l).collect();
        staircase_estimate_from(&levels, &self.reversal_levels)
    }
}

/// Feeds the previous response (if any) and returns the level to present next.
pub fn staircase_next(state: &mut StaircaseState, last_choice: Option<Choice>) -> u32 {
    if let Some(choice) = last_choice {
        state.observe(choice);
    }
    state.current_level()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaircaseEstimate {
    pub pse: f64,
    /// Sample sd of the levels the estimate averages.
    pub spread: f64,
    pub from_reversals: bool,
}

/// Mean of reversal levels after discarding the first two; with fewer than
/// four reversals, the mean level over the last half of trials.
pub fn staircase_estimate_from(levels: &[u32], reversals: &[u32]) -> Result<StaircaseEstimate> {
    if levels.is_empty() {
        return Err(Error::NoEstimate("staircase has no trials".into()));
    }
    let (used, from_reversals): (&[u32], bool) = if reversals.len() >= STAIRCASE_MIN_REVERSALS {
        (&reversals[STAIRCASE_DISCARD_REVERSALS..], true)
    } else {
        (&levels[levels.len() / 2..], false)
    };
    let values: Vec<f64> = used.iter().map(|&l| f64::from(l)).collect();
    Ok(StaircaseEstimate {
        pse: crate::stats::mean(&values),
        spread: crate::stats::sample_sd(&values).unwrap_or(0.0),
        from_reversals,
    })
}

pub fn staircase_estimate(state: &StaircaseState) -> Result<f64> {
    state.estimate().map(|e| e.pse)
}

/// Uniform integer level in `1..=n_levels`.
pub fn random_next<R: Rng + ?Sized>(rng: &mut R, n_levels: u32) -> u32 {
    rng.random_range(1..=n_levels)
}

/// Which estimator produced a [`PolicyEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    PosteriorMean,
    StaircaseReversals,
    StaircaseLastHalf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyEstimate {
    pub pse: f64,
    pub uncertainty: f64,
    pub method: EstimateMethod,
}

/// Per-variant adaptive state.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum PolicyState {
    Bald {
        posterior: ParticlePosterior,
        table: Arc<AcquisitionTable>,
    },
    Staircase(StaircaseState),
    Random {
        posterior: ParticlePosterior,
        rng: ChaCha8Rng,
        n_levels: u32,
    },
}

impl PolicyState {
    pub fn bald(posterior: ParticlePosterior, n_levels: u32) -> Self {
        let table = Arc::new(AcquisitionTable::new(&posterior, n_levels));
        PolicyState::Bald { posterior, table }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyState::Bald { .. } => PolicyKind::Bald,
            PolicyState::Staircase(_) => PolicyKind::Staircase,
            PolicyState::Random { .. } => PolicyKind::Random,
        }
    }

    /// Level for the next presentation. Random consumes its stream, so call
    /// once per trial.
    pub fn next_level(&mut self) -> u32 {
        match self {
            PolicyState::Bald { posterior, table } => table.select(posterior.weights()),
            PolicyState::Staircase(s) => s.current_level(),
            PolicyState::Random { rng, n_levels, .. } => random_next(rng, *n_levels),
        }
    }

    pub fn observe(&mut self, level: u32, choice: Choice) -> Result<()> {
        match self {
            PolicyState::Bald { posterior, .. } | PolicyState::Random { posterior, .. } => {
                posterior.apply(f64::from(level), choice)
            }
            PolicyState::Staircase(s) => {
                if s.current_level() != level {
                    return Err(Error::State(format!(
                        "staircase is at level {}, response was for level {level}",
                        s.current_level()
                    )));
                }
                s.observe(choice);
                Ok(())
            }
        }
    }

    pub fn posterior(&self) -> Option<&ParticlePosterior> {
        match self {
            PolicyState::Bald { posterior, .. } | PolicyState::Random { posterior, .. } => {
                Some(posterior)
            }
            PolicyState::Staircase(_) => None,
        }
    }

    /// Current point estimate. Posterior-based policies report the prior
    /// mean before any data; the staircase needs at least one trial.
    pub fn estimate(&self) -> Result<PolicyEstimate> {
        match self {
            PolicyState::Bald { posterior, .. } | PolicyState::Random { posterior, .. } => {
                Ok(PolicyEstimate {
                    pse: posterior.mean(),
                    uncertainty: posterior.sd(),
                    method: EstimateMethod::PosteriorMean,
                })
            }
            PolicyState::Staircase(s) => {
                let e = s.estimate()?;
                Ok(PolicyEstimate {
                    pse: e.pse,
                    uncertainty: e.spread,
                    method: if e.from_reversals {
                        EstimateMethod::StaircaseReversals
                    } else {
                        EstimateMethod::StaircaseLastHalf
                    },
                })
            }
        }
    }
}
