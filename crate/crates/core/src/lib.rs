//! Adaptive paired-comparison engine for subjective quality measurement.
//!
//! A rater compares a *standard* (the variant under test) against a
//! *reference* drawn from an ordered quality scale. The engine keeps a
//! particle posterior over the point of subjective equality and chooses the
//! next reference level by Bayesian active learning, with staircase and
//! random baselines for comparison.

pub mod analysis;
pub mod error;
pub mod eventlog;
pub mod manifest;
pub mod policy;
pub mod posterior;
pub mod psychometric;
pub mod scale;
pub mod session;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use policy::{PolicyKind, PolicyState};
pub use posterior::{LikelihoodModel, ParticleInit, ParticlePosterior};
pub use psychometric::{Choice, FourParamLogistic, PsychometricModel};
pub use session::{QualityEstimate, SessionConfig, SessionState, TrialPlan, TrialRecord};
