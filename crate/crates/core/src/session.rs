//! Adaptive paired-comparison session.
//!
//! The (variant, clip, presentation order) schedule is drawn from the seed
//! when the session is created; reference levels are chosen lazily by each
//! variant's policy as trials are requested. Given the config and the
//! ordered rater answers, every plan and estimate is reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{EstimateMethod, PolicyKind, PolicyState, StaircaseState, DEFAULT_LEVELS};
use crate::posterior::{LikelihoodModel, ParticleInit, ParticlePosterior, DEFAULT_PARTICLES};
use crate::psychometric::{Choice, DEFAULT_LAPSE, DEFAULT_SLOPE};

pub const DEFAULT_TRIALS_PER_VARIANT: usize = 30;

// Stream offsets for per-variant random streams derived from the seed.
const RANDOM_POLICY_STREAM: u64 = 1;
const PARTICLE_INIT_STREAM: u64 = 1 << 32;

fn default_trials() -> usize {
    DEFAULT_TRIALS_PER_VARIANT
}
fn default_levels() -> u32 {
    DEFAULT_LEVELS
}
fn default_policy() -> PolicyKind {
    PolicyKind::Bald
}
fn default_slope() -> f64 {
    DEFAULT_SLOPE
}
fn default_lapse() -> f64 {
    DEFAULT_LAPSE
}
fn default_particles() -> usize {
    DEFAULT_PARTICLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub variants: Vec<String>,
    pub clips: Vec<String>,
    #[serde(default = "default_trials")]
    pub trials_per_variant: usize,
    #[serde(default = "default_levels")]
    pub scale_levels: u32,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default = "default_lapse")]
    pub lapse: f64,
    pub seed: u64,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default)]
    pub particle_init: ParticleInit,
}

impl SessionConfig {
    pub fn new(variants: Vec<String>, clips: Vec<String>, policy: PolicyKind, seed: u64) -> Self {
        Self {
            trials_per_variant: DEFAULT_TRIALS_PER_VARIANT.min(clips.len()),
            variants,
            clips,
            scale_levels: DEFAULT_LEVELS,
            policy,
            slope: DEFAULT_SLOPE,
            lapse: DEFAULT_LAPSE,
            seed,
            n_particles: DEFAULT_PARTICLES,
            particle_init: ParticleInit::StratifiedGrid,
        }
    }

    /// All problems with the config, keyed by field name.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.variants.is_empty() {
            out.push(("variants", "at least one variant is required".to_string()));
        }
        if let Some(dup) = first_duplicate(&self.variants) {
            out.push(("variants", format!("duplicate variant {dup:?}")));
        }
        if self.clips.is_empty() {
            out.push(("clips", "at least one clip is required".to_string()));
        }
        if let Some(dup) = first_duplicate(&self.clips) {
            out.push(("clips", format!("duplicate clip {dup:?}")));
        }
        if self.trials_per_variant == 0 {
            out.push(("trials_per_variant", "must be at least 1".to_string()));
        }
        if self.trials_per_variant > self.clips.len() {
            out.push((
                "trials_per_variant",
                format!(
                    "{} trials per variant but only {} clips",
                    self.trials_per_variant,
                    self.clips.len()
                ),
            ));
        }
        if self.scale_levels < 2 {
            out.push(("scale_levels", "need at least 2 levels".to_string()));
        }
        if !(self.slope.is_finite() && self.slope > 0.0) {
            out.push(("slope", format!("must be > 0, got {}", self.slope)));
        }
        if !(0.0..0.5).contains(&self.lapse) {
            out.push(("lapse", format!("must lie in [0, 0.5), got {}", self.lapse)));
        }
        if self.n_particles < 2 {
            out.push(("n_particles", "need at least 2 particles".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((field, msg)) => Err(Error::Config(format!("{field}: {msg}"))),
        }
    }

    pub fn total_trials(&self) -> usize {
        self.variants.len() * self.trials_per_variant
    }

    pub fn likelihood(&self) -> Result<LikelihoodModel> {
        LikelihoodModel::new(self.slope, self.lapse)
    }

    /// Fresh policy state for the variant at `variant_index`.
    pub fn initial_policy(&self, variant_index: usize) -> Result<PolicyState> {
        let model = self.likelihood()?;
        let lo = 1.0;
        let hi = f64::from(self.scale_levels);
        let posterior = || {
            let mut rng = self.stream(PARTICLE_INIT_STREAM + variant_index as u64);
            ParticlePosterior::init(lo, hi, self.n_particles, self.particle_init, model, &mut rng)
        };
        Ok(match self.policy {
            PolicyKind::Bald => PolicyState::bald(posterior()?, self.scale_levels),
            PolicyKind::Staircase => PolicyState::Staircase(StaircaseState::from_top(self.scale_levels)?),
            PolicyKind::Random => PolicyState::Random {
                posterior: posterior()?,
                rng: self.stream(RANDOM_POLICY_STREAM + variant_index as u64),
                n_levels: self.scale_levels,
            },
        })
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn first_duplicate(items: &[String]) -> Option<&str> {
    let mut seen = std::collections::HashSet::new();
    items.iter().find(|s| !seen.insert(s.as_str())).map(String::as_str)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresentationOrder {
    ReferenceFirst,
    StandardFirst,
}

/// What the rater reports: which interval looked better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterAnswer {
    First,
    Second,
}

impl std::str::FromStr for RaterAnswer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(RaterAnswer::First),
            "second" => Ok(RaterAnswer::Second),
            other => Err(Error::Parse(format!(
                "answer must be \"first\" or \"second\", got {other:?}"
            ))),
        }
    }
}

pub fn resolve_choice(order: PresentationOrder, answer: RaterAnswer) -> Choice {
    let reference_chosen = matches!(
        (order, answer),
        (PresentationOrder::ReferenceFirst, RaterAnswer::First)
            | (PresentationOrder::StandardFirst, RaterAnswer::Second)
    );
    Choice::from_prefers_reference(reference_chosen)
}

/// Inverse of [`resolve_choice`].
pub fn answer_for(order: PresentationOrder, choice: Choice) -> RaterAnswer {
    match (order, choice) {
        (PresentationOrder::ReferenceFirst, Choice::PreferReference)
        | (PresentationOrder::StandardFirst, Choice::PreferStandard) => RaterAnswer::First,
        _ => RaterAnswer::Second,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ScheduledTrial {
    variant_index: usize,
    clip: String,
    order: PresentationOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub trial_index: usize,
    pub variant: String,
    pub clip: String,
    pub reference_level: u32,
    pub order: PresentationOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    #[serde(flatten)]
    pub plan: TrialPlan,
    pub answer: RaterAnswer,
    pub choice: Choice,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    pub variant: String,
    pub pse: Option<f64>,
    pub uncertainty: Option<f64>,
    pub n_trials: usize,
    pub method: Option<EstimateMethod>,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    config: SessionConfig,
    schedule: Vec<ScheduledTrial>,
    policies: Vec<PolicyState>,
    log: Vec<TrialRecord>,
    pending: Option<TrialPlan>,
}

pub fn create_session(config: SessionConfig) -> Result<SessionState> {
    SessionState::new(config)
}

impl SessionState {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pairs = Vec::with_capacity(config.total_trials());
        for variant_index in 0..config.variants.len() {
            let mut clips = config.clips.clone();
            clips.shuffle(&mut rng);
            clips.truncate(config.trials_per_variant);
            pairs.extend(clips.into_iter().map(|clip| (variant_index, clip)));
        }
        pairs.shuffle(&mut rng);
        let schedule = pairs
            .into_iter()
            .map(|(variant_index, clip)| ScheduledTrial {
                variant_index,
                clip,
                order: if rng.random_bool(0.5) {
                    PresentationOrder::ReferenceFirst
                } else {
                    PresentationOrder::StandardFirst
                },
            })
            .collect();
        let policies = (0..config.variants.len())
            .map(|i| config.initial_policy(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            schedule,
            policies,
            log: Vec::new(),
            pending: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn cursor(&self) -> usize {
        self.log.len()
    }

    pub fn total_trials(&self) -> usize {
        self.schedule.len()
    }

    pub fn status(&self) -> SessionStatus {
        if self.cursor() == self.schedule.len() {
            SessionStatus::Complete
        } else {
            SessionStatus::Active
        }
    }

    pub fn log(&self) -> &[TrialRecord] {
        &self.log
    }

    /// The planned but unanswered trial, if any.
    pub fn pending(&self) -> Option<&TrialPlan> {
        self.pending.as_ref()
    }

    pub fn policy(&self, variant: &str) -> Option<&PolicyState> {
        self.variant_index(variant).map(|i| &self.policies[i])
    }

    /// Schedule as (variant, clip, order) triples, in trial order.
    pub fn schedule(&self) -> Vec<(&str, &str, PresentationOrder)> {
        self.schedule
            .iter()
            .map(|s| (self.config.variants[s.variant_index].as_str(), s.clip.as_str(), s.order))
            .collect()
    }

    fn variant_index(&self, variant: &str) -> Option<usize> {
        self.config.variants.iter().position(|v| v == variant)
    }

    /// Plans the trial at the cursor. Repeated calls return the same plan
    /// until a response is recorded.
    pub fn next_trial(&mut self) -> Result<TrialPlan> {
        if let Some(plan) = &self.pending {
            return Ok(plan.clone());
        }
        let index = self.cursor();
        let slot = self.schedule.get(index).ok_or(Error::SessionComplete)?;
        let level = self.policies[slot.variant_index].next_level();
        let plan = TrialPlan {
            trial_index: index,
            variant: self.config.variants[slot.variant_index].clone(),
            clip: slot.clip.clone(),
            reference_level: level,
            order: slot.order,
        };
        self.pending = Some(plan.clone());
        Ok(plan)
    }

    /// Records the rater's answer for the outstanding trial and advances.
    ///
    /// If the trial at the cursor has not been planned yet it is planned first.
    pub fn record_response(
        &mut self,
        trial_index: usize,
        answer: RaterAnswer,
        timestamp_ms: u64,
    ) -> Result<&TrialRecord> {
        if self.status() == SessionStatus::Complete {
            return Err(Error::State("session is already complete".into()));
        }
        if trial_index != self.cursor() {
            return Err(Error::Sequencing {
                expected: self.cursor(),
                got: trial_index,
            });
        }
        let plan = self.next_trial()?;
        let choice = resolve_choice(plan.order, answer);
        let variant_index = self.schedule[trial_index].variant_index;
        self.policies[variant_index].observe(plan.reference_level, choice)?;
        self.pending = None;
        self.log.push(TrialRecord {
            plan,
            answer,
            choice,
            timestamp_ms,
        });
        Ok(self.log.last().unwrap())
    }

    pub fn n_trials(&self, variant: &str) -> usize {
        self.log.iter().filter(|r| r.plan.variant == variant).count()
    }

    pub fn estimate(&self, variant: &str) -> Result<QualityEstimate> {
        let index = self
            .variant_index(variant)
            .ok_or_else(|| Error::NoEstimate(format!("unknown variant {variant:?}")))?;
        let e = self.policies[index].estimate()?;
        Ok(QualityEstimate {
            variant: variant.to_string(),
            pse: Some(e.pse),
            uncertainty: Some(e.uncertainty),
            n_trials: self.n_trials(variant),
            method: Some(e.method),
        })
    }

    /// Estimates for every variant; variants without one carry `None`.
    pub fn estimates(&self) -> Vec<QualityEstimate> {
        self.config
            .variants
            .iter()
            .map(|v| {
                self.estimate(v).unwrap_or_else(|_| QualityEstimate {
                    variant: v.clone(),
                    pse: None,
                    uncertainty: None,
                    n_trials: self.n_trials(v),
                    method: None,
                })
            })
            .collect()
    }
}

pub fn next_trial(state: &mut SessionState) -> Result<TrialPlan> {
    state.next_trial()
}

pub fn record_response(
    state: &mut SessionState,
    trial_index: usize,
    answer: RaterAnswer,
    timestamp_ms: u64,
) -> Result<()> {
    state.record_response(trial_index, answer, timestamp_ms).map(|_| ())
}

pub fn estimate(state: &SessionState, variant: &str) -> Result<QualityEstimate> {
    state.estimate(variant)
}

/// Rebuilds a session from its ordered records, checking every plan against
/// the one the live engine would have produced.
pub fn replay(records: &[TrialRecord], config: SessionConfig) -> Result<SessionState> {
    let mut state = SessionState::new(config)?;
    for (i, record) in records.iter().enumerate() {
        let diverged = |reason: String| Error::Integrity {
            trial_index: i,
            reason,
        };
        if record.plan.trial_index != i {
            return Err(diverged(format!(
                "record carries trial index {}",
                record.plan.trial_index
            )));
        }
        let plan = state.next_trial().map_err(|e| diverged(e.to_string()))?;
        if plan != record.plan {
            return Err(diverged(describe_mismatch(&plan, &record.plan)));
        }
        if resolve_choice(plan.order, record.answer) != record.choice {
            return Err(diverged("choice does not match answer and order".into()));
        }
        state.record_response(i, record.answer, record.timestamp_ms)?;
    }
    Ok(state)
}

pub(crate) fn describe_mismatch(expected: &TrialPlan, found: &TrialPlan) -> String {
    if expected.reference_level != found.reference_level {
        format!(
            "reference level {} but engine selects {}",
            found.reference_level, expected.reference_level
        )
    } else if expected.variant != found.variant || expected.clip != found.clip {
        format!(
            "({}, {}) but schedule has ({}, {})",
            found.variant, found.clip, expected.variant, expected.clip
        )
    } else {
        format!("order {:?} but schedule has {:?}", found.order, expected.order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    fn config(policy: PolicyKind, seed: u64) -> SessionConfig {
        let clips = (0..30).map(|i| format!("clip{i:02}")).collect();
        SessionConfig::new(vec!["180p".into(), "360p".into()], clips, policy, seed)
    }

    fn run_answers(state: &mut SessionState, answers: impl IntoIterator<Item = RaterAnswer>) {
        for a in answers {
            let i = state.next_trial().unwrap().trial_index;
            state.record_response(i, a, 0).unwrap();
        }
    }

    #[test]
    fn schedule_is_deterministic_and_unique() {
        let a = create_session(config(PolicyKind::Bald, 9)).unwrap();
        let b = create_session(config(PolicyKind::Bald, 9)).unwrap();
        assert_eq!(a.schedule(), b.schedule());
        assert_eq!(a.total_trials(), 60);
        let pairs: HashSet<_> = a.schedule().iter().map(|(v, c, _)| (*v, *c)).collect();
        assert_eq!(pairs.len(), 60);
        let c = create_session(config(PolicyKind::Bald, 10)).unwrap();
        assert_ne!(a.schedule(), c.schedule());
    }

    #[test]
    fn subset_of_clips_when_fewer_trials() {
        let mut cfg = config(PolicyKind::Random, 2);
        cfg.trials_per_variant = 12;
        let s = create_session(cfg).unwrap();
        assert_eq!(s.total_trials(), 24);
        for v in ["180p", "360p"] {
            let clips: HashSet<_> = s.schedule().iter().filter(|t| t.0 == v).map(|t| t.1).collect();
            assert_eq!(clips.len(), 12);
        }
    }

    #[test]
    fn presentation_order_is_balanced() {
        let mut reference_first = 0usize;
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let mut cfg = config(PolicyKind::Staircase, seed);
            cfg.trials_per_variant = 1;
            cfg.variants.truncate(1);
            let s = create_session(cfg).unwrap();
            for (_, _, order) in s.schedule() {
                total += 1;
                if order == PresentationOrder::ReferenceFirst {
                    reference_first += 1;
                }
            }
        }
        let rate = reference_first as f64 / total as f64;
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn config_violations_are_rejected() {
        let mut cfg = config(PolicyKind::Bald, 1);
        cfg.trials_per_variant = 31;
        assert!(matches!(create_session(cfg), Err(Error::Config(_))));
        let mut cfg = config(PolicyKind::Bald, 1);
        cfg.variants.push("180p".into());
        assert!(create_session(cfg).is_err());
        let mut cfg = config(PolicyKind::Bald, 1);
        cfg.lapse = 0.5;
        assert!(create_session(cfg).is_err());
    }

    #[test]
    fn first_bald_level_is_central() {
        let mut s = create_session(config(PolicyKind::Bald, 3)).unwrap();
        let plan = s.next_trial().unwrap();
        assert!(plan.reference_level == 25 || plan.reference_level == 26);
    }

    #[test]
    fn staircase_starts_at_top_for_each_variant() {
        let mut s = create_session(config(PolicyKind::Staircase, 3)).unwrap();
        let mut seen = HashSet::new();
        while seen.len() < 2 {
            let plan = s.next_trial().unwrap();
            if seen.insert(plan.variant.clone()) {
                assert_eq!(plan.reference_level, 50);
            }
            s.record_response(plan.trial_index, RaterAnswer::First, 0).unwrap();
        }
    }

    #[test]
    fn next_trial_is_idempotent() {
        let mut s = create_session(config(PolicyKind::Random, 8)).unwrap();
        let a = s.next_trial().unwrap();
        let b = s.next_trial().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn order_resolution() {
        use PresentationOrder::*;
        use RaterAnswer::*;
        assert_eq!(resolve_choice(ReferenceFirst, Second), Choice::PreferStandard);
        assert_eq!(resolve_choice(ReferenceFirst, First), Choice::PreferReference);
        assert_eq!(resolve_choice(StandardFirst, First), Choice::PreferStandard);
        assert_eq!(resolve_choice(StandardFirst, Second), Choice::PreferReference);
        for choice in [Choice::PreferReference, Choice::PreferStandard] {
            let a = answer_for(ReferenceFirst, choice);
            let b = answer_for(StandardFirst, choice);
            assert_ne!(a, b);
            assert_eq!(resolve_choice(ReferenceFirst, a), resolve_choice(StandardFirst, b));
        }
    }

    #[test]
    fn recorded_response_updates_posterior() {
        let mut s = create_session(config(PolicyKind::Bald, 12)).unwrap();
        let plan = s.next_trial().unwrap();
        let before = s.policy(&plan.variant).unwrap().posterior().unwrap().clone();
        let record = s.record_response(0, RaterAnswer::Second, 5).unwrap().clone();
        let expected = before.update(f64::from(plan.reference_level), record.choice).unwrap();
        assert_eq!(s.policy(&plan.variant).unwrap().posterior().unwrap(), &expected);
        assert_eq!(s.cursor(), 1);
    }

    #[test]
    fn sequencing_and_completion() {
        let mut s = create_session(config(PolicyKind::Bald, 1)).unwrap();
        assert!(matches!(
            s.record_response(3, RaterAnswer::First, 0),
            Err(Error::Sequencing { expected: 0, got: 3 })
        ));
        run_answers(&mut s, std::iter::repeat_n(RaterAnswer::First, 60));
        assert_eq!(s.status(), SessionStatus::Complete);
        assert_eq!(s.next_trial(), Err(Error::SessionComplete));
        assert!(matches!(s.record_response(60, RaterAnswer::First, 0), Err(Error::State(_))));
    }

    #[test]
    fn estimates_before_and_after_data() {
        let s = create_session(config(PolicyKind::Bald, 1)).unwrap();
        let e = s.estimate("180p").unwrap();
        assert_abs_diff_eq!(e.pse.unwrap(), 25.5, epsilon = 1e-9);
        assert_eq!(e.n_trials, 0);

        let s = create_session(config(PolicyKind::Staircase, 1)).unwrap();
        assert!(matches!(s.estimate("180p"), Err(Error::NoEstimate(_))));
        assert!(s.estimates().iter().all(|e| e.pse.is_none()));
        assert!(s.estimate("4k").is_err());
    }

    #[test]
    fn replay_reproduces_live_state() {
        let mut live = create_session(config(PolicyKind::Random, 77)).unwrap();
        let answers: Vec<RaterAnswer> = (0..45)
            .map(|i| if i % 3 == 0 { RaterAnswer::Second } else { RaterAnswer::First })
            .collect();
        run_answers(&mut live, answers);
        let replayed = replay(live.log(), live.config().clone()).unwrap();
        assert_eq!(replayed.estimates(), live.estimates());
        assert_eq!(replayed.log(), live.log());

        let fresh = replay(&[], config(PolicyKind::Random, 77)).unwrap();
        assert_eq!(fresh.cursor(), 0);
    }

    #[test]
    fn replay_detects_tampering() {
        let mut live = create_session(config(PolicyKind::Bald, 5)).unwrap();
        run_answers(&mut live, std::iter::repeat_n(RaterAnswer::First, 20));
        let mut log = live.log().to_vec();
        log[7].plan.reference_level = if log[7].plan.reference_level == 1 { 2 } else { 1 };
        match replay(&log, live.config().clone()) {
            Err(Error::Integrity { trial_index, .. }) => assert_eq!(trial_index, 7),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn variants_evolve_independently() {
        let cfg = config(PolicyKind::Bald, 21);
        let mut s = create_session(cfg.clone()).unwrap();
        let answers = (0..60).map(|i| if (i * 7) % 5 < 2 { RaterAnswer::First } else { RaterAnswer::Second });
        run_answers(&mut s, answers);
        for (vi, variant) in cfg.variants.iter().enumerate() {
            let mut isolated = cfg.initial_policy(vi).unwrap();
            for r in s.log().iter().filter(|r| &r.plan.variant == variant) {
                assert_eq!(isolated.next_level(), r.plan.reference_level);
                isolated.observe(r.plan.reference_level, r.choice).unwrap();
            }
            assert_eq!(isolated.posterior(), s.policy(variant).unwrap().posterior());
        }
    }
}
