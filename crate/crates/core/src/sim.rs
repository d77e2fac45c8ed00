//! Monte-Carlo comparison of selection policies on simulated observers.
//!
//! Each observer gets a true midpoint and runs a single-variant session under
//! every policy. The squared error of the running estimate is averaged over
//! observers at each trial count.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{AcquisitionTable, PolicyKind, PolicyState, StaircaseState};
use crate::posterior::{LikelihoodModel, ParticlePosterior, DEFAULT_PARTICLES};
use crate::psychometric::PsychometricModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrueQ {
    Fixed { q: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policies: Vec<PolicyKind>,
    pub n_observers: usize,
    pub trials_max: usize,
    pub true_q: TrueQ,
    pub slope: f64,
    pub lapse: f64,
    pub seed: u64,
    pub n_levels: u32,
    pub n_particles: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policies: PolicyKind::ALL.to_vec(),
            n_observers: 500,
            trials_max: 100,
            true_q: TrueQ::Uniform { lo: 5.0, hi: 45.0 },
            slope: 2.5,
            lapse: 0.02,
            seed: 0,
            n_levels: 50,
            n_particles: DEFAULT_PARTICLES,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.policies.is_empty() {
            return fail("at least one policy is required");
        }
        if self.n_observers == 0 {
            return fail("n_observers must be at least 1");
        }
        if self.trials_max == 0 {
            return fail("trials_max must be at least 1");
        }
        if self.n_levels < 2 {
            return fail("n_levels must be at least 2");
        }
        match self.true_q {
            TrueQ::Fixed { q } if !q.is_finite() => return fail("true q must be finite"),
            TrueQ::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                return fail("true q range must satisfy lo <= hi")
            }
            _ => {}
        }
        PsychometricModel::new(0.0, self.slope, self.lapse)?;
        if self.lapse >= 0.5 {
            return fail("lapse must be below 0.5");
        }
        Ok(())
    }

    /// Stream for one observer; `tag` separates independent uses.
    fn stream(&self, observer: usize, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((observer as u64) << 8) | tag);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub trial: usize,
    pub mse: f64,
    /// Mean posterior variance across observers, for posterior-based policies.
    pub mean_posterior_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseCurve {
    pub policy: PolicyKind,
    /// MSE of the estimate before any trial; absent for the staircase.
    pub initial_mse: Option<f64>,
    pub points: Vec<CurvePoint>,
    pub n_observers: usize,
    pub seed: u64,
}

impl MseCurve {
    /// MSE after `trial` trials (1-based).
    pub fn mse_at(&self, trial: usize) -> Option<f64> {
        self.points.get(trial.checked_sub(1)?).map(|p| p.mse)
    }
}

struct Trace {
    initial_sq: Option<f64>,
    sq_err: Vec<f64>,
    variance: Option<Vec<f64>>,
}

struct Shared {
    model: LikelihoodModel,
    posterior: ParticlePosterior,
    table: Arc<AcquisitionTable>,
}

fn run_observer(cfg: &SimConfig, shared: &Shared, observer: usize) -> Result<Vec<Trace>> {
    let q = match cfg.true_q {
        TrueQ::Fixed { q } => q,
        TrueQ::Uniform { lo, hi } if lo == hi => lo,
        TrueQ::Uniform { lo, hi } => cfg.stream(observer, 0).random_range(lo..hi),
    };
    let truth = PsychometricModel::new(q, shared.model.slope, shared.model.lapse)?;
    cfg.policies
        .iter()
        .map(|&kind| {
            let tag = 1 + PolicyKind::ALL.iter().position(|k| *k == kind).unwrap() as u64;
            let mut responses = cfg.stream(observer, tag);
            let mut state = match kind {
                PolicyKind::Bald => PolicyState::Bald {
                    posterior: shared.posterior.clone(),
                    table: Arc::clone(&shared.table),
                },
                PolicyKind::Staircase => {
                    PolicyState::Staircase(StaircaseState::from_top(cfg.n_levels)?)
                }
                PolicyKind::Random => PolicyState::Random {
                    posterior: shared.posterior.clone(),
                    rng: cfg.stream(observer, 8 + tag),
                    n_levels: cfg.n_levels,
                },
            };
            let initial_sq = state.posterior().map(|p| (p.mean() - q).powi(2));
            let mut sq_err = Vec::with_capacity(cfg.trials_max);
            let mut variance = state.posterior().map(|_| Vec::with_capacity(cfg.trials_max));
            for _ in 0..cfg.trials_max {
                let level = state.next_level();
                let choice = truth.simulate_response(f64::from(level), &mut responses);
                state.observe(level, choice)?;
                let est = state.estimate()?;
                sq_err.push((est.pse - q).powi(2));
                if let (Some(v), Some(p)) = (variance.as_mut(), state.posterior()) {
                    v.push(p.variance());
                }
            }
            Ok(Trace {
                initial_sq,
                sq_err,
                variance,
            })
        })
        .collect()
}

/// Runs every observer under every configured policy. Observers may run in
/// parallel; sums are taken in observer order so results never depend on it.
pub fn run_mse_experiment(cfg: &SimConfig) -> Result<Vec<MseCurve>> {
    cfg.validate()?;
    let model = LikelihoodModel::new(cfg.slope, cfg.lapse)?;
    let posterior = ParticlePosterior::stratified(
        1.0,
        f64::from(cfg.n_levels),
        cfg.n_particles,
        model,
    )?;
    let shared = Shared {
        model,
        table: Arc::new(AcquisitionTable::new(&posterior, cfg.n_levels)),
        posterior,
    };

    #[cfg(feature = "parallel")]
    let traces: Vec<Vec<Trace>> = {
        use rayon::prelude::*;
        (0..cfg.n_observers)
            .into_par_iter()
            .map(|o| run_observer(cfg, &shared, o))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let traces: Vec<Vec<Trace>> = (0..cfg.n_observers)
        .map(|o| run_observer(cfg, &shared, o))
        .collect::<Result<_>>()?;

    let n = cfg.n_observers as f64;
    Ok(cfg
        .policies
        .iter()
        .enumerate()
        .map(|(pi, &policy)| {
            let mut sq = vec![0.0; cfg.trials_max];
            let mut var = vec![0.0; cfg.trials_max];
            let mut initial = 0.0;
            let mut has_posterior = true;
            for t in &traces {
                let trace = &t[pi];
                for (acc, v) in sq.iter_mut().zip(&trace.sq_err) {
                    *acc += v;
                }
                match &trace.variance {
                    Some(vs) => var.iter_mut().zip(vs).for_each(|(acc, v)| *acc += v),
                    None => has_posterior = false,
                }
                initial += trace.initial_sq.unwrap_or(f64::NAN);
            }
            MseCurve {
                policy,
                initial_mse: has_posterior.then_some(initial / n),
                points: (0..cfg.trials_max)
                    .map(|i| CurvePoint {
                        trial: i + 1,
                        mse: sq[i] / n,
                        mean_posterior_variance: has_posterior.then_some(var[i] / n),
                    })
                    .collect(),
                n_observers: cfg.n_observers,
                seed: cfg.seed,
            }
        })
        .collect())
}

/// One row of the exported curve file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub policy: PolicyKind,
    pub trial: usize,
    pub mse: f64,
    pub n_observers: usize,
    pub seed: u64,
}

/// Rows sorted by policy name, then trial.
pub fn curve_rows(curves: &[MseCurve]) -> Vec<CurveRow> {
    let mut rows: Vec<CurveRow> = curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(|p| CurveRow {
                policy: c.policy,
                trial: p.trial,
                mse: p.mse,
                n_observers: c.n_observers,
                seed: c.seed,
            })
        })
        .collect();
    rows.sort_by(|a, b| (a.policy.as_str(), a.trial).cmp(&(b.policy.as_str(), b.trial)));
    rows
}

pub fn write_curves_csv<W: Write>(curves: &[MseCurve], writer: W) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::Config("no curves to export".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    for row in curve_rows(curves) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_curves(curves: &[MseCurve], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    write_curves_csv(curves, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_curves_csv<R: Read>(reader: R) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?)
}
