//! Browser bindings for the paired-comparison engine.

use apc_core::policy::AcquisitionTable;
use apc_core::sim::{run_mse_experiment, SimConfig, TrueQ};
use apc_core::{Choice, LikelihoodModel, ParticlePosterior, PsychometricModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: apc_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Probability of preferring the reference at levels `1..=n_levels`.
#[wasm_bindgen]
pub fn psychometric_curve(q: f64, slope: f64, lapse: f64, n_levels: u32) -> Result<Vec<f64>, JsError> {
    let model = PsychometricModel::new(q, slope, lapse).map_err(js_err)?;
    Ok((1..=n_levels).map(|l| model.prefer_reference_prob(f64::from(l))).collect())
}

/// One observer probed by BALD, trial by trial.
#[wasm_bindgen]
pub struct BaldStepper {
    posterior: ParticlePosterior,
    table: AcquisitionTable,
    observer: PsychometricModel,
    rng: ChaCha8Rng,
    n_levels: u32,
    history: Vec<(u32, bool)>,
}

#[wasm_bindgen]
impl BaldStepper {
    #[wasm_bindgen(constructor)]
    pub fn new(true_q: f64, slope: f64, lapse: f64, seed: u64) -> Result<BaldStepper, JsError> {
        let n_levels = 50;
        let model = LikelihoodModel::new(slope, lapse).map_err(js_err)?;
        let posterior = ParticlePosterior::stratified(1.0, f64::from(n_levels), 225, model).map_err(js_err)?;
        let table = AcquisitionTable::new(&posterior, n_levels);
        Ok(BaldStepper {
            posterior,
            table,
            observer: PsychometricModel::new(true_q, slope, lapse).map_err(js_err)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            n_levels,
            history: Vec::new(),
        })
    }

    /// Level BALD would show next.
    pub fn next_level(&self) -> u32 {
        self.table.select(self.posterior.weights())
    }

    /// Record an answer at the next level. Returns the level used.
    pub fn answer(&mut self, prefers_reference: bool) -> Result<u32, JsError> {
        let level = self.next_level();
        self.posterior
            .apply(f64::from(level), Choice::from_prefers_reference(prefers_reference))
            .map_err(js_err)?;
        self.history.push((level, prefers_reference));
        Ok(level)
    }

    /// Let the simulated observer answer. Returns the level used.
    pub fn step(&mut self) -> Result<u32, JsError> {
        let level = self.next_level();
        let choice = self.observer.simulate_response(f64::from(level), &mut self.rng);
        self.answer(choice.prefers_reference())
    }

    /// Acquisition score at every level.
    pub fn acquisition(&self) -> Vec<f64> {
        self.table.scores(self.posterior.weights())
    }

    /// Posterior mass summed into one bin per level.
    pub fn posterior_histogram(&self) -> Vec<f64> {
        let mut bins = vec![0.0; self.n_levels as usize];
        for (q, w) in self.posterior.particles().iter().zip(self.posterior.weights()) {
            let i = (q.round() as usize).clamp(1, self.n_levels as usize) - 1;
            bins[i] += w;
        }
        bins
    }

    pub fn mean(&self) -> f64 {
        self.posterior.mean()
    }

    pub fn sd(&self) -> f64 {
        self.posterior.sd()
    }

    pub fn trials(&self) -> usize {
        self.history.len()
    }

    /// JSON array of `[level, prefers_reference]` pairs.
    pub fn history_json(&self) -> String {
        json!(self.history).to_string()
    }
}

/// MSE-versus-trials curves for all three policies as JSON
/// `{policy: [mse at trial 1, 2, ...]}`.
#[wasm_bindgen]
pub fn simulate_mse(n_observers: usize, trials: usize, seed: u64, fixed_q: Option<f64>) -> Result<String, JsError> {
    let cfg = SimConfig {
        n_observers,
        trials_max: trials,
        seed,
        true_q: fixed_q.map_or(TrueQ::Uniform { lo: 5.0, hi: 45.0 }, |q| TrueQ::Fixed { q }),
        ..SimConfig::default()
    };
    let curves = run_mse_experiment(&cfg).map_err(js_err)?;
    let mut out = serde_json::Map::new();
    for c in curves {
        out.insert(c.policy.as_str().into(), json!(c.points.iter().map(|p| p.mse).collect::<Vec<_>>()));
    }
    Ok(serde_json::Value::Object(out).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepper_concentrates_near_truth() {
        let mut s = BaldStepper::new(30.0, 2.5, 0.02, 3).unwrap();
        assert_eq!(s.next_level(), 25);
        for _ in 0..40 {
            s.step().unwrap();
        }
        assert_eq!(s.trials(), 40);
        assert!((s.mean() - 30.0).abs() < 4.0, "{}", s.mean());
        let total: f64 = s.posterior_histogram().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(s.acquisition().len(), 50);
    }

    #[test]
    fn curve_and_simulation() {
        let c = psychometric_curve(25.0, 2.5, 0.02, 50).unwrap();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        let v: serde_json::Value = serde_json::from_str(&simulate_mse(20, 10, 1, None).unwrap()).unwrap();
        assert_eq!(v["bald"].as_array().unwrap().len(), 10);
        assert_eq!(v.as_object().unwrap().len(), 3);
    }
}
