//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use apc_core::analysis::{
    dsmos_differential, fit_logistic_nls, paired_t_bonferroni, repeated_measures_d, screen_rater,
    Comparison, ProportionData, ProportionPoint, RatingRecord, RatingScale,
};
use apc_core::manifest::StimulusManifest;
use apc_core::policy::{bald_acquisition, AcquisitionTable};
use apc_core::scale::{
    build_initial_scale, fit_pairwise_values, linearity_nmse, resample_linear, simulate_judgments,
    RdPoint,
};
use apc_core::session::{RaterAnswer, SessionConfig, SessionState};
use apc_core::sim::{run_mse_experiment, write_curves_csv, SimConfig};
use apc_core::stats::spearman;
use apc_core::{
    Choice, FourParamLogistic, LikelihoodModel, ParticleInit, ParticlePosterior, PolicyKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Logistic written out independently of the library.
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_prob(q: f64, level: f64, slope: f64, lapse: f64) -> f64 {
    lapse + (1.0 - 2.0 * lapse) * logistic((level - q) / slope)
}

fn exact_bayes() -> Outcome {
    let start = Instant::now();
    let (slope, lapse) = (2.5, 0.02);
    let model = LikelihoodModel::new(slope, lapse).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let init = if t % 2 == 0 { ParticleInit::StratifiedGrid } else { ParticleInit::Random };
        let mut post = ParticlePosterior::init(1.0, 50.0, 225, init, model, &mut rng).unwrap();
        let steps = rng.random_range(0..=30);
        let mut obs = Vec::new();
        for _ in 0..steps {
            let level = rng.random_range(1.0..50.0);
            let choice = Choice::from_prefers_reference(rng.random::<bool>());
            post = post.update(level, choice).unwrap();
            obs.push((level, choice));
        }
        let joint: Vec<f64> = post
            .particles()
            .iter()
            .map(|&q| {
                obs.iter().fold(1.0 / 225.0, |acc, &(level, c)| {
                    let p = oracle_prob(q, level, slope, lapse);
                    acc * if c.prefers_reference() { p } else { 1.0 - p }
                })
            })
            .collect();
        let total: f64 = joint.iter().sum();
        for (w, j) in post.weights().iter().zip(&joint) {
            worst = worst.max((w - j / total).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && secs < 10.0,
        format!("1000 trajectories, max |w - exact| = {worst:.2e}, {secs:.2} s"),
    )
}

fn bald_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let levels: Vec<f64> = (1..=50).map(f64::from).collect();
    let mut worst = 0.0f64;
    let mut out_of_range = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=300);
        let slope = rng.random_range(0.5..8.0);
        let lapse = rng.random_range(0.0..0.2);
        let model = LikelihoodModel::new(slope, lapse).unwrap();
        let particles: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..55.0)).collect();
        let sharp = rng.random_range(0.0..8.0);
        let weights: Vec<f64> = (0..n).map(|_| (sharp * rng.random::<f64>()).exp()).collect();
        let post = ParticlePosterior::from_parts(particles, weights, model).unwrap();
        let scores = bald_acquisition(&post, &levels);
        let table = AcquisitionTable::new(&post, 50).scores(post.weights());
        for (li, &level) in levels.iter().enumerate() {
            // Mutual information from the joint over (particle, response).
            let p: Vec<f64> = post.particles().iter().map(|&q| oracle_prob(q, level, slope, lapse)).collect();
            let marg_ref: f64 = post.weights().iter().zip(&p).map(|(w, p)| w * p).sum();
            let mut mi = 0.0;
            for (w, pi) in post.weights().iter().zip(&p) {
                for (py, my) in [(*pi, marg_ref), (1.0 - pi, 1.0 - marg_ref)] {
                    let joint = w * py;
                    if joint > 0.0 {
                        mi += joint * (joint / (w * my)).ln();
                    }
                }
            }
            worst = worst.max((scores[li] - mi).abs()).max((table[li] - mi).abs());
            if !(0.0..=std::f64::consts::LN_2).contains(&scores[li]) {
                out_of_range += 1;
            }
        }
    }
    check(
        worst <= 1e-10 && out_of_range == 0,
        format!("200 posteriors x 50 levels, max |I - brute force| = {worst:.2e}, {out_of_range} outside [0, ln 2]"),
    )
}

fn policy_ordering() -> Outcome {
    let start = Instant::now();
    let cfg = SimConfig { seed: 2021, ..SimConfig::default() };
    let curves = run_mse_experiment(&cfg).map_err(|e| e.to_string())?;
    let at = |k: PolicyKind, t: usize| curves.iter().find(|c| c.policy == k).unwrap().mse_at(t).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for t in [10, 20, 30] {
        let (b, r, s) = (at(PolicyKind::Bald, t), at(PolicyKind::Random, t), at(PolicyKind::Staircase, t));
        ok &= b < r && b < s;
        detail.push(format!("t={t}: bald {b:.2}, random {r:.2}, staircase {s:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("500 observers; {}; {secs:.1} s", detail.join("; ")))
}

fn nls_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let levels: Vec<f64> = (0..15).map(|i| 1.0 + 3.5 * i as f64).collect();
    let mut recovered = 0;
    for _ in 0..100 {
        let truth = FourParamLogistic::new(
            rng.random_range(10.0..40.0),
            rng.random_range(1.5..6.0),
            rng.random_range(0.0..0.15),
            rng.random_range(0.85..1.0),
        )
        .unwrap();
        // Counts large enough that the proportions equal the curve to ~1e-9.
        let n = 2_000_000_000u32;
        let data = ProportionData::new(
            levels
                .iter()
                .map(|&level| ProportionPoint {
                    level,
                    n_shown: n,
                    n_prefer_reference: (truth.eval(level) * n as f64).round() as u32,
                })
                .collect(),
        )
        .unwrap();
        if let Ok(fit) = fit_logistic_nls(&data) {
            if (fit.params.midpoint - truth.midpoint).abs() <= 1e-4 {
                recovered += 1;
            }
        }
    }

    let truth = FourParamLogistic::new(25.0, 3.0, 0.05, 0.95).unwrap();
    let mut errors = Vec::new();
    let mut failures = 0;
    for _ in 0..200 {
        let mut pool: Vec<u32> = (1..=50).collect();
        let mut obs = Vec::new();
        for _ in 0..30 {
            let level = f64::from(pool.swap_remove(rng.random_range(0..pool.len())));
            obs.push((level, Choice::from_prefers_reference(rng.random::<f64>() < truth.eval(level))));
        }
        match fit_logistic_nls(&ProportionData::from_observations(obs)) {
            Ok(fit) => errors.push((fit.params.midpoint - 25.0).abs()),
            Err(_) => {
                failures += 1;
                errors.push(f64::INFINITY);
            }
        }
    }
    errors.sort_by(f64::total_cmp);
    let median = 0.5 * (errors[99] + errors[100]);
    check(
        recovered == 100 && median <= 3.0,
        format!("noise-free {recovered}/100 within 1e-4; APC regime median |PSE error| = {median:.2} ({failures} failed fits counted as infinite)"),
    )
}

fn synthetic_rd(rng: &mut ChaCha8Rng, n_res: usize) -> Vec<RdPoint> {
    let mut rd = Vec::new();
    for r in 0..n_res {
        let lo: f64 = rng.random_range(50.0..400.0);
        let hi: f64 = rng.random_range(3000.0..20000.0);
        let n = rng.random_range(6..30);
        let (a, b, c) = (rng.random_range(0.0..20.0), rng.random_range(2.0..6.0), rng.random_range(0.0..0.15));
        let mut ln_b: Vec<f64> = (0..n).map(|_| rng.random_range(lo.ln()..hi.ln())).collect();
        ln_b.push(lo.ln());
        ln_b.push(hi.ln());
        ln_b.sort_by(|x, y| y.total_cmp(x));
        ln_b.dedup();
        for (i, x) in ln_b.iter().enumerate() {
            rd.push(RdPoint {
                resolution: format!("res{r}"),
                crf: 10 + i as i32,
                avg_bitrate: x.exp(),
                psnr: a + b * x - c * x * x + rng.random_range(-0.3..0.3),
            });
        }
    }
    rd
}

/// Log-bitrate interpolation written independently of the library.
fn oracle_psnr(rd: &[RdPoint], res: &str, bitrate: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = rd
        .iter()
        .filter(|p| p.resolution == res)
        .map(|p| (p.avg_bitrate.ln(), p.psnr))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x = bitrate.ln();
    if x < pts[0].0 || x > pts[pts.len() - 1].0 {
        return None;
    }
    for w in pts.windows(2) {
        if x >= w[0].0 && x <= w[1].0 {
            return Some(w[0].1 + (w[1].1 - w[0].1) * (x - w[0].0) / (w[1].0 - w[0].0));
        }
    }
    None
}

fn hull_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut worst_spacing = 0.0f64;
    for t in 0..200 {
        let n_res = 3 + t % 5;
        let rd = synthetic_rd(&mut rng, n_res);
        let scale = build_initial_scale(&rd, 50).map_err(|e| e.to_string())?;
        let min = rd.iter().map(|p| p.avg_bitrate).fold(f64::INFINITY, f64::min);
        let max = rd.iter().map(|p| p.avg_bitrate).fold(0.0, f64::max);
        for (k, e) in scale.entries.iter().enumerate() {
            let closed = min * (max / min).powf(k as f64 / 49.0);
            worst_spacing = worst_spacing.max((e.target_bitrate_kbps - closed).abs() / closed);
            let chosen = oracle_psnr(&rd, &e.resolution, e.target_bitrate_kbps);
            if chosen.is_none_or(|c| (c - e.psnr_db).abs() > 1e-9) {
                violations += 1;
                continue;
            }
            for r in 0..n_res {
                if let Some(alt) = oracle_psnr(&rd, &format!("res{r}"), e.target_bitrate_kbps) {
                    if alt > e.psnr_db + 1e-9 {
                        violations += 1;
                    }
                }
            }
        }
    }
    check(
        violations == 0 && worst_spacing <= 1e-9,
        format!("200 tables (3-7 resolutions): {violations} dominance violations, max relative spacing error {worst_spacing:.1e}"),
    )
}

fn scale_pipeline() -> Outcome {
    let truth: Vec<f64> = (1..=50).map(|i| (i as f64).sqrt()).collect();
    let rd = synthetic_rd(&mut ChaCha8Rng::seed_from_u64(5), 5);
    let scale = build_initial_scale(&rd, 50).map_err(|e| e.to_string())?;
    let mut rhos = Vec::new();
    let mut improved = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let fit = fit_pairwise_values(&simulate_judgments(&truth, 5000, &mut rng), 50).map_err(|e| e.to_string())?;
        rhos.push(spearman(&fit.curve.values, &truth));
        let before = linearity_nmse(&fit.curve).map_err(|e| e.to_string())?;
        let lin = resample_linear(&scale, &fit.curve, Some(&rd)).map_err(|e| e.to_string())?;
        // True perceptual value at each new position.
        let composite: Vec<f64> = lin.positions.iter().map(|x| x.sqrt()).collect();
        let refit = fit_pairwise_values(&simulate_judgments(&composite, 5000, &mut rng), 50).map_err(|e| e.to_string())?;
        let after = linearity_nmse(&refit.curve).map_err(|e| e.to_string())?;
        if after < before {
            improved += 1;
        }
    }
    rhos.sort_by(f64::total_cmp);
    let median = 0.5 * (rhos[49] + rhos[50]);
    let reached = rhos.iter().filter(|&&r| r >= 0.99).count();
    check(
        median >= 0.99 && improved >= 95,
        format!(
            "median Spearman {median:.4} (min {:.4}, {reached}/100 at or above 0.99); nMSE decreased in {improved}/100 replications",
            rhos[0]
        ),
    )
}

fn analysis_formulas() -> Outcome {
    let d = repeated_measures_d(&[3.0, 4.0, 5.0], &[1.0, 3.0, 2.0]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let family = 3;
    let mut tests = 0;
    let mut false_pos = 0;
    let mut adjusted_ok = true;
    for _ in 0..500 {
        let comparisons: Vec<Comparison> = (0..family)
            .map(|c| {
                let base: Vec<f64> = (0..20).map(|_| rng.random_range(1.0..5.0)).collect();
                let noise = |rng: &mut ChaCha8Rng| rng.random_range(-0.5..0.5);
                Comparison {
                    label: format!("c{c}"),
                    x: base.iter().map(|b| b + noise(&mut rng)).collect(),
                    y: base.iter().map(|b| b + noise(&mut rng)).collect(),
                }
            })
            .collect();
        for r in paired_t_bonferroni(&comparisons, family).map_err(|e| e.to_string())? {
            tests += 1;
            false_pos += r.significant as usize;
            adjusted_ok &= r.p_adjusted == (r.p_raw * family as f64).min(1.0);
        }
    }
    let fpr = false_pos as f64 / tests as f64;
    let dsmos_ok = (1..=5).all(|r| dsmos_differential(r, r) == Ok(5.0));
    let rater = |fives: usize| -> Vec<RatingRecord> {
        (0..100)
            .map(|i| RatingRecord {
                rater_id: "r".into(),
                clip_id: format!("c{i}"),
                variant_id: "v".into(),
                rating: if i < fives { 5 } else { 3 },
                scale: RatingScale::Mos,
            })
            .collect()
    };
    let boundary_ok = screen_rater(&rater(95)).is_included() && !screen_rater(&rater(96)).is_included();
    check(
        d == 2.0 && fpr <= 0.05 && adjusted_ok && dsmos_ok && boundary_ok,
        format!(
            "d = {d}; null FPR {fpr:.3} over {tests} tests (family {family}); dsmos(r,r)=5: {dsmos_ok}; 95/100 kept, 96/100 excluded: {boundary_ok}"
        ),
    )
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(dir: &Path) -> Server {
        let mut child = Command::new(env!("CARGO_BIN_EXE_apc"))
            .args(["serve", "--port", "0", "--data-dir"])
            .arg(dir.join("data"))
            .arg("--manifest")
            .arg(dir.join("demo.json"))
            .args(["--rater-token", "r", "--experimenter-token", "e"])
            .stderr(Stdio::piped())
            .spawn()
            .expect("service starts");
        let mut line = String::new();
        BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .split("http://")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Server { child, addr }
    }

    fn request(&self, method: &str, path: &str, token: &str, body: Option<Value>) -> (u16, String) {
        let mut stream = TcpStream::connect(&self.addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nAuthorization: Bearer {token}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut text = String::new();
        stream.read_to_string(&mut text).unwrap();
        let status = text[9..12].parse().unwrap();
        let body = text.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
        (status, body)
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

fn determinism_and_recovery() -> Outcome {
    let small = SimConfig { n_observers: 60, trials_max: 40, seed: 9, ..SimConfig::default() };
    let csv = |cfg: &SimConfig| {
        let mut buf = Vec::new();
        write_curves_csv(&run_mse_experiment(cfg).unwrap(), &mut buf).unwrap();
        buf
    };
    let csv_identical = csv(&small) == csv(&small);

    let clips: Vec<String> = (0..30).map(|i| format!("clip{i}")).collect();
    let variants = vec!["a".to_string(), "b".to_string()];
    let run_session = || {
        let mut s = SessionState::new(SessionConfig::new(variants.clone(), clips.clone(), PolicyKind::Bald, 31)).unwrap();
        for i in 0..60 {
            s.next_trial().unwrap();
            let answer = if (i * 7) % 3 == 0 { RaterAnswer::First } else { RaterAnswer::Second };
            s.record_response(i, answer, 0).unwrap();
        }
        s.estimates()
            .iter()
            .map(|e| (e.pse.unwrap().to_bits(), e.uncertainty.unwrap().to_bits()))
            .collect::<Vec<_>>()
    };
    let session_identical = run_session() == run_session();

    let dir = tempfile::tempdir().unwrap();
    let manifest = StimulusManifest::synthetic("https://media.example", &clips, &variants, 50);
    std::fs::write(dir.path().join("demo.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let server = Server::start(dir.path());
    let cfg = json!({ "variants": variants, "clips": clips, "policy": "bald", "seed": 5 });
    let (status, body) = server.request("POST", "/v1/sessions", "e", Some(json!({ "config": cfg })));
    if status != 201 {
        server.kill();
        return Err(format!("create returned {status}: {body}"));
    }
    let id = serde_json::from_str::<Value>(&body).unwrap()["session_id"].as_str().unwrap().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..23 {
        let (_, trial) = server.request("GET", &format!("/v1/sessions/{id}/trials/next"), "r", None);
        let index = serde_json::from_str::<Value>(&trial).unwrap()["trial_index"].as_u64().unwrap();
        let choice = if rng.random::<bool>() { "first" } else { "second" };
        server.request("POST", &format!("/v1/sessions/{id}/trials/{index}/response"), "r", Some(json!({ "choice": choice })));
    }
    let snapshot = |s: &Server| {
        vec![
            s.request("GET", &format!("/v1/sessions/{id}/estimates"), "e", None),
            s.request("GET", &format!("/v1/sessions/{id}"), "r", None),
            s.request("GET", &format!("/v1/sessions/{id}/trials/next"), "r", None),
            s.request("GET", &format!("/v1/sessions/{id}/estimates"), "r", None),
            s.request("POST", &format!("/v1/sessions/{id}/trials/22/response"), "r", Some(json!({ "choice": "first" }))),
        ]
    };
    let before = snapshot(&server);
    server.kill();
    let server = Server::start(dir.path());
    let after = snapshot(&server);
    server.kill();
    let endpoints_identical = before == after;
    check(
        csv_identical && session_identical && endpoints_identical,
        format!(
            "simulate CSV byte-identical: {csv_identical}; session estimates bit-identical: {session_identical}; \
             {} endpoint responses identical after kill -9 and restart: {endpoints_identical}",
            before.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("exact-Bayes oracle", exact_bayes),
        ("BALD oracle", bald_oracle),
        ("policy MSE ordering", policy_ordering),
        ("NLS recovery", nls_recovery),
        ("scale pipeline direction", scale_pipeline),
        ("hull dominance", hull_dominance),
        ("analysis formulas", analysis_formulas),
        ("determinism and recovery", determinism_and_recovery),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
