#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use apc_cli::service::{router, AppState, ServiceConfig};
use apc_core::eventlog::{read_log, SessionEvent};
use apc_core::manifest::StimulusManifest;
use apc_core::PsychometricModel;
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const RATER: &str = "rater-secret";
pub const EXPERIMENTER: &str = "experimenter-secret";

pub fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn manifest() -> StimulusManifest {
    StimulusManifest::synthetic("https://media.example", &ids("clip", 30), &ids("var", 2), 50)
}

pub fn open_app(dir: &Path) -> Router {
    let state = AppState::open(ServiceConfig {
        data_dir: dir.to_path_buf(),
        manifest: manifest(),
        manifest_ref: "demo".into(),
        rater_token: Some(RATER.into()),
        experimenter_token: Some(EXPERIMENTER.into()),
    })
    .expect("service opens");
    router(state)
}

pub fn config(policy: &str, seed: u64) -> Value {
    json!({
        "variants": ids("var", 2),
        "clips": ids("clip", 30),
        "policy": policy,
        "seed": seed,
    })
}

pub async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn create(app: &Router, cfg: Value) -> String {
    let (status, body) = call(app, Method::POST, "/v1/sessions", Some(EXPERIMENTER), Some(json!({ "config": cfg }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

pub async fn next(app: &Router, id: &str) -> (StatusCode, Value) {
    call(app, Method::GET, &format!("/v1/sessions/{id}/trials/next"), Some(RATER), None).await
}

pub async fn respond(app: &Router, id: &str, index: u64, choice: &str) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        &format!("/v1/sessions/{id}/trials/{index}/response"),
        Some(RATER),
        Some(json!({ "choice": choice })),
    )
    .await
}

pub async fn estimates(app: &Router, id: &str) -> (StatusCode, Value) {
    call(app, Method::GET, &format!("/v1/sessions/{id}/estimates"), Some(EXPERIMENTER), None).await
}

pub fn events(dir: &Path, id: &str) -> Vec<SessionEvent> {
    let f = std::fs::File::open(dir.join(format!("{id}.jsonl"))).unwrap();
    read_log(std::io::BufReader::new(f)).unwrap()
}

/// Rater that knows the manifest and answers as a simulated observer.
pub struct ScriptedRater {
    keys: HashMap<String, String>,
    model: PsychometricModel,
    rng: ChaCha8Rng,
}

impl ScriptedRater {
    pub fn new(q: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut keys = HashMap::new();
        for entries in manifest().clips.values() {
            for (k, url) in entries {
                keys.insert(url.clone(), k.clone());
            }
        }
        Self {
            keys,
            model: PsychometricModel::new(q, 2.5, 0.02).unwrap(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// "first" or "second" for a trial payload.
    pub fn answer(&mut self, trial: &Value) -> &'static str {
        let key = |slot: &str| self.keys[trial[slot].as_str().unwrap()].clone();
        let (first, second) = (key("first"), key("second"));
        let (reference, reference_first) = match (first.strip_prefix("level:"), second.strip_prefix("level:")) {
            (Some(l), None) => (l.parse::<f64>().unwrap(), true),
            (None, Some(l)) => (l.parse::<f64>().unwrap(), false),
            _ => panic!("trial must pair one level with one variant"),
        };
        let prefers_reference = self.model.simulate_response(reference, &mut self.rng).prefers_reference();
        if prefers_reference == reference_first {
            "first"
        } else {
            "second"
        }
    }
}

pub async fn run_trials(app: &Router, id: &str, rater: &mut ScriptedRater, n: usize) {
    for _ in 0..n {
        let (status, trial) = next(app, id).await;
        assert_eq!(status, StatusCode::OK, "{trial}");
        let choice = rater.answer(&trial);
        let (status, body) = respond(app, id, trial["trial_index"].as_u64().unwrap(), choice).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
}
