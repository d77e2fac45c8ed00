//! Append-only JSONL event log for rating sessions.
//!
//! One JSON object per line:
//!
//! ```text
//! {"schema_version":1,"session_id":"…","seq":0,"timestamp_ms":…,"kind":"created","payload":{…}}
//! ```
//!
//! Sequence numbers are contiguous from 0. Replaying a log re-runs the
//! engine and checks every planned trial against what it would select.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psychometric::Choice;
use crate::session::{
    describe_mismatch, resolve_choice, RaterAnswer, SessionConfig, SessionState, SessionStatus,
    TrialPlan,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Created {
        config: SessionConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manifest_ref: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idempotency_key: Option<String>,
    },
    TrialPlanned(TrialPlan),
    ResponseRecorded {
        trial_index: usize,
        answer: RaterAnswer,
        choice: Choice,
    },
    Completed {
        total_trials: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub schema_version: u32,
    pub session_id: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn new(session_id: &str, seq: u64, timestamp_ms: u64, body: EventBody) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.to_string(),
            seq,
            timestamp_ms,
            body,
        }
    }

    /// Serialized form without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }
}

/// Parses a JSONL log; blank lines are skipped.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<SessionEvent>> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: SessionEvent = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            row: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// Session rebuilt from its event log.
#[derive(Debug, Clone)]
pub struct ReplayedSession {
    pub session_id: String,
    pub manifest_ref: Option<String>,
    pub idempotency_key: Option<String>,
    pub state: SessionState,
    pub created_ms: u64,
    /// Sequence number the next appended event must carry.
    pub next_seq: u64,
}

pub fn replay_events(events: &[SessionEvent]) -> Result<ReplayedSession> {
    let first = events.first().ok_or_else(|| Error::EventIntegrity {
        seq: 0,
        reason: "log is empty".into(),
    })?;
    let EventBody::Created {
        config,
        manifest_ref,
        idempotency_key,
    } = &first.body
    else {
        return Err(Error::EventIntegrity {
            seq: first.seq,
            reason: "first event must be `created`".into(),
        });
    };
    let mut state = SessionState::new(config.clone()).map_err(|e| Error::EventIntegrity {
        seq: first.seq,
        reason: e.to_string(),
    })?;
    let session_id = first.session_id.clone();

    for (expected_seq, event) in events.iter().enumerate() {
        let seq = event.seq;
        let fail = |reason: String| Error::EventIntegrity { seq, reason };
        if event.schema_version != SCHEMA_VERSION {
            return Err(fail(format!("unsupported schema_version {}", event.schema_version)));
        }
        if seq != expected_seq as u64 {
            return Err(fail(format!("expected sequence number {expected_seq}")));
        }
        if event.session_id != session_id {
            return Err(fail(format!("foreign session id {}", event.session_id)));
        }
        match &event.body {
            EventBody::Created { .. } if seq == 0 => {}
            EventBody::Created { .. } => return Err(fail("duplicate `created` event".into())),
            EventBody::TrialPlanned(plan) => {
                if state.pending().is_some() {
                    return Err(fail("trial planned twice without a response".into()));
                }
                let expected = state.next_trial().map_err(|e| fail(e.to_string()))?;
                if &expected != plan {
                    return Err(fail(format!(
                        "trial {}: {}",
                        expected.trial_index,
                        describe_mismatch(&expected, plan)
                    )));
                }
            }
            EventBody::ResponseRecorded {
                trial_index,
                answer,
                choice,
            } => {
                let plan = state.pending().cloned().ok_or_else(|| {
                    fail(format!("response for trial {trial_index} without a planned trial"))
                })?;
                if *trial_index != plan.trial_index {
                    return Err(fail(format!(
                        "response for trial {trial_index} while trial {} is outstanding",
                        plan.trial_index
                    )));
                }
                if resolve_choice(plan.order, *answer) != *choice {
                    return Err(fail(format!("trial {trial_index}: choice does not match answer")));
                }
                state
                    .record_response(*trial_index, *answer, event.timestamp_ms)
                    .map_err(|e| fail(e.to_string()))?;
            }
            EventBody::Completed { total_trials } => {
                if state.status() != SessionStatus::Complete || *total_trials != state.total_trials() {
                    return Err(fail("`completed` before all trials were answered".into()));
                }
            }
        }
    }
    Ok(ReplayedSession {
        session_id,
        manifest_ref: manifest_ref.clone(),
        idempotency_key: idempotency_key.clone(),
        state,
        created_ms: first.timestamp_ms,
        next_seq: events.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;

    fn config() -> SessionConfig {
        let clips = (0..4).map(|i| format!("c{i}")).collect();
        SessionConfig::new(vec!["a".into(), "b".into()], clips, PolicyKind::Bald, 3)
    }

    /// Drives a live session and returns its event log.
    fn live_log(answers: usize) -> (SessionState, Vec<SessionEvent>) {
        let mut state = SessionState::new(config()).unwrap();
        let mut events = vec![SessionEvent::new(
            "s1",
            0,
            0,
            EventBody::Created {
                config: config(),
                manifest_ref: Some("demo".into()),
                idempotency_key: None,
            },
        )];
        for i in 0..answers {
            let plan = state.next_trial().unwrap();
            events.push(SessionEvent::new("s1", events.len() as u64, 1, EventBody::TrialPlanned(plan)));
            let answer = if i % 2 == 0 { RaterAnswer::First } else { RaterAnswer::Second };
            let rec = state.record_response(i, answer, 2).unwrap().clone();
            events.push(SessionEvent::new(
                "s1",
                events.len() as u64,
                2,
                EventBody::ResponseRecorded {
                    trial_index: i,
                    answer,
                    choice: rec.choice,
                },
            ));
        }
        if state.status() == SessionStatus::Complete {
            events.push(SessionEvent::new(
                "s1",
                events.len() as u64,
                3,
                EventBody::Completed { total_trials: state.total_trials() },
            ));
        }
        (state, events)
    }

    #[test]
    fn jsonl_round_trip_and_replay() {
        let (live, events) = live_log(8);
        let text: String = events.iter().map(|e| e.to_line() + "\n").collect();
        let parsed = read_log(text.as_bytes()).unwrap();
        assert_eq!(parsed, events);
        let replayed = replay_events(&parsed).unwrap();
        assert_eq!(replayed.state.estimates(), live.estimates());
        assert_eq!(replayed.next_seq, events.len() as u64);
        assert_eq!(replayed.manifest_ref.as_deref(), Some("demo"));
    }

    #[test]
    fn line_format_is_flat() {
        let (_, events) = live_log(1);
        let v: serde_json::Value = serde_json::from_str(&events[1].to_line()).unwrap();
        assert_eq!(v["kind"], "trial_planned");
        assert_eq!(v["schema_version"], 1);
        assert!(v["payload"]["reference_level"].is_u64());
    }

    #[test]
    fn tampered_level_names_the_event() {
        let (_, mut events) = live_log(5);
        if let EventBody::TrialPlanned(plan) = &mut events[5].body {
            plan.reference_level = if plan.reference_level == 1 { 2 } else { 1 };
        }
        match replay_events(&events) {
            Err(Error::EventIntegrity { seq, reason }) => {
                assert_eq!(seq, 5);
                assert!(reason.contains("trial 2"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaps_and_bad_headers_are_rejected() {
        let (_, mut events) = live_log(2);
        events.remove(2);
        assert!(matches!(replay_events(&events), Err(Error::EventIntegrity { seq: 3, .. })));
        let (_, events) = live_log(2);
        assert!(replay_events(&events[1..]).is_err());
        assert!(replay_events(&[]).is_err());
        assert!(read_log("{not json}\n".as_bytes()).is_err());
    }

    #[test]
    fn complete_session_log_replays() {
        let (live, events) = live_log(8);
        assert_eq!(live.status(), SessionStatus::Complete);
        assert!(matches!(events.last().unwrap().body, EventBody::Completed { .. }));
        let r = replay_events(&events).unwrap();
        assert_eq!(r.state.status(), SessionStatus::Complete);
    }
}
