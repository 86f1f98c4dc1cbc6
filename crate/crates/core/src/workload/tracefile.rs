//! Line-delimited trace file: a header record, one record per session script,
//! one per event, and one per dropped advisory.

use super::{
    Anchor, EventKind, PriorityClass, SessionId, SessionScript, TimedEvent, Trace, TraceHeader,
    Turn, UserProfile, WorkloadError, TRACE_SCHEMA_VERSION,
};
use crate::time::Nanos;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct AdvisoryFields {
    expected_arrival: Option<f64>,
    ordered: bool,
    priority: Option<u8>,
    model_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        schema_version: u32,
        generator: String,
        seed: u64,
        concurrency_target: u32,
        params: serde_json::Value,
    },
    Session {
        session_id: SessionId,
        model_id: String,
        user_profile: UserProfile,
        priority_class: PriorityClass,
        turns: Vec<Turn>,
    },
    Event {
        time_ns: Nanos,
        #[serde(flatten)]
        anchor: Anchor,
        time_or_delta_ns: Nanos,
        kind: String,
        session_id: SessionId,
        turn_index: u32,
        prompt_tokens: u32,
        response_tokens: u32,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        advisory: Option<AdvisoryFields>,
    },
    DroppedAdvisory {
        session_id: SessionId,
        turn_index: u32,
    },
}

fn records(trace: &Trace) -> Vec<Record> {
    let mut out = vec![Record::Header {
        schema_version: trace.header.schema_version,
        generator: trace.header.generator.clone(),
        seed: trace.header.seed,
        concurrency_target: trace.concurrency_target,
        params: trace.header.params.clone(),
    }];
    for s in &trace.sessions {
        out.push(Record::Session {
            session_id: s.session_id.clone(),
            model_id: s.model_id.clone(),
            user_profile: s.user_profile,
            priority_class: s.priority_class,
            turns: s.turns.clone(),
        });
    }
    for e in &trace.events {
        let turn = trace
            .session(&e.session_id)
            .and_then(|s| s.turns.get(e.turn_index as usize).copied());
        let (kind, advisory) = match &e.kind {
            EventKind::Inference => ("inference", None),
            EventKind::Advisory(a) => (
                "advisory",
                Some(AdvisoryFields {
                    expected_arrival: a.expected_arrival,
                    ordered: a.ordered,
                    priority: a.priority,
                    model_id: a.model_id.clone(),
                }),
            ),
        };
        out.push(Record::Event {
            time_ns: e.time,
            anchor: e.anchor,
            time_or_delta_ns: e.offset,
            kind: kind.into(),
            session_id: e.session_id.clone(),
            turn_index: e.turn_index,
            prompt_tokens: turn.map_or(0, |t| t.prompt_tokens),
            response_tokens: turn.map_or(0, |t| t.response_tokens),
            advisory,
        });
    }
    for (s, t) in &trace.dropped_advisories {
        out.push(Record::DroppedAdvisory {
            session_id: s.clone(),
            turn_index: *t,
        });
    }
    out
}

pub fn to_string(trace: &Trace) -> String {
    let mut s = String::new();
    for r in records(trace) {
        s.push_str(&serde_json::to_string(&r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// SHA-256 of the canonical serialization, hex encoded.
pub fn trace_hash(trace: &Trace) -> String {
    hex::encode(Sha256::digest(to_string(trace).as_bytes()))
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), WorkloadError> {
    let io = |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(to_string(trace).as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Trace, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(BufReader::new(file), &path.display().to_string())
}

pub fn parse(reader: impl BufRead, name: &str) -> Result<Trace, WorkloadError> {
    let err = |line: usize, reason: String| WorkloadError::TraceFormat {
        path: name.to_string(),
        line,
        reason,
    };
    let mut trace = Trace::empty();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(lineno, e.to_string()))?;
        match rec {
            Record::Header {
                schema_version,
                generator,
                seed,
                concurrency_target,
                params,
            } => {
                if schema_version != TRACE_SCHEMA_VERSION {
                    return Err(err(lineno, format!("unsupported schema {schema_version}")));
                }
                trace.header = TraceHeader {
                    schema_version,
                    generator,
                    seed,
                    params,
                };
                trace.concurrency_target = concurrency_target;
                saw_header = true;
            }
            Record::Session {
                session_id,
                model_id,
                user_profile,
                priority_class,
                turns,
            } => trace.sessions.push(SessionScript {
                session_id,
                model_id,
                turns,
                user_profile,
                priority_class,
            }),
            Record::Event {
                time_ns,
                anchor,
                time_or_delta_ns,
                kind,
                session_id,
                turn_index,
                advisory,
                ..
            } => {
                let kind = match (kind.as_str(), advisory) {
                    ("inference", _) => EventKind::Inference,
                    ("advisory", Some(a)) => EventKind::Advisory(super::AdvisoryRequest {
                        session_id: session_id.clone(),
                        model_id: a.model_id,
                        expected_arrival: a.expected_arrival,
                        ordered: a.ordered,
                        priority: a.priority,
                    }),
                    (other, _) => return Err(err(lineno, format!("bad event kind `{other}`"))),
                };
                trace.events.push(TimedEvent {
                    time: time_ns,
                    anchor,
                    offset: time_or_delta_ns,
                    session_id,
                    turn_index,
                    kind,
                });
            }
            Record::DroppedAdvisory {
                session_id,
                turn_index,
            } => trace.dropped_advisories.push((session_id, turn_index)),
        }
    }
    if !saw_header {
        return Err(err(0, "missing header record".into()));
    }
    trace.validate()?;
    Ok(trace)
}
