//! Deterministic discrete-event kernel and run driver.

mod metrics;

pub use metrics::{
    compare_runs, wasted_fraction_by_turn, ClassTpot, CompareError, ComparisonRow, LeadStats, MetricsReport,
    RequestRecord, TrafficTotals,
};

use crate::config::{ClusterConfig, ConfigError, Policy};
use crate::nodemanager::{Cluster, NodeError, Outbox};
use crate::time::Nanos;
use crate::workload::{trace_hash, Anchor, EventKind, SessionId, Trace};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    SessionStart { session: usize },
    /// An inference request from the trace.
    TraceArrival { event: usize },
    AdvisoryDelivery { event: usize },
    TransferComplete { session: SessionId },
    EngineStep { node: usize },
    /// Retry blocked admissions once some copy has landed.
    EngineWake { node: usize },
    SessionEnd { session: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub time: Nanos,
    pub seq: u64,
    pub payload: Payload,
}

/// Min-queue on (time, insertion sequence).
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(Nanos, u64)>>,
    payloads: BTreeMap<u64, Payload>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: Nanos, payload: Payload) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((time, seq)));
        self.payloads.insert(seq, payload);
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        let Reverse((time, seq)) = self.heap.pop()?;
        let payload = self.payloads.remove(&seq).expect("payload for queued event");
        Some(Event { time, seq, payload })
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn pending(&self) -> Vec<(Nanos, &Payload)> {
        let mut v: Vec<_> = self.heap.iter().map(|r| (r.0 .0, r.0 .1)).collect();
        v.sort();
        v.into_iter().map(|(t, s)| (t, &self.payloads[&s])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimelineKind {
    SessionStart,
    Advisory,
    Arrival,
    FetchStart { from: usize },
    TransferComplete { from: usize },
    Admit,
    QuantumStart { end: Nanos, decoders: u32 },
    FirstToken,
    Finish,
    CacheLost,
    SessionEnd,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub time: Nanos,
    pub node: Option<usize>,
    pub session: Option<SessionId>,
    pub turn: Option<u32>,
    pub kind: TimelineKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Record the full event timeline.
    pub timeline: bool,
    /// Check every store and routing invariant after each event.
    pub audit: bool,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("invariant violated at {time}: {what}")]
    Invariant { time: Nanos, what: String },
    #[error("simulation passed the time limit of {limit} with {unfinished} sessions unfinished")]
    TimeLimit { limit: Nanos, unfinished: usize },
    #[error("no progress possible at {time}: {unfinished} sessions unfinished; {detail}")]
    Stalled { time: Nanos, unfinished: usize, detail: String },
    #[error("trace: {0}")]
    Trace(String),
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub requests: Vec<RequestRecord>,
    pub timeline: Vec<TimelineEntry>,
    pub routing: Vec<crate::scheduler::RoutingRecord>,
    pub transfers: Vec<crate::kvstore::TransferRecord>,
}

fn anchor_key(a: Anchor) -> (u8, u32) {
    match a {
        Anchor::SessionStart => (0, 0),
        Anchor::TurnArrival(k) => (1, k),
        Anchor::TurnCompletion(k) => (2, k),
    }
}

struct Driver<'a> {
    trace: &'a Trace,
    queue: EventQueue,
    /// Trace events per (session, anchor), in trace order.
    anchored: BTreeMap<(usize, (u8, u32)), Vec<usize>>,
    session_index: BTreeMap<&'a SessionId, usize>,
    next_session: usize,
    active: usize,
    max_active: usize,
    finished_sessions: usize,
    turns_done: Vec<u32>,
}

impl<'a> Driver<'a> {
    fn fire(&mut self, session: usize, anchor: Anchor, now: Nanos) {
        if let Some(evs) = self.anchored.get(&(session, anchor_key(anchor))) {
            for &ei in evs {
                let e = &self.trace.events[ei];
                let p = match e.kind {
                    EventKind::Advisory(_) => Payload::AdvisoryDelivery { event: ei },
                    EventKind::Inference => Payload::TraceArrival { event: ei },
                };
                self.queue.push(now + e.offset, p);
            }
        }
    }

    fn start_next(&mut self, now: Nanos) {
        if self.next_session < self.trace.sessions.len() {
            let s = self.next_session;
            self.next_session += 1;
            self.active += 1;
            self.max_active = self.max_active.max(self.active);
            self.queue.push(now, Payload::SessionStart { session: s });
        }
    }
}

/// Runs `trace` on a cluster under `policy`. The result is a pure function
/// of the inputs.
pub fn run(trace: &Trace, cfg: &ClusterConfig, policy: Policy, opts: &RunOptions) -> Result<RunOutput, SimError> {
    trace.validate().map_err(|e| SimError::Trace(e.to_string()))?;
    let mut cluster = Cluster::new(cfg, policy)?;
    if opts.timeline {
        cluster.timeline = Some(Vec::new());
    }
    let session_index: BTreeMap<&SessionId, usize> =
        trace.sessions.iter().enumerate().map(|(i, s)| (&s.session_id, i)).collect();
    let mut anchored: BTreeMap<(usize, (u8, u32)), Vec<usize>> = BTreeMap::new();
    for (i, e) in trace.events.iter().enumerate() {
        let s = session_index[&e.session_id];
        anchored.entry((s, anchor_key(e.anchor))).or_default().push(i);
    }
    let mut d = Driver {
        trace,
        queue: EventQueue::default(),
        anchored,
        session_index,
        next_session: 0,
        active: 0,
        max_active: 0,
        finished_sessions: 0,
        turns_done: vec![0; trace.sessions.len()],
    };
    let initial = (trace.concurrency_target as usize).min(trace.sessions.len());
    for _ in 0..initial {
        d.start_next(Nanos::ZERO);
    }
    let limit = Nanos::from_secs_f64(cfg.max_sim_time_s);
    let mut now = Nanos::ZERO;
    let mut events = 0u64;
    let mut out = Outbox::default();
    while let Some(ev) = d.queue.pop() {
        debug_assert!(ev.time >= now, "clock went backwards");
        now = ev.time;
        if now > limit {
            return Err(SimError::TimeLimit {
                limit,
                unfinished: trace.sessions.len() - d.finished_sessions,
            });
        }
        events += 1;
        match ev.payload {
            Payload::SessionStart { session } => {
                let id = &trace.sessions[session].session_id;
                if let Some(t) = cluster.timeline.as_mut() {
                    t.push(TimelineEntry {
                        time: now,
                        node: None,
                        session: Some(id.clone()),
                        turn: None,
                        kind: TimelineKind::SessionStart,
                    });
                }
                d.fire(session, Anchor::SessionStart, now);
            }
            Payload::AdvisoryDelivery { event } => {
                let e = &trace.events[event];
                if let EventKind::Advisory(adv) = &e.kind {
                    cluster.on_advisory(adv, e.turn_index, now, &mut out)?;
                }
            }
            Payload::TraceArrival { event } => {
                let e = &trace.events[event];
                let s = d.session_index[&e.session_id];
                cluster.on_inference(&trace.sessions[s], e.turn_index, now, &mut out)?;
                d.fire(s, Anchor::TurnArrival(e.turn_index), now);
            }
            Payload::TransferComplete { session } => cluster.on_transfer_complete(&session, now, &mut out)?,
            Payload::EngineStep { node } => cluster.on_engine_step(node, now, &mut out)?,
            Payload::EngineWake { node } => cluster.on_wake(node, now, &mut out)?,
            Payload::SessionEnd { session } => {
                let id = trace.sessions[session].session_id.clone();
                cluster.on_session_end(&id, now, &mut out)?;
                if let Some(t) = cluster.timeline.as_mut() {
                    t.push(TimelineEntry {
                        time: now,
                        node: None,
                        session: Some(id),
                        turn: None,
                        kind: TimelineKind::SessionEnd,
                    });
                }
                d.active -= 1;
                d.finished_sessions += 1;
                d.start_next(now);
            }
        }
        for (t, p) in out.events.drain(..) {
            d.queue.push(t, p);
        }
        out.first_tokens.clear();
        for r in out.finished.drain(..) {
            let req = &cluster.requests[r];
            let s = d.session_index[&req.session_id];
            let turn = req.turn_index;
            d.turns_done[s] += 1;
            d.fire(s, Anchor::TurnCompletion(turn), now);
            if d.turns_done[s] as usize == trace.sessions[s].turns.len() {
                d.queue.push(now, Payload::SessionEnd { session: s });
            }
        }
        if opts.audit {
            cluster
                .check_invariants(now)
                .map_err(|what| SimError::Invariant { time: now, what })?;
        }
    }
    let unfinished = trace.sessions.len() - d.finished_sessions;
    if unfinished > 0 {
        return Err(SimError::Stalled {
            time: now,
            unfinished,
            detail: cluster.stuck_summary(now),
        });
    }
    let hash = trace_hash(trace);
    Ok(metrics::build(trace, &mut cluster, policy, cfg, hash, events, d.max_active))
}
