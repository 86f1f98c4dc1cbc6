//! Multi-turn session traces: chat and agent workloads, closed-loop arrival
//! synthesis and advisory injection.
//!
//! A trace does not pin absolute arrival times for follow-up turns. Each event
//! carries an [`Anchor`] plus an offset; the simulator resolves the anchor
//! (session start, an earlier turn's arrival, or an earlier turn's completion)
//! once it happens. `TimedEvent::time` is the nominal time the event would
//! occur under instantaneous service and is only used for ordering and
//! summaries.

mod agent;
mod corpus;
pub mod synthetic;
pub mod tracefile;

pub use agent::{generate_agent_trace, metagpt_workload, AgentWorkload, CallGraph};
pub use corpus::{load_chat_corpus, parse_chat_corpus, write_corpus, CorpusMessage, CorpusRecord};
pub use tracefile::{read_trace, trace_hash, write_trace};

use crate::time::Nanos;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt;
use thiserror::Error;

pub const DEFAULT_READING_WPM: f64 = 200.0;
pub const DEFAULT_TYPING_WPM: f64 = 40.0;
pub const DEFAULT_WORDS_PER_TOKEN: f64 = 0.75;
pub const DEFAULT_MODEL_ID: &str = "llama-3.1-8b";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus record {index} (line {line}): {reason}")]
    MalformedRecord {
        index: usize,
        line: usize,
        reason: String,
    },
    #[error("corpus contains no usable sessions")]
    EmptyCorpus,
    #[error("no session scripts given")]
    NoScripts,
    #[error("concurrency target {target} exceeds the {sessions} available sessions")]
    ConcurrencyTooHigh { target: u32, sessions: usize },
    #[error("concurrency target must be positive")]
    ZeroConcurrency,
    #[error("invalid session {session}: {reason}")]
    InvalidSession { session: SessionId, reason: String },
    #[error("call graph has a cycle through stage `{0}`")]
    CyclicGraph(String),
    #[error("stage `{0}` is missing token counts or a profiled lower bound")]
    MissingStage(String),
    #[error("trace file {path} line {line}: {reason}")]
    TraceFormat {
        path: String,
        line: usize,
        reason: String,
    },
}

/// Opaque session identifier; ordered lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(s: impl Into<String>) -> Self {
        SessionId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SessionId {
    fn from(s: &str) -> Self {
        SessionId(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub prompt_tokens: u32,
    pub response_tokens: u32,
    pub prompt_words: u32,
    pub response_words: u32,
}

impl Turn {
    pub fn from_tokens(prompt_tokens: u32, response_tokens: u32, words_per_token: f64) -> Turn {
        Turn {
            prompt_tokens,
            response_tokens,
            prompt_words: words_for(prompt_tokens, words_per_token),
            response_words: words_for(response_tokens, words_per_token),
        }
    }

    pub fn tokens(&self) -> u64 {
        self.prompt_tokens as u64 + self.response_tokens as u64
    }
}

pub(crate) fn words_for(tokens: u32, words_per_token: f64) -> u32 {
    ((tokens as f64 * words_per_token).round() as u32).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub reading_wpm: f64,
    pub typing_wpm: f64,
}

impl Default for UserProfile {
    fn default() -> Self {
        UserProfile {
            reading_wpm: DEFAULT_READING_WPM,
            typing_wpm: DEFAULT_TYPING_WPM,
        }
    }
}

impl UserProfile {
    pub fn read_time(&self, words: u32) -> Nanos {
        Nanos::from_secs_f64(words as f64 / self.reading_wpm * 60.0)
    }

    pub fn type_time(&self, words: u32) -> Nanos {
        Nanos::from_secs_f64(words as f64 / self.typing_wpm * 60.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityClass {
    #[default]
    Normal,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScript {
    pub session_id: SessionId,
    pub model_id: String,
    pub turns: Vec<Turn>,
    pub user_profile: UserProfile,
    pub priority_class: PriorityClass,
}

impl SessionScript {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |reason: &str| WorkloadError::InvalidSession {
            session: self.session_id.clone(),
            reason: reason.to_string(),
        };
        if self.turns.is_empty() {
            return Err(bad("no turns"));
        }
        if !(self.user_profile.reading_wpm > 0.0 && self.user_profile.typing_wpm > 0.0) {
            return Err(bad("reading and typing speeds must be positive"));
        }
        for t in &self.turns {
            if t.prompt_tokens == 0 {
                return Err(bad("turn with an empty prompt"));
            }
            if t.response_tokens == 0 {
                return Err(bad("turn with an empty response"));
            }
        }
        Ok(())
    }

    /// Tokens of cache held before turn `turn` starts.
    pub fn history_tokens(&self, turn: usize) -> u64 {
        self.turns[..turn].iter().map(Turn::tokens).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.history_tokens(self.turns.len())
    }
}

/// Early hint that a session's next inference request is coming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryRequest {
    pub session_id: SessionId,
    pub model_id: String,
    /// Lower bound, in seconds, until the inference request.
    pub expected_arrival: Option<f64>,
    pub ordered: bool,
    pub priority: Option<u8>,
}

impl AdvisoryRequest {
    pub fn is_high_priority(&self) -> bool {
        self.priority.is_some_and(|p| p > 0)
    }
}

/// What an event's offset is measured from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "anchor", content = "turn")]
pub enum Anchor {
    /// The moment the session takes a user slot.
    SessionStart,
    /// Arrival of an earlier turn's inference request.
    TurnArrival(u32),
    /// Completion of an earlier turn's response.
    TurnCompletion(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Advisory(AdvisoryRequest),
    Inference,
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::Advisory(_) => 0,
            EventKind::Inference => 1,
        }
    }

    pub fn is_advisory(&self) -> bool {
        matches!(self, EventKind::Advisory(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    /// Nominal time under instantaneous service.
    pub time: Nanos,
    pub anchor: Anchor,
    pub offset: Nanos,
    pub session_id: SessionId,
    pub turn_index: u32,
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub sessions: Vec<SessionScript>,
    pub events: Vec<TimedEvent>,
    pub concurrency_target: u32,
    pub dropped_advisories: Vec<(SessionId, u32)>,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

impl Trace {
    pub fn empty() -> Trace {
        Trace {
            header: TraceHeader {
                schema_version: TRACE_SCHEMA_VERSION,
                generator: "empty".into(),
                seed: 0,
                params: serde_json::Value::Null,
            },
            sessions: Vec::new(),
            events: Vec::new(),
            concurrency_target: 1,
            dropped_advisories: Vec::new(),
        }
    }

    pub fn session(&self, id: &SessionId) -> Option<&SessionScript> {
        self.sessions.iter().find(|s| &s.session_id == id)
    }

    pub fn total_turns(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }

    pub fn multi_turn_fraction(&self) -> f64 {
        multi_turn_fraction(&self.sessions)
    }

    pub fn advisory_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind.is_advisory()).count()
    }

    /// Mean lead of advisories over their inference request, in seconds,
    /// for advisories sharing the inference event's anchor.
    pub fn mean_advisory_lead(&self) -> Option<f64> {
        let mut inference: BTreeMap<(&SessionId, u32), &TimedEvent> = BTreeMap::new();
        for e in &self.events {
            if !e.kind.is_advisory() {
                inference.insert((&e.session_id, e.turn_index), e);
            }
        }
        let leads: Vec<f64> = self
            .events
            .iter()
            .filter(|e| e.kind.is_advisory())
            .filter_map(|a| {
                let inf = inference.get(&(&a.session_id, a.turn_index))?;
                (inf.anchor == a.anchor).then(|| (inf.offset - a.offset).as_secs_f64())
            })
            .collect();
        (!leads.is_empty()).then(|| leads.iter().sum::<f64>() / leads.len() as f64)
    }

    pub fn total_prompt_tokens(&self) -> u64 {
        self.sessions
            .iter()
            .flat_map(|s| s.turns.iter())
            .map(|t| t.prompt_tokens as u64)
            .sum()
    }

    /// Recomputes nominal times and restores canonical event order.
    pub fn normalize(&mut self) {
        assign_nominal_times(self);
        sort_events(&mut self.events);
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut seen = HashSet::new();
        for s in &self.sessions {
            s.validate()?;
            if !seen.insert(&s.session_id) {
                return Err(WorkloadError::InvalidSession {
                    session: s.session_id.clone(),
                    reason: "duplicate session id".into(),
                });
            }
        }
        if self.concurrency_target == 0 {
            return Err(WorkloadError::ZeroConcurrency);
        }
        Ok(())
    }
}

pub fn multi_turn_fraction(sessions: &[SessionScript]) -> f64 {
    if sessions.is_empty() {
        return 0.0;
    }
    sessions.iter().filter(|s| s.turns.len() >= 2).count() as f64 / sessions.len() as f64
}

fn event_order_key(e: &TimedEvent) -> (Nanos, &SessionId, u8, u32) {
    (e.time, &e.session_id, e.kind.rank(), e.turn_index)
}

pub(crate) fn sort_events(events: &mut [TimedEvent]) {
    events.sort_by(|a, b| event_order_key(a).cmp(&event_order_key(b)));
}

/// Fills `TimedEvent::time` by replaying the closed loop with zero service time.
pub(crate) fn assign_nominal_times(trace: &mut Trace) {
    let index: BTreeMap<&SessionId, usize> = trace
        .sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (&s.session_id, i))
        .collect();
    let mut per_session: Vec<Vec<usize>> = vec![Vec::new(); trace.sessions.len()];
    for (i, e) in trace.events.iter().enumerate() {
        if let Some(&s) = index.get(&e.session_id) {
            per_session[s].push(i);
        }
    }

    let mut slots: BinaryHeap<Reverse<Nanos>> = BinaryHeap::new();
    let mut times = vec![Nanos::ZERO; trace.events.len()];
    for (s_idx, script) in trace.sessions.iter().enumerate() {
        let start = if (s_idx as u32) < trace.concurrency_target {
            Nanos::ZERO
        } else {
            slots.pop().map(|r| r.0).unwrap_or(Nanos::ZERO)
        };
        let n = script.turns.len();
        let mut arrival: Vec<Option<Nanos>> = vec![None; n];
        // Turns resolve in order since anchors only reference earlier turns.
        for turn in 0..n as u32 {
            for &ei in &per_session[s_idx] {
                let e = &trace.events[ei];
                if e.turn_index == turn && !e.kind.is_advisory() {
                    let base = resolve_anchor(e.anchor, start, &arrival);
                    arrival[turn as usize] = Some(base + e.offset);
                    times[ei] = base + e.offset;
                }
            }
        }
        for &ei in &per_session[s_idx] {
            let e = &trace.events[ei];
            if e.kind.is_advisory() {
                times[ei] = resolve_anchor(e.anchor, start, &arrival) + e.offset;
            }
        }
        let end = arrival.iter().flatten().max().copied().unwrap_or(start);
        slots.push(Reverse(end));
    }
    for (e, t) in trace.events.iter_mut().zip(times) {
        e.time = t;
    }
}

fn resolve_anchor(anchor: Anchor, start: Nanos, arrival: &[Option<Nanos>]) -> Nanos {
    match anchor {
        Anchor::SessionStart => start,
        Anchor::TurnArrival(k) | Anchor::TurnCompletion(k) => {
            arrival.get(k as usize).copied().flatten().unwrap_or(start)
        }
    }
}

/// Knobs for [`synthesize_arrivals`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrivalOptions {
    /// Resample each session's reading/typing speed from a normal
    /// distribution with this standard deviation relative to the profile.
    pub profile_sigma_frac: Option<f64>,
    /// Spread the first turns of the initially active sessions uniformly
    /// over this many seconds.
    pub start_spread_s: f64,
}

impl Default for ArrivalOptions {
    fn default() -> Self {
        ArrivalOptions {
            profile_sigma_frac: Some(0.15),
            start_spread_s: 0.0,
        }
    }
}

impl ArrivalOptions {
    pub fn exact() -> Self {
        ArrivalOptions {
            profile_sigma_frac: None,
            start_spread_s: 0.0,
        }
    }
}

/// Builds a closed-loop chat trace: `concurrency_target` sessions are active at
/// once, and every follow-up turn arrives a reading-plus-typing delay after the
/// previous response completes.
pub fn synthesize_arrivals(
    scripts: &[SessionScript],
    concurrency_target: u32,
    seed: u64,
    opts: &ArrivalOptions,
) -> Result<Trace, WorkloadError> {
    if scripts.is_empty() {
        return Err(WorkloadError::NoScripts);
    }
    if concurrency_target == 0 {
        return Err(WorkloadError::ZeroConcurrency);
    }
    if concurrency_target as usize > scripts.len() {
        return Err(WorkloadError::ConcurrencyTooHigh {
            target: concurrency_target,
            sessions: scripts.len(),
        });
    }
    for s in scripts {
        s.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions = scripts.to_vec();
    if let Some(sigma) = opts.profile_sigma_frac {
        for s in &mut sessions {
            s.user_profile.reading_wpm = jitter(&mut rng, s.user_profile.reading_wpm, sigma);
            s.user_profile.typing_wpm = jitter(&mut rng, s.user_profile.typing_wpm, sigma);
        }
    }

    let mut events = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let start_offset = if (i as u32) < concurrency_target && opts.start_spread_s > 0.0 {
            Nanos::from_secs_f64(rng.random_range(0.0..opts.start_spread_s))
        } else {
            Nanos::ZERO
        };
        for (k, turn) in s.turns.iter().enumerate() {
            let (anchor, offset) = if k == 0 {
                (Anchor::SessionStart, start_offset)
            } else {
                let prev = &s.turns[k - 1];
                let think = s.user_profile.read_time(prev.response_words)
                    + s.user_profile.type_time(turn.prompt_words);
                (Anchor::TurnCompletion(k as u32 - 1), think)
            };
            events.push(TimedEvent {
                time: Nanos::ZERO,
                anchor,
                offset,
                session_id: s.session_id.clone(),
                turn_index: k as u32,
                kind: EventKind::Inference,
            });
        }
    }

    let mut trace = Trace {
        header: TraceHeader {
            schema_version: TRACE_SCHEMA_VERSION,
            generator: "chat".into(),
            seed,
            params: serde_json::to_value(opts).expect("options serialize"),
        },
        sessions,
        events,
        concurrency_target,
        dropped_advisories: Vec::new(),
    };
    trace.normalize();
    Ok(trace)
}

fn jitter(rng: &mut ChaCha8Rng, mean: f64, sigma_frac: f64) -> f64 {
    if sigma_frac <= 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sigma_frac * mean).expect("finite parameters");
    normal.sample(rng).max(0.1 * mean)
}

/// Places an advisory for every follow-up chat turn at the moment the user
/// starts typing, dropping each independently with probability `miss_fraction`.
/// Turn 0 never gets an advisory since no prior cache exists.
pub fn inject_advisories(trace: &Trace, miss_fraction: f64, seed: u64) -> Trace {
    let miss = miss_fraction.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xadd1_5e55);
    let mut out = trace.clone();
    out.events.retain(|e| !e.kind.is_advisory());
    out.dropped_advisories.clear();

    let scripts: BTreeMap<&SessionId, &SessionScript> =
        trace.sessions.iter().map(|s| (&s.session_id, s)).collect();
    let mut added = Vec::new();
    for e in &out.events {
        if e.turn_index == 0 {
            continue;
        }
        let Some(script) = scripts.get(&e.session_id) else {
            continue;
        };
        let Anchor::TurnCompletion(_) = e.anchor else {
            continue;
        };
        let draw: f64 = rng.random();
        if draw < miss {
            out.dropped_advisories.push((e.session_id.clone(), e.turn_index));
            continue;
        }
        let turn = &script.turns[e.turn_index as usize];
        let typing = script.user_profile.type_time(turn.prompt_words);
        added.push(TimedEvent {
            time: Nanos::ZERO,
            anchor: e.anchor,
            offset: e.offset.saturating_sub(typing),
            session_id: e.session_id.clone(),
            turn_index: e.turn_index,
            kind: EventKind::Advisory(AdvisoryRequest {
                session_id: e.session_id.clone(),
                model_id: script.model_id.clone(),
                expected_arrival: None,
                ordered: false,
                priority: (script.priority_class == PriorityClass::High).then_some(1),
            }),
        });
    }
    out.events.extend(added);
    if let serde_json::Value::Object(map) = &mut out.header.params {
        map.insert("miss_fraction".into(), miss.into());
        map.insert("advisory_seed".into(), seed.into());
    }
    out.normalize();
    out
}

/// Marks exactly `round(fraction * n)` sessions as high priority, chosen by a
/// seeded shuffle.
pub fn assign_priorities(scripts: &mut [SessionScript], fraction: f64, seed: u64) {
    use rand::seq::SliceRandom;
    let n = scripts.len();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    for s in scripts.iter_mut() {
        s.priority_class = PriorityClass::Normal;
    }
    for &i in &idx[..k] {
        scripts[i].priority_class = PriorityClass::High;
    }
}

/// Replaces every turn's token counts while keeping the arrival structure
/// (anchors and think-time offsets) untouched.
pub fn with_fixed_tokens(trace: &Trace, prompt_tokens: u32, response_tokens: u32) -> Trace {
    let mut out = trace.clone();
    for s in &mut out.sessions {
        for t in &mut s.turns {
            t.prompt_tokens = prompt_tokens;
            t.response_tokens = response_tokens;
        }
    }
    out.header.generator = format!("{}+fixed", trace.header.generator);
    if let serde_json::Value::Object(map) = &mut out.header.params {
        map.insert("fixed_prompt_tokens".into(), prompt_tokens.into());
        map.insert("fixed_response_tokens".into(), response_tokens.into());
    }
    out
}
