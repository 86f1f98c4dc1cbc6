//! Agent workloads: each job walks a DAG of LLM-backed stages that share one
//! session, and every stage announces its successors when it starts.

use super::{
    assign_nominal_times, sort_events, AdvisoryRequest, Anchor, EventKind, PriorityClass,
    SessionId, SessionScript, TimedEvent, Trace, TraceHeader, Turn, UserProfile, WorkloadError,
    DEFAULT_MODEL_ID, DEFAULT_WORDS_PER_TOKEN, TRACE_SCHEMA_VERSION,
};
use crate::time::Nanos;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CallGraph {
    pub stages: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl CallGraph {
    pub fn chain(stages: &[&str]) -> CallGraph {
        CallGraph {
            stages: stages.iter().map(|s| s.to_string()).collect(),
            edges: stages
                .windows(2)
                .map(|w| (w[0].to_string(), w[1].to_string()))
                .collect(),
        }
    }

    /// Kahn's algorithm; ties go to declaration order.
    pub fn topo_order(&self) -> Result<Vec<usize>, WorkloadError> {
        let idx: BTreeMap<&str, usize> = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let n = self.stages.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for (a, b) in &self.edges {
            let ia = *idx.get(a.as_str()).ok_or_else(|| WorkloadError::MissingStage(a.clone()))?;
            let ib = *idx.get(b.as_str()).ok_or_else(|| WorkloadError::MissingStage(b.clone()))?;
            succ[ia].push(ib);
            indeg[ib] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(WorkloadError::CyclicGraph(self.stages[stuck].clone()));
        }
        Ok(order)
    }

    pub fn successors<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(a, _)| a == stage)
            .map(|(_, b)| b.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentWorkload {
    pub graph: CallGraph,
    pub stage_tokens: BTreeMap<String, (u32, u32)>,
    /// Profiled lower bound on each stage's running time, seconds.
    pub lower_bounds: BTreeMap<String, f64>,
    pub n_jobs: u32,
    pub concurrency_target: u32,
    /// Upper bound of the uniform tool/glue delay between stages, seconds.
    pub tool_delay_s: f64,
}

/// MetaGPT-shaped job: architect, engineer, then three review/revision rounds.
pub fn metagpt_workload(n_jobs: u32, concurrency_target: u32) -> AgentWorkload {
    let mut names = vec!["architect".to_string(), "engineer".to_string()];
    for round in 1..=3 {
        names.push(format!("qa_{round}"));
        names.push(format!("engineer_rev_{round}"));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let graph = CallGraph::chain(&refs);
    let mut stage_tokens = BTreeMap::new();
    let mut lower_bounds = BTreeMap::new();
    for n in &names {
        let (tokens, lb) = match n.split('_').next().unwrap() {
            "architect" => ((600, 350), 6.0),
            "engineer" if n == "engineer" => ((900, 500), 8.0),
            "qa" => ((500, 200), 3.2),
            _ => ((300, 300), 4.8),
        };
        stage_tokens.insert(n.clone(), tokens);
        lower_bounds.insert(n.clone(), lb);
    }
    AgentWorkload {
        graph,
        stage_tokens,
        lower_bounds,
        n_jobs,
        concurrency_target,
        tool_delay_s: 0.5,
    }
}

pub fn generate_agent_trace(w: &AgentWorkload, seed: u64) -> Result<Trace, WorkloadError> {
    let order = w.graph.topo_order()?;
    for s in &w.graph.stages {
        if !w.stage_tokens.contains_key(s) || !w.lower_bounds.contains_key(s) {
            return Err(WorkloadError::MissingStage(s.clone()));
        }
    }
    if w.n_jobs == 0 || order.is_empty() {
        return Err(WorkloadError::NoScripts);
    }
    if w.concurrency_target == 0 {
        return Err(WorkloadError::ZeroConcurrency);
    }
    let turn_of: BTreeMap<&str, u32> = order
        .iter()
        .enumerate()
        .map(|(t, &i)| (w.graph.stages[i].as_str(), t as u32))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions = Vec::new();
    let mut events = Vec::new();
    for job in 0..w.n_jobs {
        let id = SessionId::new(format!("job-{job:05}"));
        let mut turns = Vec::new();
        for (t, &si) in order.iter().enumerate() {
            let stage = &w.graph.stages[si];
            let (p, r) = w.stage_tokens[stage];
            turns.push(Turn::from_tokens(p, r, DEFAULT_WORDS_PER_TOKEN));
            let (anchor, offset) = if t == 0 {
                (Anchor::SessionStart, Nanos::ZERO)
            } else {
                let delay = if w.tool_delay_s > 0.0 {
                    rng.random_range(0.0..w.tool_delay_s)
                } else {
                    0.0
                };
                (Anchor::TurnCompletion(t as u32 - 1), Nanos::from_secs_f64(delay))
            };
            events.push(TimedEvent {
                time: Nanos::ZERO,
                anchor,
                offset,
                session_id: id.clone(),
                turn_index: t as u32,
                kind: EventKind::Inference,
            });
            for next in w.graph.successors(stage) {
                events.push(TimedEvent {
                    time: Nanos::ZERO,
                    anchor: Anchor::TurnArrival(t as u32),
                    offset: Nanos::ZERO,
                    session_id: id.clone(),
                    turn_index: turn_of[next],
                    kind: EventKind::Advisory(AdvisoryRequest {
                        session_id: id.clone(),
                        model_id: DEFAULT_MODEL_ID.into(),
                        expected_arrival: Some(w.lower_bounds[stage]),
                        ordered: false,
                        priority: None,
                    }),
                });
            }
        }
        sessions.push(SessionScript {
            session_id: id,
            model_id: DEFAULT_MODEL_ID.into(),
            turns,
            user_profile: UserProfile::default(),
            priority_class: PriorityClass::Normal,
        });
    }

    let mut trace = Trace {
        header: TraceHeader {
            schema_version: TRACE_SCHEMA_VERSION,
            generator: "agent".into(),
            seed,
            params: serde_json::to_value(w).expect("workload serializes"),
        },
        sessions,
        events,
        concurrency_target: w.concurrency_target.min(w.n_jobs),
        dropped_advisories: Vec::new(),
    };
    assign_nominal_times(&mut trace);
    sort_events(&mut trace.events);
    Ok(trace)
}
