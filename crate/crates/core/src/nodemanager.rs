//! Per-node control logic: advisory, inference and cache-fetch handling on
//! top of each node's store and engine, plus the routing state shared by the
//! cluster scheduler.

use crate::config::{ClusterConfig, ConfigError, LoadMetric, Policy};
use crate::costmodel::CostModel;
use crate::engine::{ActiveRequest, Engine, EngineCtx, EngineError, Phase, ReqId};
use crate::kvstore::{KvStore, NodeId, StoreError, TransferReason};
use crate::scheduler::{
    route_inference, route_priority, LoadView, RouteOpts, Planned, RouteKind, RouteReason, RoutingRecord, RoutingTable,
};
use crate::simcore::{Payload, TimelineEntry, TimelineKind};
use crate::time::Nanos;
use crate::workload::{AdvisoryRequest, PriorityClass, SessionId, SessionScript};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("node {node} asked to send session {session} it does not own")]
    NotOwner { node: NodeId, session: SessionId },
    #[error("a transfer of session {0} is already in flight")]
    FetchInFlight(SessionId),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct Node {
    pub id: NodeId,
    pub store: KvStore,
    pub engine: Engine,
    pub cost: CostModel,
    wake_at: Option<Nanos>,
}

impl Node {
    /// Sessions this node currently holds and has not handed off.
    pub fn resident(&self) -> impl Iterator<Item = &SessionId> {
        self.store.sessions().filter(|(_, e)| !e.outgoing).map(|(id, _)| id)
    }
}

/// A cache transfer between nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub from: NodeId,
    pub to: NodeId,
    pub reason: TransferReason,
}

/// Everything the handlers schedule or report back to the event loop.
#[derive(Default)]
pub struct Outbox {
    pub events: Vec<(Nanos, Payload)>,
    pub first_tokens: Vec<ReqId>,
    pub finished: Vec<ReqId>,
}

impl Outbox {
    fn at(&mut self, t: Nanos, p: Payload) {
        self.events.push((t, p));
    }
}

pub struct Cluster {
    pub policy: Policy,
    pub cfg: ClusterConfig,
    pub nodes: Vec<Node>,
    pub table: RoutingTable,
    pub requests: Vec<ActiveRequest>,
    pub routing: Vec<RoutingRecord>,
    pub anomalies: Vec<String>,
    pub lost: Vec<(Nanos, NodeId, SessionId)>,
    pub timeline: Option<Vec<TimelineEntry>>,
    /// (time, load) at every change of each node's active plus queued count.
    pub load_log: Vec<Vec<(Nanos, u64)>>,
    /// Advisory receipt time per (session, turn).
    pub advisory_seen: BTreeMap<(SessionId, u32), Nanos>,
    /// Advisory-to-arrival lead per inference that had one, seconds.
    pub leads: Vec<f64>,
    priorities: bool,
    planned_load: Vec<u64>,
    planned_high: Vec<u64>,
    planned_weight: BTreeMap<SessionId, u64>,
    view: LoadView,
    view_at: Option<Nanos>,
    inflight: BTreeMap<SessionId, Transfer>,
    deferred: BTreeMap<SessionId, Transfer>,
    ended: BTreeSet<SessionId>,
}

impl Cluster {
    pub fn new(cfg: &ClusterConfig, policy: Policy) -> Result<Cluster, ConfigError> {
        cfg.validate()?;
        let priorities = cfg.scheduler.priorities && policy == Policy::Symphony;
        let store_cfg = policy.store_config(&cfg.store);
        let mut nodes = Vec::with_capacity(cfg.nodes);
        for id in 0..cfg.nodes {
            let cost = cfg.node_cost(id)?;
            nodes.push(Node {
                id,
                store: KvStore::new(id, store_cfg.clone(), cost.clone()),
                engine: Engine::new(id, cfg.engine.clone(), policy, priorities),
                cost,
                wake_at: None,
            });
        }
        let n = cfg.nodes;
        Ok(Cluster {
            policy,
            cfg: cfg.clone(),
            nodes,
            table: RoutingTable::default(),
            requests: Vec::new(),
            routing: Vec::new(),
            anomalies: Vec::new(),
            lost: Vec::new(),
            timeline: None,
            load_log: vec![vec![(Nanos::ZERO, 0)]; n],
            advisory_seen: BTreeMap::new(),
            leads: Vec::new(),
            priorities,
            planned_load: vec![0; n],
            planned_high: vec![0; n],
            planned_weight: BTreeMap::new(),
            view: LoadView::new(n),
            view_at: None,
            inflight: BTreeMap::new(),
            deferred: BTreeMap::new(),
            ended: BTreeSet::new(),
        })
    }

    pub fn inflight(&self) -> &BTreeMap<SessionId, Transfer> {
        &self.inflight
    }

    fn trace(&mut self, time: Nanos, node: Option<NodeId>, session: Option<&SessionId>, turn: Option<u32>, kind: TimelineKind) {
        if let Some(t) = self.timeline.as_mut() {
            t.push(TimelineEntry {
                time,
                node,
                session: session.cloned(),
                turn,
                kind,
            });
        }
    }

    fn node_load(&self, n: NodeId) -> u64 {
        let e = &self.nodes[n].engine;
        match self.cfg.scheduler.load_metric {
            LoadMetric::Requests => e.load() as u64,
            LoadMetric::Tokens => e.all_requests().map(|r| self.requests[r].final_tokens()).sum(),
        }
    }

    fn high_load(&self, n: NodeId) -> u64 {
        let e = &self.nodes[n].engine;
        let running = e
            .all_requests()
            .filter(|&r| self.requests[r].priority == PriorityClass::High)
            .count() as u64;
        running + self.planned_high[n]
    }

    /// The scheduler's view: engine loads refreshed at most every
    /// `view_lag_s`, its own plans always current.
    fn load_view(&mut self, now: Nanos) -> LoadView {
        let lag = Nanos::from_secs_f64(self.cfg.scheduler.view_lag_s);
        let stale = match self.view_at {
            None => true,
            Some(t) => lag == Nanos::ZERO || now >= t + lag,
        };
        if stale {
            for n in 0..self.nodes.len() {
                self.view.load[n] = self.node_load(n);
            }
            self.view_at = Some(now);
        }
        let mut v = self.view.clone();
        v.planned = self.planned_load.clone();
        for n in 0..self.nodes.len() {
            v.high[n] = self.high_load(n);
        }
        v
    }

    fn log_load(&mut self, n: NodeId, now: Nanos) {
        let load = self.nodes[n].engine.load() as u64;
        let log = &mut self.load_log[n];
        match log.last_mut() {
            Some(last) if last.1 == load => {}
            Some(last) if last.0 == now => last.1 = load,
            _ => log.push((now, load)),
        }
    }

    fn set_plan(&mut self, s: &SessionId, p: Planned, weight: u64) {
        self.clear_plan(s);
        self.planned_load[p.node] += weight;
        if p.high {
            self.planned_high[p.node] += 1;
        }
        self.planned_weight.insert(s.clone(), weight);
        self.table.set_planned(s, p);
    }

    fn clear_plan(&mut self, s: &SessionId) -> Option<Planned> {
        let p = self.table.take_planned(s)?;
        let w = self.planned_weight.remove(s).unwrap_or(0);
        self.planned_load[p.node] -= w;
        if p.high {
            self.planned_high[p.node] -= 1;
        }
        Some(p)
    }

    fn record_route(&mut self, now: Nanos, s: &SessionId, turn: u32, kind: RouteKind, node: NodeId, reason: RouteReason) {
        self.routing.push(RoutingRecord {
            time: now,
            session: s.clone(),
            turn,
            kind,
            chosen_node: node,
            reason,
        });
    }

    /// Handles an advisory for `turn` of `s`. Only the advisory-driven policy
    /// acts on advisories.
    pub fn on_advisory(&mut self, adv: &AdvisoryRequest, turn: u32, now: Nanos, out: &mut Outbox) -> Result<(), NodeError> {
        if self.policy != Policy::Symphony {
            return Ok(());
        }
        let s = adv.session_id.clone();
        if self.advisory_seen.contains_key(&(s.clone(), turn)) {
            return Ok(());
        }
        self.advisory_seen.insert((s.clone(), turn), now);
        let owner = self.table.owner(&s);
        if turn > 0 && owner.is_none() && !self.inflight.contains_key(&s) {
            self.anomalies.push(format!("advisory for unknown session {s} turn {turn}"));
            return Ok(());
        }
        let high = self.priorities && adv.is_high_priority();
        if let Some(t) = self.inflight.get(&s) {
            let to = t.to;
            let p = Planned { node: to, turn, high, at: now };
            let w = self.plan_weight(&s);
            self.set_plan(&s, p, w);
            self.record_route(now, &s, turn, RouteKind::Advisory, to, RouteReason::InFlight);
            self.trace(now, Some(to), Some(&s), Some(turn), TimelineKind::Advisory);
            return Ok(());
        }
        let view = self.load_view(now);
        let with_planned = self.cfg.scheduler.count_planned;
        let mut adv = adv.clone();
        if !self.priorities {
            adv.priority = None;
        }
        let opts = RouteOpts {
            with_planned,
            locality_slack: self.cfg.scheduler.locality_slack,
        };
        let (target, aug, _) = route_priority(&adv, &view, &self.table, opts);
        let reason = if high { RouteReason::LeastLoadedHigh } else { RouteReason::LeastLoaded };
        let w = self.plan_weight(&s);
        self.set_plan(&s, Planned { node: target, turn, high, at: now }, w);
        self.record_route(now, &s, turn, RouteKind::Advisory, target, reason);
        self.trace(now, Some(target), Some(&s), Some(turn), TimelineKind::Advisory);
        if high {
            for n in &mut self.nodes {
                n.store.set_priority(&s, PriorityClass::High);
            }
        }
        match aug.cache_node {
            None => {}
            Some(o) if o == target => self.promote_local(o, &s, now, high),
            Some(o) => self.fetch_or_defer(&s, o, target, TransferReason::Prefetch, now, out)?,
        }
        Ok(())
    }

    /// Moves a local idle cache toward DEVICE ahead of its request. High
    /// priority promotes every layer; otherwise only blocks of sessions with
    /// no advisory pending here are given up for it.
    fn promote_local(&mut self, n: NodeId, s: &SessionId, now: Nanos, high: bool) {
        if !self.nodes[n].store.entry(s).is_some_and(|e| !e.pinned) {
            return;
        }
        let protect: Option<Vec<SessionId>> = if high {
            Some(Vec::new())
        } else if self.cfg.promote_over_idle {
            Some(
                self.table
                    .planned_entries()
                    .filter(|(id, p)| p.node == n && *id != s)
                    .map(|(id, _)| id.clone())
                    .collect(),
            )
        } else {
            None
        };
        self.nodes[n].store.promote(s, now, protect.as_deref());
    }

    fn plan_weight(&self, s: &SessionId) -> u64 {
        match self.cfg.scheduler.load_metric {
            LoadMetric::Requests => 1,
            LoadMetric::Tokens => self
                .table
                .owner(s)
                .and_then(|o| self.nodes[o].store.total_tokens(s))
                .unwrap_or(0),
        }
    }

    fn fetch_or_defer(
        &mut self,
        s: &SessionId,
        from: NodeId,
        to: NodeId,
        reason: TransferReason,
        now: Nanos,
        out: &mut Outbox,
    ) -> Result<(), NodeError> {
        let pinned = self.nodes[from].store.entry(s).is_some_and(|e| e.pinned);
        if pinned {
            self.deferred.insert(s.clone(), Transfer { from, to, reason });
            Ok(())
        } else {
            self.deferred.remove(s);
            self.on_fetch_request(s, from, to, reason, now, out)
        }
    }

    /// Streams the owner's copy of `s` to `to`. Ownership flips when the last
    /// layer lands.
    pub fn on_fetch_request(
        &mut self,
        s: &SessionId,
        from: NodeId,
        to: NodeId,
        reason: TransferReason,
        now: Nanos,
        out: &mut Outbox,
    ) -> Result<(), NodeError> {
        if self.inflight.contains_key(s) {
            return Err(NodeError::FetchInFlight(s.clone()));
        }
        let owns = self.table.owner(s) == Some(from);
        let Some(tokens) = self.nodes[from].store.total_tokens(s).filter(|_| owns) else {
            return Err(NodeError::NotOwner { node: from, session: s.clone() });
        };
        let prio = self.nodes[from].store.entry(s).map_or(PriorityClass::Normal, |e| e.priority);
        self.nodes[from].store.mark_outgoing(s);
        let got = self.nodes[to].store.accept_remote(s, tokens, prio, from, now, true, reason);
        self.nodes[from].store.note_outgoing(s, to, now, got.complete_at, got.bytes);
        self.inflight.insert(s.clone(), Transfer { from, to, reason });
        out.at(got.complete_at, Payload::TransferComplete { session: s.clone() });
        self.trace(now, Some(to), Some(s), None, TimelineKind::FetchStart { from });
        Ok(())
    }

    pub fn on_transfer_complete(&mut self, s: &SessionId, now: Nanos, out: &mut Outbox) -> Result<(), NodeError> {
        let Some(t) = self.inflight.remove(s) else {
            return Ok(());
        };
        self.trace(now, Some(t.to), Some(s), None, TimelineKind::TransferComplete { from: t.from });
        self.nodes[t.from].store.release_session(s);
        if self.ended.remove(s) {
            self.nodes[t.to].store.release_session(s);
            self.table.clear_owner(s);
        } else {
            self.table.set_owner(s, t.to);
            let high = self.table.planned(s).is_some_and(|p| p.high);
            self.promote_local(t.to, s, now, high);
        }
        self.kick(t.from, now, out)?;
        self.kick(t.to, now, out)
    }

    /// Routes an inference request and queues it on its node.
    pub fn on_inference(
        &mut self,
        script: &SessionScript,
        turn: u32,
        now: Nanos,
        out: &mut Outbox,
    ) -> Result<ReqId, NodeError> {
        let s = script.session_id.clone();
        let t = &script.turns[turn as usize];
        let id = self.requests.len();
        let high = self.priorities && script.priority_class == PriorityClass::High;
        let prio = if high { PriorityClass::High } else { PriorityClass::Normal };
        self.requests.push(ActiveRequest::new(
            id,
            s.clone(),
            turn,
            prio,
            t.prompt_tokens,
            script.history_tokens(turn as usize),
            t.response_tokens,
            now,
        ));
        self.requests[id].class = script.priority_class;
        if let Some(&at) = self.advisory_seen.get(&(s.clone(), turn)) {
            self.leads.push((now - at).as_secs_f64());
        }
        let with_planned = self.cfg.scheduler.count_planned;
        let view = self.load_view(now);
        let (mut node, mut reason) = route_inference(&s, turn, &self.table, &view, self.policy, with_planned);
        if self.policy == Policy::Symphony {
            self.clear_plan(&s);
            if let Some(tr) = self.inflight.get(&s) {
                if reason != RouteReason::Planned || tr.to != node {
                    node = tr.to;
                    reason = RouteReason::InFlight;
                }
            } else if let Some(d) = self.deferred.get(&s) {
                if reason != RouteReason::Planned || d.to != node {
                    let d = Transfer { to: node, ..d.clone() };
                    self.deferred.insert(s.clone(), d);
                }
            } else if turn > 0 {
                match self.table.owner(&s) {
                    Some(o) if o != node => self.fetch_or_defer(&s, o, node, TransferReason::Demand, now, out)?,
                    Some(_) => {}
                    None => self.table.set_owner(&s, node),
                }
            }
            if turn == 0 {
                self.table.set_owner(&s, node);
            }
        } else if self.policy.sticky() && (turn == 0 || self.table.owner(&s).is_none()) {
            self.table.set_owner(&s, node);
        }
        if high {
            self.nodes[node].store.set_priority(&s, PriorityClass::High);
        }
        self.requests[id].node = node;
        self.record_route(now, &s, turn, RouteKind::Inference, node, reason);
        self.trace(now, Some(node), Some(&s), Some(turn), TimelineKind::Arrival);
        self.nodes[node].engine.enqueue(id, &self.requests);
        self.log_load(node, now);
        self.kick(node, now, out)?;
        Ok(id)
    }

    /// Starts the node's next quantum if it is idle, or schedules a wake-up
    /// for when blocked admissions might succeed.
    pub fn kick(&mut self, n: NodeId, now: Nanos, out: &mut Outbox) -> Result<(), NodeError> {
        if !self.nodes[n].engine.is_idle() {
            return Ok(());
        }
        let not_ready: BTreeSet<SessionId> = {
            let node = &self.nodes[n];
            node.engine
                .waiting()
                .iter()
                .map(|&r| &self.requests[r].session_id)
                .filter(|s| !node.store.contains(s) && (self.deferred.contains_key(*s) || self.inflight.contains_key(*s)))
                .cloned()
                .collect()
        };
        let protected: Vec<SessionId> = self
            .table
            .planned_entries()
            .filter(|(_, p)| p.node == n)
            .map(|(id, _)| id.clone())
            .collect();
        let mut lost = Vec::new();
        let node = &mut self.nodes[n];
        let started = {
            let mut ctx = EngineCtx {
                store: &mut node.store,
                cost: &node.cost,
                requests: &mut self.requests,
                not_ready: &|s| not_ready.contains(s),
                lost: &mut lost,
                protected: &protected,
            };
            node.engine.try_start(now, &mut ctx)?
        };
        let blocked = node.engine.is_blocked();
        let has_waiting = !node.engine.waiting().is_empty();
        let staged_at = node.engine.next_staged_start();
        let next = match (node.store.next_change_after(now), staged_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        for s in lost {
            self.note_lost(n, s, now);
        }
        match started {
            Some(end) => {
                out.at(end, Payload::EngineStep { node: n });
                let q = self.nodes[n].engine.quantum().expect("just started").clone();
                if let Some(p) = q.prefill {
                    let r = &self.requests[p];
                    let (s, turn) = (r.session_id.clone(), r.turn_index);
                    self.trace(now, Some(n), Some(&s), Some(turn), TimelineKind::Admit);
                }
                self.trace(now, Some(n), None, None, TimelineKind::QuantumStart { end, decoders: q.decoders.len() as u32 });
            }
            None if blocked || has_waiting || staged_at.is_some() => {
                if let Some(t) = next {
                    let node = &mut self.nodes[n];
                    if node.wake_at.is_none_or(|w| w <= now || t < w) {
                        node.wake_at = Some(t);
                        out.at(t, Payload::EngineWake { node: n });
                    }
                }
            }
            None => {}
        }
        Ok(())
    }

    fn note_lost(&mut self, n: NodeId, s: SessionId, now: Nanos) {
        self.trace(now, Some(n), Some(&s), None, TimelineKind::CacheLost);
        self.lost.push((now, n, s));
    }

    pub fn on_wake(&mut self, n: NodeId, now: Nanos, out: &mut Outbox) -> Result<(), NodeError> {
        if self.nodes[n].wake_at == Some(now) {
            self.nodes[n].wake_at = None;
        }
        self.kick(n, now, out)
    }

    /// Applies the end of a quantum on node `n`.
    pub fn on_engine_step(&mut self, n: NodeId, now: Nanos, out: &mut Outbox) -> Result<(), NodeError> {
        let mut lost = Vec::new();
        let node = &mut self.nodes[n];
        let fx = {
            let never = |_: &SessionId| false;
            let mut ctx = EngineCtx {
                store: &mut node.store,
                cost: &node.cost,
                requests: &mut self.requests,
                not_ready: &never,
                lost: &mut lost,
                protected: &[],
            };
            node.engine.complete_quantum(now, &mut ctx)?
        };
        for &r in &fx.first_tokens {
            let (s, t) = (self.requests[r].session_id.clone(), self.requests[r].turn_index);
            self.trace(now, Some(n), Some(&s), Some(t), TimelineKind::FirstToken);
        }
        for &r in &fx.finished {
            let (s, t) = (self.requests[r].session_id.clone(), self.requests[r].turn_index);
            debug_assert_eq!(self.requests[r].phase, Phase::Finished);
            self.trace(now, Some(n), Some(&s), Some(t), TimelineKind::Finish);
            match self.policy {
                Policy::Recompute => self.nodes[n].store.release_session(&s),
                Policy::Swap => {
                    let dropped = self.nodes[n].store.offload_to_host(&s, now);
                    lost.extend(dropped);
                }
                Policy::Retain => {}
                Policy::Symphony => {
                    if let Some(d) = self.deferred.remove(&s) {
                        if self.table.owner(&s) == Some(n) {
                            self.on_fetch_request(&s, n, d.to, d.reason, now, out)?;
                            self.kick(d.to, now, out)?;
                        }
                    }
                }
            }
        }
        for s in lost {
            self.note_lost(n, s, now);
        }
        out.first_tokens.extend(&fx.first_tokens);
        out.finished.extend(&fx.finished);
        if !fx.finished.is_empty() {
            self.log_load(n, now);
        }
        self.kick(n, now, out)
    }

    /// Drops every copy of a finished session.
    pub fn on_session_end(&mut self, s: &SessionId, now: Nanos, out: &mut Outbox) -> Result<(), NodeError> {
        self.clear_plan(s);
        self.deferred.remove(s);
        if self.inflight.contains_key(s) {
            self.ended.insert(s.clone());
            return Ok(());
        }
        self.table.clear_owner(s);
        for n in 0..self.nodes.len() {
            if self.nodes[n].store.contains(s) {
                self.nodes[n].store.release_session(s);
                self.kick(n, now, out)?;
            }
        }
        Ok(())
    }

    /// Sessions held (not handed off) by more than one node.
    pub fn single_owner_violations(&self) -> Vec<SessionId> {
        let mut count: BTreeMap<&SessionId, u32> = BTreeMap::new();
        for n in &self.nodes {
            for s in n.resident() {
                *count.entry(s).or_default() += 1;
            }
        }
        count.into_iter().filter(|&(_, c)| c > 1).map(|(s, _)| s.clone()).collect()
    }

    pub fn check_invariants(&self, now: Nanos) -> Result<(), String> {
        for n in &self.nodes {
            n.store.check_invariants(now).map_err(|e| format!("node {}: {e}", n.id))?;
        }
        let multi = self.single_owner_violations();
        if !multi.is_empty() {
            return Err(format!("sessions resident on several nodes: {multi:?}"));
        }
        if self.policy == Policy::Symphony {
            // A first turn takes ownership on arrival and creates its cache
            // on admission.
            let queued: BTreeSet<&SessionId> = self
                .nodes
                .iter()
                .flat_map(|n| n.engine.waiting().iter().map(|&r| &self.requests[r].session_id))
                .collect();
            for (s, &o) in self.table.owners() {
                if !self.inflight.contains_key(s) && !queued.contains(s) && !self.nodes[o].store.contains(s) {
                    return Err(format!("owner {o} of {s} holds no copy"));
                }
            }
        }
        Ok(())
    }

    /// Short description of nodes with queued work, for stall diagnostics.
    pub fn stuck_summary(&self, now: Nanos) -> String {
        let mut parts = Vec::new();
        for n in &self.nodes {
            let w = n.engine.waiting();
            if n.engine.load() == 0 {
                continue;
            }
            parts.push(format!(
                "node {}: waiting {:?} staged {} batch {} blocked {} device free {} next change {:?}",
                n.id,
                w.iter().map(|&r| &self.requests[r].session_id).collect::<Vec<_>>(),
                n.engine.staged().count(),
                n.engine.batch().len(),
                n.engine.is_blocked(),
                n.store.device_free(),
                n.store.next_change_after(now)
            ));
        }
        if !self.deferred.is_empty() {
            parts.push(format!("deferred fetches {:?}", self.deferred.keys().collect::<Vec<_>>()));
        }
        parts.join("; ")
    }
}
