//! Continuous-batching engine for one node.
//!
//! The engine advances in quanta. A quantum runs at most one prefill
//! (stretched by any cache-load stall) followed by one decode step over the
//! running batch, newly prefilled request included. Every decode step yields
//! one token per participating request.
//!
//! A request whose cache must first stream onto the device is staged: its
//! memory is reserved and the load started, and its prefill begins once the
//! load plan can run without stalling. Other work proceeds meanwhile.

use crate::config::{EngineConfig, Interleave, Policy};
use crate::costmodel::{CostError, CostModel};
use crate::kvstore::{plan_blocking_load, plan_layerwise_load, KvStore, NodeId, StoreError, TransferReason};
use crate::time::Nanos;
use crate::workload::{PriorityClass, SessionId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ReqId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("node {node}: request needs {needed} device bytes but the device holds {capacity}")]
    DeviceTooSmall { node: NodeId, needed: u64, capacity: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WaitingPrefill,
    Prefilling,
    Decoding,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveRequest {
    pub id: ReqId,
    pub session_id: SessionId,
    pub turn_index: u32,
    pub node: NodeId,
    pub phase: Phase,
    /// Scheduling priority; normal whenever priorities are disabled.
    pub priority: PriorityClass,
    /// The class the workload declared, kept for reporting.
    pub class: PriorityClass,
    pub prompt_tokens: u32,
    /// Tokens of all earlier turns.
    pub history_tokens: u64,
    pub generated_tokens: u32,
    pub target_tokens: u32,
    pub arrival: Nanos,
    pub admit_time: Option<Nanos>,
    pub first_token_time: Option<Nanos>,
    pub finish_time: Option<Nanos>,
    pub prefill_tokens: u64,
    pub redundant_tokens: u64,
    pub prefill_compute: Nanos,
    pub load_stall: Nanos,
    /// Time spent staged while the cache streamed in.
    pub load_wait: Nanos,
    pub decode_steps: u32,
    pub paused_steps: u32,
}

impl ActiveRequest {
    pub fn new(
        id: ReqId,
        session_id: SessionId,
        turn_index: u32,
        priority: PriorityClass,
        prompt_tokens: u32,
        history_tokens: u64,
        target_tokens: u32,
        arrival: Nanos,
    ) -> Self {
        ActiveRequest {
            id,
            session_id,
            turn_index,
            node: 0,
            phase: Phase::WaitingPrefill,
            priority,
            class: priority,
            prompt_tokens,
            history_tokens,
            generated_tokens: 0,
            target_tokens,
            arrival,
            admit_time: None,
            first_token_time: None,
            finish_time: None,
            prefill_tokens: 0,
            redundant_tokens: 0,
            prefill_compute: Nanos::ZERO,
            load_stall: Nanos::ZERO,
            load_wait: Nanos::ZERO,
            decode_steps: 0,
            paused_steps: 0,
        }
    }

    /// Cache tokens once this turn completes.
    pub fn final_tokens(&self) -> u64 {
        self.history_tokens + self.prompt_tokens as u64 + self.target_tokens as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantum {
    pub start: Nanos,
    pub end: Nanos,
    pub prefill: Option<ReqId>,
    pub decoders: Vec<ReqId>,
}

#[derive(Clone, Debug, PartialEq)]
enum Prepared {
    /// Memory reserved; `ready` holds per-layer device arrival times of the
    /// cache, empty when nothing has to load.
    Ready {
        compute: Nanos,
        ready: Vec<Nanos>,
    },
    Blocked,
}

/// A request with memory reserved whose cache is streaming onto the device.
#[derive(Clone, Debug, PartialEq)]
struct Staged {
    id: ReqId,
    since: Nanos,
    start_at: Nanos,
    compute: Nanos,
    ready: Vec<Nanos>,
}

/// What the engine needs from its node for one call.
pub struct EngineCtx<'a> {
    pub store: &'a mut KvStore,
    pub cost: &'a CostModel,
    pub requests: &'a mut [ActiveRequest],
    /// Sessions whose cache is elsewhere and not yet on its way here.
    pub not_ready: &'a dyn Fn(&SessionId) -> bool,
    /// Sessions whose caches were dropped to make room.
    pub lost: &'a mut Vec<SessionId>,
    /// Idle sessions expected back soon; purged only when nothing else frees
    /// enough memory.
    pub protected: &'a [SessionId],
}

#[derive(Clone, Debug)]
pub struct Engine {
    pub node: NodeId,
    cfg: EngineConfig,
    policy: Policy,
    priorities: bool,
    waiting: Vec<ReqId>,
    staged: Vec<Staged>,
    batch: Vec<ReqId>,
    quantum: Option<Quantum>,
    steps_since_prefill: u32,
    blocked: bool,
}

impl Engine {
    pub fn new(node: NodeId, cfg: EngineConfig, policy: Policy, priorities: bool) -> Self {
        Engine {
            node,
            cfg,
            policy,
            priorities,
            waiting: Vec::new(),
            staged: Vec::new(),
            batch: Vec::new(),
            quantum: None,
            steps_since_prefill: 0,
            blocked: false,
        }
    }

    pub fn waiting(&self) -> &[ReqId] {
        &self.waiting
    }

    pub fn batch(&self) -> &[ReqId] {
        &self.batch
    }

    /// Requests holding memory while their cache streams in.
    pub fn staged(&self) -> impl Iterator<Item = ReqId> + '_ {
        self.staged.iter().map(|s| s.id)
    }

    /// Every request on this node: queued, staged and running.
    pub fn all_requests(&self) -> impl Iterator<Item = ReqId> + '_ {
        self.waiting.iter().copied().chain(self.staged()).chain(self.batch.iter().copied())
    }

    /// Earliest time a staged request can start its prefill.
    pub fn next_staged_start(&self) -> Option<Nanos> {
        self.staged.iter().map(|s| s.start_at).min()
    }

    pub fn quantum(&self) -> Option<&Quantum> {
        self.quantum.as_ref()
    }

    pub fn is_blocked(&self) -> bool {
        self.blocked
    }

    pub fn is_idle(&self) -> bool {
        self.quantum.is_none()
    }

    /// Requests admitted or queued on this node.
    pub fn load(&self) -> usize {
        self.waiting.len() + self.staged.len() + self.batch.len()
    }

    pub fn enqueue(&mut self, id: ReqId, requests: &[ActiveRequest]) {
        let high = self.priorities && requests[id].priority == PriorityClass::High;
        let pos = if high {
            self.waiting
                .iter()
                .position(|&w| requests[w].priority != PriorityClass::High)
                .unwrap_or(self.waiting.len())
        } else {
            self.waiting.len()
        };
        self.waiting.insert(pos, id);
    }

    /// Reserves device memory for request `id` and starts loading its cache.
    fn prepare(&mut self, id: ReqId, now: Nanos, ctx: &mut EngineCtx) -> Result<Prepared, EngineError> {
        let r = &ctx.requests[id];
        let s = r.session_id.clone();
        let history = r.history_tokens;
        let has_cache = self.policy.keeps_cache()
            && history > 0
            && ctx.store.entry(&s).is_some_and(|e| e.tokens == history);
        if !has_cache {
            if ctx.store.contains(&s) {
                ctx.store.release_session(&s);
            }
            ctx.store.create(&s, r.priority, now);
        }
        let prefill_tokens = if has_cache {
            r.prompt_tokens as u64
        } else {
            history + r.prompt_tokens as u64
        };
        let need = ctx.store.device_shortfall_for(&s, r.final_tokens());
        let capacity = ctx.store.budget(crate::kvstore::Tier::Device).capacity;
        if need > capacity {
            return Err(EngineError::DeviceTooSmall {
                node: self.node,
                needed: need,
                capacity,
            });
        }
        let free = ctx.store.device_free();
        if need > free {
            let mut deficit = need - free;
            if !ctx.protected.is_empty() {
                let mut exclude = ctx.protected.to_vec();
                exclude.push(s.clone());
                deficit = ctx.store.purge_from_device(deficit, now, &exclude).shortfall;
            }
            if deficit > 0 {
                deficit = ctx.store.purge_from_device(deficit, now, std::slice::from_ref(&s)).shortfall;
            }
            if deficit > 0 && self.policy.sticky() {
                let (freed, lost) = ctx.store.discard_idle(deficit, now, std::slice::from_ref(&s));
                deficit = deficit.saturating_sub(freed);
                ctx.lost.extend(lost);
            }
            if deficit > 0 {
                return Ok(Prepared::Blocked);
            }
        }
        ctx.store.reserve_device(&s, need)?;
        ctx.store.pin(&s, now);
        let compute = ctx.cost.prefill_time(prefill_tokens)?;
        let ready = if has_cache {
            ctx.store.load_to_device(&s, now, TransferReason::Demand)?
        } else {
            Vec::new()
        };
        let r = &mut ctx.requests[id];
        r.node = self.node;
        r.prefill_tokens = prefill_tokens;
        r.redundant_tokens = prefill_tokens - r.prompt_tokens as u64;
        r.prefill_compute = compute;
        Ok(Prepared::Ready { compute, ready })
    }

    fn per_layer(compute: Nanos, ready: &[Nanos]) -> Nanos {
        Nanos(compute.0 / ready.len().max(1) as u64)
    }

    fn plan_stall(&self, compute: Nanos, ready: &[Nanos], at: Nanos) -> Nanos {
        if ready.is_empty() {
            return Nanos::ZERO;
        }
        let per_layer = Self::per_layer(compute, ready);
        if self.policy == Policy::Symphony {
            plan_layerwise_load(ready, per_layer, at).total_stall
        } else {
            plan_blocking_load(ready, per_layer, at).total_stall
        }
    }

    /// Earliest start at which the load plan no longer stalls.
    fn stall_free_start(&self, compute: Nanos, ready: &[Nanos]) -> Nanos {
        if self.policy == Policy::Symphony {
            let per_layer = Self::per_layer(compute, ready);
            ready
                .iter()
                .enumerate()
                .map(|(i, &t)| t.saturating_sub(per_layer * i as u64))
                .max()
                .unwrap_or(Nanos::ZERO)
        } else {
            ready.iter().copied().max().unwrap_or(Nanos::ZERO)
        }
    }

    /// Marks request `id` as prefilling from `now` and returns the prefill's
    /// duration including any residual load stall.
    fn begin_prefill(&self, id: ReqId, now: Nanos, compute: Nanos, ready: &[Nanos], since: Nanos, ctx: &mut EngineCtx) -> Nanos {
        let stall = self.plan_stall(compute, ready, now);
        let r = &mut ctx.requests[id];
        r.phase = Phase::Prefilling;
        r.admit_time = Some(now);
        r.load_stall = stall;
        r.load_wait = now - since;
        compute + stall
    }

    fn pick_decoders(&self, candidates: Vec<ReqId>, ctx: &EngineCtx) -> Result<Vec<ReqId>, EngineError> {
        if !self.priorities || candidates.is_empty() {
            return Ok(candidates);
        }
        let reqs = &*ctx.requests;
        if !candidates.iter().any(|&r| reqs[r].priority == PriorityClass::High) {
            return Ok(candidates);
        }
        let budget = Nanos::from_secs_f64(self.cfg.priority_latency_budget_ms / 1e3);
        let mut kept = candidates;
        while ctx.cost.decode_step_time(kept.len() as u32)? > budget {
            // Pause the most recently admitted normal request.
            let Some(pos) = kept.iter().rposition(|&r| reqs[r].priority != PriorityClass::High) else {
                break;
            };
            kept.remove(pos);
        }
        Ok(kept)
    }

    /// First staged request, in staging order, whose load no longer stalls.
    fn due_staged(&self, now: Nanos) -> Option<usize> {
        self.staged.iter().position(|st| st.start_at <= now)
    }

    /// Starts the next quantum if the engine is idle and has work. Returns the
    /// quantum's end time.
    pub fn try_start(&mut self, now: Nanos, ctx: &mut EngineCtx) -> Result<Option<Nanos>, EngineError> {
        if self.quantum.is_some() {
            return Ok(None);
        }
        self.blocked = false;
        let allow_prefill = match self.cfg.interleave {
            Interleave::Interleave | Interleave::PrefillFirst => true,
            Interleave::DecodeFirst { steps_per_prefill } => {
                self.batch.is_empty() || self.steps_since_prefill >= steps_per_prefill
            }
        };
        let mut prefill = None;
        let mut prefill_dur = Nanos::ZERO;
        let room = ((self.batch.len() + self.staged.len()) as u32) < self.cfg.max_batch;
        if allow_prefill {
            if let Some(k) = self.due_staged(now) {
                let st = self.staged.remove(k);
                prefill_dur = self.begin_prefill(st.id, now, st.compute, &st.ready, st.since, ctx);
                self.batch.push(st.id);
                prefill = Some(st.id);
            }
        }
        if allow_prefill && prefill.is_none() && room {
            let mut i = 0;
            while i < self.waiting.len() {
                let id = self.waiting[i];
                if (ctx.not_ready)(&ctx.requests[id].session_id) {
                    i += 1;
                    continue;
                }
                match self.prepare(id, now, ctx)? {
                    Prepared::Ready { compute, ready } => {
                        self.waiting.remove(i);
                        let start_at = self.stall_free_start(compute, &ready);
                        if start_at > now && (self.staged.len() as u32) < self.cfg.max_staged {
                            self.staged.push(Staged {
                                id,
                                since: now,
                                start_at,
                                compute,
                                ready,
                            });
                            if ((self.batch.len() + self.staged.len()) as u32) < self.cfg.max_batch {
                                continue;
                            }
                            break;
                        }
                        prefill_dur = self.begin_prefill(id, now, compute, &ready, now, ctx);
                        self.batch.push(id);
                        prefill = Some(id);
                    }
                    Prepared::Blocked => self.blocked = true,
                }
                break;
            }
        }
        let decoders = if prefill.is_some() && self.cfg.interleave == Interleave::PrefillFirst {
            Vec::new()
        } else {
            self.pick_decoders(self.batch.clone(), ctx)?
        };
        if prefill.is_none() && decoders.is_empty() {
            return Ok(None);
        }
        let decode_dur = if decoders.is_empty() {
            Nanos::ZERO
        } else {
            ctx.cost.decode_step_time(decoders.len() as u32)?
        };
        for &r in &self.batch {
            if Some(r) != prefill && !decoders.contains(&r) {
                ctx.requests[r].paused_steps += 1;
            }
        }
        let end = now + prefill_dur + decode_dur;
        self.quantum = Some(Quantum {
            start: now,
            end,
            prefill,
            decoders,
        });
        Ok(Some(end))
    }

    /// Applies the running quantum's effects at its end time and returns the
    /// requests that produced their first token and those that finished.
    pub fn complete_quantum(&mut self, now: Nanos, ctx: &mut EngineCtx) -> Result<QuantumEffects, EngineError> {
        let q = self.quantum.take().expect("a quantum is running");
        debug_assert_eq!(q.end, now);
        let mut fx = QuantumEffects::default();
        if let Some(p) = q.prefill {
            let r = &mut ctx.requests[p];
            r.phase = Phase::Decoding;
            let (s, n) = (r.session_id.clone(), r.prefill_tokens);
            ctx.store.append_blocks(&s, n, now)?;
            self.steps_since_prefill = 0;
        }
        if !q.decoders.is_empty() {
            self.steps_since_prefill += 1;
        }
        for &d in &q.decoders {
            let r = &mut ctx.requests[d];
            r.generated_tokens += 1;
            r.decode_steps += 1;
            let s = r.session_id.clone();
            if r.generated_tokens == 1 {
                r.first_token_time = Some(now);
                fx.first_tokens.push(d);
            }
            let done = r.generated_tokens == r.target_tokens;
            if done {
                r.phase = Phase::Finished;
                r.finish_time = Some(now);
            }
            ctx.store.append_blocks(&s, 1, now)?;
            if done {
                ctx.store.unpin(&s, now);
                ctx.store.release_reservation(&s);
                fx.finished.push(d);
            }
        }
        self.batch.retain(|r| !fx.finished.contains(r));
        Ok(fx)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantumEffects {
    pub first_tokens: Vec<ReqId>,
    pub finished: Vec<ReqId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{GpuProfile, LinkProfile};
    use crate::kvstore::StoreConfig;

    fn setup(policy: Policy, hbm: u64) -> (Engine, KvStore, CostModel) {
        let cost = CostModel::new(
            GpuProfile {
                hbm_capacity: hbm,
                ..Default::default()
            },
            LinkProfile::default(),
        )
        .unwrap();
        let store = KvStore::new(0, policy.store_config(&StoreConfig::default()), cost.clone());
        (Engine::new(0, EngineConfig::default(), policy, true), store, cost)
    }

    fn req(id: usize, s: &str, turn: u32, prompt: u32, history: u64, target: u32) -> ActiveRequest {
        ActiveRequest::new(id, SessionId::new(s), turn, PriorityClass::Normal, prompt, history, target, Nanos::ZERO)
    }

    fn never(_: &SessionId) -> bool {
        false
    }

    /// Runs the engine until idle, returning the time it went idle.
    fn drain(engine: &mut Engine, store: &mut KvStore, cost: &CostModel, reqs: &mut [ActiveRequest], mut now: Nanos) -> Nanos {
        let mut lost = Vec::new();
        loop {
            let mut ctx = EngineCtx {
                store,
                cost,
                requests: reqs,
                not_ready: &never,
                lost: &mut lost,
                protected: &[],
            };
            match engine.try_start(now, &mut ctx).unwrap() {
                None => return now,
                Some(end) => {
                    now = end;
                    engine.complete_quantum(now, &mut ctx).unwrap();
                }
            }
        }
    }

    #[test]
    fn recompute_prefills_history() {
        let (mut e, mut st, cost) = setup(Policy::Recompute, 100_000_000_000);
        let mut reqs = vec![req(0, "a", 1, 50, 200, 3)];
        e.enqueue(0, &reqs);
        drain(&mut e, &mut st, &cost, &mut reqs, Nanos::ZERO);
        assert_eq!(reqs[0].prefill_tokens, 250);
        assert_eq!(reqs[0].redundant_tokens, 200);
    }

    #[test]
    fn resident_cache_prefills_prompt_only() {
        let (mut e, mut st, cost) = setup(Policy::Symphony, 100_000_000_000);
        let s = SessionId::new("a");
        st.create(&s, PriorityClass::Normal, Nanos::ZERO);
        st.append_blocks(&s, 200, Nanos::ZERO).unwrap();
        let mut reqs = vec![req(0, "a", 1, 50, 200, 3)];
        e.enqueue(0, &reqs);
        drain(&mut e, &mut st, &cost, &mut reqs, Nanos::from_secs(1));
        assert_eq!(reqs[0].prefill_tokens, 50);
        assert_eq!(reqs[0].redundant_tokens, 0);
        assert_eq!(reqs[0].load_stall, Nanos::ZERO);
    }

    #[test]
    fn batch_of_eight_steps_eighteen_ms() {
        let (mut e, mut st, cost) = setup(Policy::Recompute, 100_000_000_000);
        let mut reqs: Vec<_> = (0..8).map(|i| req(i, &format!("s{i}"), 0, 16, 0, 100)).collect();
        let mut lost = Vec::new();
        let mut now = Nanos::ZERO;
        for i in 0..8 {
            e.enqueue(i, &reqs);
        }
        // Admit all eight, one prefill per quantum.
        for _ in 0..8 {
            let mut ctx = EngineCtx { store: &mut st, cost: &cost, requests: &mut reqs, not_ready: &never, lost: &mut lost, protected: &[] };
            now = e.try_start(now, &mut ctx).unwrap().unwrap();
            e.complete_quantum(now, &mut ctx).unwrap();
        }
        let before: Vec<_> = reqs.iter().map(|r| r.generated_tokens).collect();
        let mut ctx = EngineCtx { store: &mut st, cost: &cost, requests: &mut reqs, not_ready: &never, lost: &mut lost, protected: &[] };
        let end = e.try_start(now, &mut ctx).unwrap().unwrap();
        assert_eq!(end - now, Nanos::from_millis(18));
        e.complete_quantum(end, &mut ctx).unwrap();
        for (r, b) in reqs.iter().zip(before) {
            assert_eq!(r.generated_tokens, b + 1);
        }
    }

    #[test]
    fn empty_engine_schedules_nothing() {
        let (mut e, mut st, cost) = setup(Policy::Symphony, 1_000_000_000);
        let mut reqs: Vec<ActiveRequest> = Vec::new();
        let mut lost = Vec::new();
        let mut ctx = EngineCtx { store: &mut st, cost: &cost, requests: &mut reqs, not_ready: &never, lost: &mut lost, protected: &[] };
        assert_eq!(e.try_start(Nanos::ZERO, &mut ctx).unwrap(), None);
    }

    #[test]
    fn token_conservation_and_first_token() {
        let (mut e, mut st, cost) = setup(Policy::Symphony, 100_000_000_000);
        let mut reqs = vec![req(0, "a", 0, 1024, 0, 5), req(1, "b", 0, 10, 0, 2)];
        e.enqueue(0, &reqs);
        e.enqueue(1, &reqs);
        drain(&mut e, &mut st, &cost, &mut reqs, Nanos::ZERO);
        for r in &reqs {
            assert_eq!(r.generated_tokens, r.target_tokens);
            assert_eq!(r.decode_steps, r.target_tokens);
            assert_eq!(r.phase, Phase::Finished);
        }
        // 1024 tokens prefill in 125 ms, then one decode step of a batch of one.
        assert_eq!(reqs[0].first_token_time, Some(Nanos::from_millis(125) + Nanos::from_micros(12_750)));
    }

    #[test]
    fn too_small_device_is_fatal() {
        let (mut e, mut st, cost) = setup(Policy::Symphony, 1_000_000);
        let mut reqs = vec![req(0, "a", 0, 100, 0, 5)];
        e.enqueue(0, &reqs);
        let mut lost = Vec::new();
        let mut ctx = EngineCtx { store: &mut st, cost: &cost, requests: &mut reqs, not_ready: &never, lost: &mut lost, protected: &[] };
        assert!(matches!(e.try_start(Nanos::ZERO, &mut ctx), Err(EngineError::DeviceTooSmall { .. })));
    }

    #[test]
    fn admission_waits_when_memory_is_pinned() {
        // Room for one request's blocks only.
        let bytes = 2 * 32 * 550_000;
        let (mut e, mut st, cost) = setup(Policy::Symphony, bytes);
        let mut reqs = vec![req(0, "a", 0, 16, 0, 16), req(1, "b", 0, 16, 0, 16)];
        e.enqueue(0, &reqs);
        e.enqueue(1, &reqs);
        let mut lost = Vec::new();
        let mut ctx = EngineCtx { store: &mut st, cost: &cost, requests: &mut reqs, not_ready: &never, lost: &mut lost, protected: &[] };
        let end = e.try_start(Nanos::ZERO, &mut ctx).unwrap().unwrap();
        e.complete_quantum(end, &mut ctx).unwrap();
        e.try_start(end, &mut ctx).unwrap();
        assert!(e.is_blocked());
        assert_eq!(e.waiting(), &[1]);
    }

    #[test]
    fn high_priority_queues_ahead() {
        let (mut e, _, _) = setup(Policy::Symphony, 1);
        let mut reqs = vec![req(0, "a", 0, 1, 0, 1), req(1, "b", 0, 1, 0, 1), req(2, "c", 0, 1, 0, 1)];
        reqs[2].priority = PriorityClass::High;
        for i in 0..3 {
            e.enqueue(i, &reqs);
        }
        assert_eq!(e.waiting(), &[2, 0, 1]);
    }
}
