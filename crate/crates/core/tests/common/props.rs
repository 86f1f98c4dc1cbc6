//! Randomized invariant suites. Each runs a fixed number of cases from a
//! deterministic seed and reports the first counterexample.

use kvsim::config::{ClusterConfig, Policy};
use kvsim::costmodel::{CostModel, GpuProfile, LinkProfile};
use kvsim::kvstore::{
    evict_cmp, evict_order, plan_layerwise_load, BlockKey, BlockMeta, KvStore, StoreConfig, Tier, TransferReason,
};
use kvsim::scheduler::{RouteKind, RouteReason};
use kvsim::simcore::{run, RunOptions, RunOutput};
use kvsim::time::Nanos;
use kvsim::workload::{
    assign_priorities, inject_advisories, synthesize_arrivals, synthetic::SyntheticSpec, ArrivalOptions,
    PriorityClass, SessionId, Trace,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use std::collections::BTreeMap;

pub const CASES: u32 = 1000;

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: [Suite; 9] = [
    ("durability", durability),
    ("tier capacity", tier_capacity),
    ("single owner", single_owner),
    ("plan follow", plan_follow),
    ("eviction order", eviction_order),
    ("pipeline plan", pipeline_plan),
    ("determinism", determinism),
    ("token conservation", token_conservation),
    ("purge skips pinned", purge_skips_pinned),
];

fn runner() -> TestRunner {
    let cfg = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Store operation sequences

#[derive(Clone, Debug)]
enum Op {
    Append(u8, u32),
    Pin(u8),
    Unpin(u8),
    Load(u8),
    Purge(u64),
    Offload(u8),
    Promote(u8, bool),
    Release(u8),
    Advance(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..6u8, 1..80u32).prop_map(|(s, n)| Op::Append(s, n)),
        2 => (0..6u8).prop_map(Op::Pin),
        2 => (0..6u8).prop_map(Op::Unpin),
        2 => (0..6u8).prop_map(Op::Load),
        3 => (1..200_000u64).prop_map(Op::Purge),
        1 => (0..6u8).prop_map(Op::Offload),
        2 => (0..6u8, any::<bool>()).prop_map(|(s, p)| Op::Promote(s, p)),
        1 => (0..6u8).prop_map(Op::Release),
        4 => (1..20_000_000u64).prop_map(Op::Advance),
    ]
}

#[derive(Clone, Debug)]
struct StoreCase {
    hbm_blocks: u64,
    host_blocks: u64,
    persist: bool,
    ops: Vec<Op>,
}

fn store_case() -> impl Strategy<Value = StoreCase> {
    (8..120u64, 0..80u64, prop::bool::weighted(0.8), prop::collection::vec(op(), 1..60)).prop_map(
        |(hbm_blocks, host_blocks, persist, ops)| StoreCase {
            hbm_blocks,
            host_blocks,
            persist,
            ops,
        },
    )
}

/// 4 layers of 16-token blocks at 1000 bytes per token: 4000-byte blocks.
fn tiny_store(c: &StoreCase) -> KvStore {
    let gpu = GpuProfile {
        kv_bytes_per_token: 1000,
        num_layers: 4,
        hbm_capacity: c.hbm_blocks * 4000,
        ..GpuProfile::default()
    };
    let link = LinkProfile {
        pcie_bandwidth: 1e9,
        disk_bandwidth: 2e8,
        network_bandwidth: 1e9,
        per_transfer_latency: 1e-5,
    };
    let cfg = StoreConfig {
        host_capacity: c.host_blocks * 4000,
        persist: c.persist,
        ..StoreConfig::default()
    };
    KvStore::new(0, cfg, CostModel::new(gpu, link).unwrap())
}

fn sid(i: u8) -> SessionId {
    SessionId::new(format!("s{i}"))
}

/// Observations made after every operation of a case.
trait Observer {
    fn before(&mut self, _store: &KvStore, _op: &Op, _now: Nanos) {}
    fn after(&mut self, store: &KvStore, op: &Op, now: Nanos) -> Result<(), String>;
}

fn apply_ops(c: &StoreCase, obs: &mut dyn Observer) -> Result<(), String> {
    let mut store = tiny_store(c);
    let mut now = Nanos::ZERO;
    for op in &c.ops {
        obs.before(&store, op, now);
        match *op {
            Op::Append(i, n) => {
                let s = sid(i);
                store.create(&s, PriorityClass::Normal, now);
                let e = store.entry(&s).unwrap();
                if e.fully_on_device() {
                    let need = store.device_shortfall_for(&s, e.tokens + n as u64);
                    if need <= store.device_free() {
                        store.reserve_device(&s, need).map_err(|e| e.to_string())?;
                        store.append_blocks(&s, n as u64, now).map_err(|e| e.to_string())?;
                    }
                }
            }
            Op::Pin(i) => {
                if store.entry(&sid(i)).is_some_and(|e| e.fully_on_device()) {
                    store.pin(&sid(i), now);
                }
            }
            Op::Unpin(i) => {
                store.unpin(&sid(i), now);
                store.release_reservation(&sid(i));
            }
            Op::Load(i) => {
                let s = sid(i);
                if let Some(e) = store.entry(&s) {
                    let tokens = e.tokens;
                    let need = store.device_shortfall_for(&s, tokens);
                    let whole = e.layers.iter().all(|l| l.dev >= e.blocks || l.host >= e.blocks || l.disk >= e.blocks);
                    if whole && need <= store.device_free() {
                        store.reserve_device(&s, need).map_err(|e| e.to_string())?;
                        store.load_to_device(&s, now, TransferReason::Demand).map_err(|e| e.to_string())?;
                    }
                }
            }
            Op::Purge(bytes) => {
                store.purge_from_device(bytes, now, &[]);
            }
            Op::Offload(i) => {
                if store.entry(&sid(i)).is_some_and(|e| !e.pinned) {
                    store.offload_to_host(&sid(i), now);
                }
            }
            Op::Promote(i, purge) => {
                if store.entry(&sid(i)).is_some_and(|e| !e.pinned) {
                    store.promote(&sid(i), now, purge.then_some(&[][..]));
                }
            }
            Op::Release(i) => {
                if store.entry(&sid(i)).is_some_and(|e| !e.pinned) {
                    store.release_session(&sid(i));
                }
            }
            Op::Advance(dt) => {
                now += Nanos(dt);
                store.settle(now);
            }
        }
        obs.after(&store, op, now)?;
    }
    Ok(())
}

/// Once a block's disk write has landed, DISK keeps it for as long as the
/// session lives on the node.
struct Durable {
    persisted: BTreeMap<(SessionId, usize), u32>,
}

impl Observer for Durable {
    fn after(&mut self, store: &KvStore, op: &Op, now: Nanos) -> Result<(), String> {
        if let Op::Release(i) = op {
            if !store.contains(&sid(*i)) {
                self.persisted.retain(|(s, _), _| *s != sid(*i));
            }
        }
        for (s, e) in store.sessions() {
            for (i, l) in e.layers.iter().enumerate() {
                let seen = self.persisted.entry((s.clone(), i)).or_default();
                let landed = if l.disk_ready() <= now { l.disk } else { l.persisted };
                if landed < *seen {
                    return Err(format!("{s} layer {i}: {landed} blocks on disk after {seen} at {now}"));
                }
                if l.disk < l.persisted {
                    return Err(format!("{s} layer {i}: persisted count above disk count"));
                }
                *seen = landed;
            }
        }
        store.check_invariants(now)
    }
}

fn durability() -> Result<(), String> {
    check(store_case(), |c| {
        let mut obs = Durable {
            persisted: BTreeMap::new(),
        };
        apply_ops(&c, &mut obs).map_err(TestCaseError::fail)
    })
}

/// Independent recount of every tier against its capacity.
struct Capacity;

impl Observer for Capacity {
    fn after(&mut self, store: &KvStore, _op: &Op, _now: Nanos) -> Result<(), String> {
        let bb = store.block_bytes();
        let mut used = [0u64; 3];
        for (_, e) in store.sessions() {
            used[0] += e.device_blocks() * bb + e.reserved;
            used[1] += e.host_blocks() * bb;
            used[2] += e.disk_blocks() * bb;
        }
        for (k, t) in Tier::ALL.into_iter().enumerate() {
            let b = store.budget(t);
            if used[k] > b.capacity {
                return Err(format!("{t}: {} bytes held, capacity {}", used[k], b.capacity));
            }
            if used[k] != b.used {
                return Err(format!("{t}: {} bytes held, budget says {}", used[k], b.used));
            }
        }
        Ok(())
    }
}

fn tier_capacity() -> Result<(), String> {
    check(store_case(), |c| apply_ops(&c, &mut Capacity).map_err(TestCaseError::fail))
}

/// A purge leaves every pinned session's DEVICE blocks where they were.
struct PinnedGuard {
    snapshot: Vec<(SessionId, Vec<u32>)>,
}

impl Observer for PinnedGuard {
    fn before(&mut self, store: &KvStore, _op: &Op, _now: Nanos) {
        self.snapshot = store
            .sessions()
            .filter(|(_, e)| e.pinned)
            .map(|(s, e)| (s.clone(), e.layers.iter().map(|l| l.dev).collect()))
            .collect();
    }

    fn after(&mut self, store: &KvStore, op: &Op, _now: Nanos) -> Result<(), String> {
        if !matches!(op, Op::Purge(_) | Op::Promote(_, true)) {
            return Ok(());
        }
        for (s, dev) in &self.snapshot {
            let e = store.entry(s).ok_or_else(|| format!("pinned {s} vanished"))?;
            let now: Vec<u32> = e.layers.iter().map(|l| l.dev).collect();
            if &now != dev || !e.pinned {
                return Err(format!("{op:?} changed pinned {s}: {dev:?} -> {now:?}"));
            }
        }
        if store.pinned_purge_violations() > 0 {
            return Err("purge visited a pinned session".into());
        }
        Ok(())
    }
}

fn purge_skips_pinned() -> Result<(), String> {
    check(store_case(), |c| {
        let mut obs = PinnedGuard { snapshot: Vec::new() };
        apply_ops(&c, &mut obs).map_err(TestCaseError::fail)
    })
}

// ---------------------------------------------------------------------------
// Eviction order and pipeline plans

fn blocks() -> impl Strategy<Value = Vec<BlockMeta>> {
    prop::collection::btree_set((0..4u8, 0..8u32, 0..6u32), 1..60).prop_flat_map(|keys| {
        let n = keys.len();
        // Session sizes are a per-session property.
        (Just(keys), prop::collection::vec(1..5u64, 4), Just(n))
            .prop_map(|(keys, sizes, _)| {
                keys.into_iter()
                    .map(|(s, layer, b)| BlockMeta {
                        key: BlockKey {
                            session_id: sid(s),
                            layer,
                            block_index: b,
                        },
                        bytes: 4000,
                        residency: vec![Tier::Device, Tier::Disk],
                        session_bytes: sizes[s as usize] * 1_000_000,
                        pinned: false,
                    })
                    .collect::<Vec<_>>()
            })
            .prop_shuffle()
    })
}

fn eviction_order() -> Result<(), String> {
    check((blocks(), any::<prop::sample::Index>()), |(v, pick)| {
        let order = evict_order(v.clone()).unwrap();
        let mut reversed = v.clone();
        reversed.reverse();
        prop_assert_eq!(&evict_order(reversed).unwrap(), &order);
        for w in order.windows(2) {
            prop_assert_eq!(evict_cmp(&w[0], &w[1]), std::cmp::Ordering::Less);
        }
        // The contract spelled out as a key: later layer, smaller session,
        // higher block index, smaller id.
        let mut oracle = v.clone();
        oracle.sort_by_key(|b| {
            (
                std::cmp::Reverse(b.key.layer),
                b.session_bytes,
                std::cmp::Reverse(b.key.block_index),
                b.key.session_id.clone(),
            )
        });
        prop_assert_eq!(&oracle, &order);
        let mut pinned = v.clone();
        pinned[pick.index(v.len())].pinned = true;
        prop_assert!(evict_order(pinned).is_err());
        Ok(())
    })
}

/// Longest path through the grid of (load, compute) dependencies,
/// enumerated over the layer at which the critical path leaves the load
/// chain.
fn max_plus_finish(ready: &[u64], c: u64, at: u64) -> u64 {
    let l = ready.len() as u64;
    let mut best = at + l * c;
    for (i, &r) in ready.iter().enumerate() {
        best = best.max(r + (l - i as u64) * c);
    }
    best
}

fn pipeline_plan() -> Result<(), String> {
    let case = (prop::collection::vec(0..5_000u64, 1..40), 0..300u64, 0..3_000u64, any::<bool>());
    check(case, |(mut ready, c, at, sorted)| {
        if sorted {
            ready.sort();
        }
        let as_nanos: Vec<Nanos> = ready.iter().map(|&r| Nanos(r)).collect();
        let plan = plan_layerwise_load(&as_nanos, Nanos(c), Nanos(at));
        let finish = max_plus_finish(&ready, c, at);
        prop_assert_eq!(plan.finish, Nanos(finish));
        prop_assert_eq!(plan.total_stall, Nanos(finish - at - c * ready.len() as u64));
        prop_assert_eq!(plan.decode_start, Nanos(ready[0].max(at)));
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Whole simulations

#[derive(Clone, Debug)]
pub struct SimCase {
    pub seed: u64,
    pub nodes: usize,
    pub policy: Policy,
    pub sessions: usize,
    pub users: u32,
    pub miss: f64,
    pub high: f64,
    pub hbm_gb: u64,
    pub host_gb: u64,
    pub max_staged: u32,
    pub locality_slack: u64,
}

fn sim_case(policies: &'static [Policy]) -> impl Strategy<Value = SimCase> {
    (
        any::<u64>(),
        1..5usize,
        prop::sample::select(policies),
        2..14usize,
        1..8u32,
        prop_oneof![Just(0.0), 0.0..0.6],
        prop_oneof![Just(0.0), 0.0..0.5],
        3..10u64,
        0..5u64,
        prop_oneof![Just(0u32), 1..3u32],
        0..2u64,
    )
        .prop_map(
            |(seed, nodes, policy, sessions, users, miss, high, hbm_gb, host_gb, max_staged, locality_slack)| SimCase {
                seed,
                nodes,
                policy,
                sessions,
                users,
                miss,
                high,
                hbm_gb,
                host_gb,
                max_staged,
                locality_slack,
            },
        )
}

impl SimCase {
    pub fn trace(&self) -> Trace {
        let spec = SyntheticSpec {
            sessions: self.sessions,
            max_turns: 6,
            prompt_median: 40.0,
            response_median: 12.0,
            max_message_tokens: 200,
            max_session_tokens: 900,
            reading_wpm: 6_000.0,
            typing_wpm: 1_200.0,
            ..SyntheticSpec::default()
        };
        let mut scripts = spec.generate(self.seed);
        assign_priorities(&mut scripts, self.high, self.seed);
        let users = self.users.min(self.sessions as u32);
        let base = synthesize_arrivals(&scripts, users, self.seed, &ArrivalOptions::default()).unwrap();
        inject_advisories(&base, self.miss, self.seed)
    }

    pub fn config(&self) -> ClusterConfig {
        let mut cfg = ClusterConfig {
            nodes: self.nodes,
            ..ClusterConfig::default()
        };
        cfg.gpu.hbm_capacity = self.hbm_gb * 1_000_000_000;
        cfg.store.host_capacity = self.host_gb * 1_000_000_000;
        cfg.engine.max_staged = self.max_staged;
        cfg.scheduler.locality_slack = self.locality_slack;
        cfg
    }

    pub fn run(&self, audit: bool, timeline: bool) -> Result<RunOutput, String> {
        run(&self.trace(), &self.config(), self.policy, &RunOptions { timeline, audit }).map_err(|e| e.to_string())
    }
}

const EVERY: &[Policy] = &Policy::ALL;
const SYMPHONY: &[Policy] = &[Policy::Symphony];

fn single_owner() -> Result<(), String> {
    // Audit mode checks after every event that no session is resident on
    // two nodes and that the routing table points at a holder.
    check(sim_case(EVERY), |c| c.run(true, false).map(|_| ()).map_err(TestCaseError::fail))
}

fn plan_follow() -> Result<(), String> {
    check(sim_case(SYMPHONY), |c| {
        let out = c.run(false, false).map_err(TestCaseError::fail)?;
        let mut planned: BTreeMap<(SessionId, u32), usize> = BTreeMap::new();
        let mut followed = 0;
        for r in &out.routing {
            match r.kind {
                RouteKind::Advisory => {
                    planned.insert((r.session.clone(), r.turn), r.chosen_node);
                }
                RouteKind::Inference => match planned.get(&(r.session.clone(), r.turn)) {
                    Some(&n) => {
                        prop_assert_eq!(n, r.chosen_node, "{} turn {}", r.session, r.turn);
                        prop_assert_eq!(r.reason, RouteReason::Planned);
                        followed += 1;
                    }
                    None if r.turn > 0 => prop_assert_eq!(r.reason, RouteReason::Miss),
                    None => {}
                },
            }
        }
        prop_assert_eq!(followed, planned.len());
        Ok(())
    })
}

fn determinism() -> Result<(), String> {
    check(sim_case(EVERY), |c| {
        let bytes = |o: RunOutput| {
            serde_json::to_vec(&(&o.report, &o.requests, &o.timeline, &o.routing, &o.transfers)).unwrap()
        };
        let a = bytes(c.run(false, true).map_err(TestCaseError::fail)?);
        let b = bytes(c.run(false, true).map_err(TestCaseError::fail)?);
        prop_assert!(a == b, "two runs differ");
        Ok(())
    })
}

fn token_conservation() -> Result<(), String> {
    check(sim_case(EVERY), |c| {
        let trace = c.trace();
        let out = c.run(false, false).map_err(TestCaseError::fail)?;
        prop_assert_eq!(out.requests.len(), trace.total_turns());
        let mut prefill = 0;
        for r in &out.requests {
            let s = trace.session(&SessionId::new(r.session.clone())).unwrap();
            let turn = &s.turns[r.turn as usize];
            let history = s.history_tokens(r.turn as usize);
            prop_assert_eq!(r.out_tokens, turn.response_tokens);
            prop_assert_eq!(r.decode_steps, r.out_tokens);
            prop_assert_eq!(r.prefill_tokens - r.redundant_tokens, turn.prompt_tokens as u64);
            prop_assert!(r.redundant_tokens == 0 || r.redundant_tokens == history);
            if c.policy == Policy::Recompute {
                prop_assert_eq!(r.redundant_tokens, history);
            }
            prefill += r.prefill_tokens;
        }
        prop_assert_eq!(out.report.total_prefill_tokens, prefill);
        Ok(())
    })
}
