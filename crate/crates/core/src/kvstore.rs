//! Per-node three-tier (DEVICE/HOST/DISK) K,V block store.
//!
//! A session's cache is `blocks` blocks per layer. Blocks are never tracked
//! one by one: within a (session, layer) every tier holds a prefix of the
//! block indices, because appends, loads and persistence all proceed in index
//! order and eviction proceeds in reverse index order. Transfers are reserved
//! analytically on per-link FIFO queues, so each tier copy carries the time at
//! which it becomes readable.

use crate::costmodel::{CostModel, Link};
use crate::time::Nanos;
use crate::workload::{PriorityClass, SessionId};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Host,
    Disk,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Device, Tier::Host, Tier::Disk];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Device => "device",
            Tier::Host => "host",
            Tier::Disk => "disk",
        })
    }
}

/// Endpoint of a transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Tier(Tier),
    Remote(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferReason {
    Prefetch,
    Demand,
    Purge,
    Persist,
    Migrate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub time: Nanos,
    pub end: Nanos,
    pub node: NodeId,
    pub session: SessionId,
    /// Half-open layer range.
    pub layers: (u32, u32),
    pub from: Location,
    pub to: Location,
    pub bytes: u64,
    pub reason: TransferReason,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub session_id: SessionId,
    pub layer: u32,
    pub block_index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub key: BlockKey,
    pub bytes: u64,
    pub residency: Vec<Tier>,
    /// Total cache bytes of the owning session; second eviction key.
    pub session_bytes: u64,
    pub pinned: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("device over capacity on node {node}: need {needed} bytes, {free} free")]
    DeviceOverCapacity { node: NodeId, needed: u64, free: u64 },
    #[error("session {0} is not resident on this node")]
    UnknownSession(SessionId),
    #[error("session {session} is missing layers {layers:?} at the source")]
    MissingLayers { session: SessionId, layers: Vec<u32> },
    #[error("pinned block {0:?} offered for eviction")]
    PinnedCandidate(BlockKey),
    #[error("fetch of {0} from a node to itself")]
    SelfFetch(SessionId),
    #[error("session {0} already has a fetch in flight")]
    FetchInFlight(SessionId),
    #[error("session {0} is pinned at the source")]
    SourcePinned(SessionId),
}

/// Eviction order: later layers first, then smaller sessions, then higher
/// block indices, then lexicographically smaller session ids.
pub fn evict_cmp(a: &BlockMeta, b: &BlockMeta) -> Ordering {
    b.key
        .layer
        .cmp(&a.key.layer)
        .then(a.session_bytes.cmp(&b.session_bytes))
        .then(b.key.block_index.cmp(&a.key.block_index))
        .then(a.key.session_id.cmp(&b.key.session_id))
}

pub fn evict_order(mut candidates: Vec<BlockMeta>) -> Result<Vec<BlockMeta>, StoreError> {
    if let Some(p) = candidates.iter().find(|b| b.pinned) {
        return Err(StoreError::PinnedCandidate(p.key.clone()));
    }
    candidates.sort_by(evict_cmp);
    Ok(candidates)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadPlan {
    pub at: Nanos,
    pub layer_ready: Vec<Nanos>,
    pub compute_per_layer: Nanos,
    pub decode_start: Nanos,
    pub finish: Nanos,
    pub total_stall: Nanos,
}

/// Layer i may compute once layer i-1 has computed and layer i has loaded.
pub fn plan_layerwise_load(layer_ready: &[Nanos], compute_per_layer: Nanos, at: Nanos) -> LoadPlan {
    let mut end = at;
    for &ready in layer_ready {
        end = end.max(ready) + compute_per_layer;
    }
    let compute = compute_per_layer * layer_ready.len() as u64;
    LoadPlan {
        at,
        layer_ready: layer_ready.to_vec(),
        compute_per_layer,
        decode_start: layer_ready.first().copied().unwrap_or(at).max(at),
        finish: end,
        total_stall: end.saturating_sub(at + compute),
    }
}

/// Non-overlapped load: compute begins only after every layer has arrived.
pub fn plan_blocking_load(layer_ready: &[Nanos], compute_per_layer: Nanos, at: Nanos) -> LoadPlan {
    let last = layer_ready.iter().copied().max().unwrap_or(at).max(at);
    let compute = compute_per_layer * layer_ready.len() as u64;
    LoadPlan {
        at,
        layer_ready: layer_ready.to_vec(),
        compute_per_layer,
        decode_start: last,
        finish: last + compute,
        total_stall: last - at,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub block_tokens: u32,
    pub host_capacity: u64,
    pub disk_capacity: u64,
    /// Write every appended block to DISK in the background.
    pub persist: bool,
    /// Demand transfers overtake queued prefetches on a link.
    pub demand_first: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            block_tokens: 16,
            host_capacity: 64_000_000_000,
            disk_capacity: 1_000_000_000_000,
            persist: true,
            demand_first: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TierBudget {
    pub tier: Option<Tier>,
    pub capacity: u64,
    pub used: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl TierBudget {
    fn new(tier: Tier, capacity: u64) -> Self {
        TierBudget {
            tier: Some(tier),
            capacity,
            ..Default::default()
        }
    }

    pub fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used)
    }

    fn add(&mut self, bytes: u64) {
        self.used += bytes;
        self.bytes_in += bytes;
    }

    fn sub(&mut self, bytes: u64) {
        debug_assert!(self.used >= bytes, "{:?} underflow", self.tier);
        self.used -= bytes;
        self.bytes_out += bytes;
    }
}

#[derive(Clone, Debug, Default)]
struct LinkQueue {
    busy_until: Nanos,
    demand_until: Nanos,
    inflight: VecDeque<(Nanos, Nanos)>,
}

impl LinkQueue {
    fn reserve(&mut self, ready: Nanos, dur: Nanos, demand: bool, demand_first: bool) -> (Nanos, Nanos) {
        while self.inflight.front().is_some_and(|&(_, e)| e <= ready) {
            self.inflight.pop_front();
        }
        let start = if demand && demand_first {
            let current = self
                .inflight
                .iter()
                .filter(|&&(s, e)| s <= ready && e > ready)
                .map(|&(_, e)| e)
                .max()
                .unwrap_or(ready);
            ready.max(current).max(self.demand_until)
        } else {
            ready.max(self.busy_until)
        };
        let end = start + dur;
        if demand {
            self.demand_until = self.demand_until.max(end);
        }
        self.busy_until = self.busy_until.max(end);
        let pos = self.inflight.partition_point(|&(_, e)| e <= end);
        self.inflight.insert(pos, (start, end));
        (start, end)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerState {
    pub dev: u32,
    pub dev_ready: Nanos,
    pub host: u32,
    pub host_ready: Nanos,
    /// Blocks with a disk write scheduled.
    pub disk: u32,
    /// Blocks whose disk write has completed.
    pub persisted: u32,
    pending: VecDeque<(u32, Nanos)>,
}

impl LayerState {
    fn settle(&mut self, now: Nanos) {
        while let Some(&(count, done)) = self.pending.front() {
            if done > now {
                break;
            }
            self.persisted = self.persisted.max(count);
            self.pending.pop_front();
        }
    }

    pub fn disk_ready(&self) -> Nanos {
        self.pending.back().map_or(Nanos::ZERO, |&(_, t)| t)
    }

    /// Blocks that could be dropped from DEVICE without losing data.
    pub fn backed(&self, now: Nanos) -> u32 {
        let host = if self.host_ready <= now { self.host } else { 0 };
        self.persisted.max(host)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionEntry {
    pub tokens: u64,
    pub blocks: u32,
    pub layers: Vec<LayerState>,
    pub pinned: bool,
    /// DEVICE bytes held for blocks not yet created.
    pub reserved: u64,
    pub last_use: Nanos,
    pub priority: PriorityClass,
    /// Completion of an incoming remote copy, if one is in flight.
    pub incoming_until: Option<Nanos>,
    /// Set once the session is being migrated away.
    pub outgoing: bool,
}

impl SessionEntry {
    fn new(layers: u32, priority: PriorityClass, now: Nanos) -> Self {
        SessionEntry {
            tokens: 0,
            blocks: 0,
            layers: vec![LayerState::default(); layers as usize],
            pinned: false,
            reserved: 0,
            last_use: now,
            priority,
            incoming_until: None,
            outgoing: false,
        }
    }

    pub fn fully_on_device(&self) -> bool {
        self.layers.iter().all(|l| l.dev == self.blocks)
    }

    pub fn device_blocks(&self) -> u64 {
        self.layers.iter().map(|l| l.dev as u64).sum()
    }

    pub fn host_blocks(&self) -> u64 {
        self.layers.iter().map(|l| l.host as u64).sum()
    }

    pub fn disk_blocks(&self) -> u64 {
        self.layers.iter().map(|l| l.disk as u64).sum()
    }

    pub fn device_ready_at(&self) -> Nanos {
        self.layers.iter().map(|l| l.dev_ready).max().unwrap_or(Nanos::ZERO)
    }

    fn busy(&self, now: Nanos) -> bool {
        self.pinned
            || self.outgoing
            || self.incoming_until.is_some_and(|t| t > now)
            || self.layers.iter().any(|l| l.dev_ready > now)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PurgeOutcome {
    pub freed: u64,
    pub shortfall: u64,
    /// Unpinned DEVICE bytes that become purgeable once their backing copy lands.
    pub awaiting_backing: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromoteOutcome {
    /// Number of leading layers that are (or will be) fully DEVICE-resident.
    pub prefix_layers: u32,
    pub device_bytes: u64,
    pub staged_bytes: u64,
    pub ready_at: Nanos,
}

/// Result of copying a session to another node.
#[derive(Clone, Debug, PartialEq)]
pub struct FetchOutcome {
    pub layer_ready: Vec<Nanos>,
    pub complete_at: Nanos,
    pub bytes: u64,
}

pub struct KvStore {
    pub node: NodeId,
    cfg: StoreConfig,
    cost: CostModel,
    block_bytes: u64,
    num_layers: u32,
    budgets: [TierBudget; 3],
    links: [LinkQueue; 5],
    sessions: BTreeMap<SessionId, SessionEntry>,
    pub ledger: Vec<TransferRecord>,
    persisted_high_water: BTreeMap<(SessionId, u32), u32>,
    pinned_purge_violations: u64,
}

impl KvStore {
    pub fn new(node: NodeId, cfg: StoreConfig, cost: CostModel) -> Self {
        let block_bytes = crate::costmodel::kv_bytes_per_layer(cfg.block_tokens as u64, &cost.gpu);
        let num_layers = cost.gpu.num_layers;
        let budgets = [
            TierBudget::new(Tier::Device, cost.gpu.hbm_capacity),
            TierBudget::new(Tier::Host, cfg.host_capacity),
            TierBudget::new(Tier::Disk, cfg.disk_capacity),
        ];
        KvStore {
            node,
            cfg,
            cost,
            block_bytes,
            num_layers,
            budgets,
            links: Default::default(),
            sessions: BTreeMap::new(),
            ledger: Vec::new(),
            persisted_high_water: BTreeMap::new(),
            pinned_purge_violations: 0,
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bytes
    }

    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }

    pub fn blocks_for(&self, tokens: u64) -> u32 {
        tokens.div_ceil(self.cfg.block_tokens as u64) as u32
    }

    pub fn budget(&self, tier: Tier) -> &TierBudget {
        &self.budgets[tier.index()]
    }

    pub fn device_free(&self) -> u64 {
        self.budget(Tier::Device).free()
    }

    pub fn entry(&self, s: &SessionId) -> Option<&SessionEntry> {
        self.sessions.get(s)
    }

    pub fn contains(&self, s: &SessionId) -> bool {
        self.sessions.contains_key(s)
    }

    pub fn sessions(&self) -> impl Iterator<Item = (&SessionId, &SessionEntry)> {
        self.sessions.iter()
    }

    /// Bytes a session's full cache occupies in one tier copy.
    pub fn session_bytes(&self, s: &SessionEntry) -> u64 {
        s.blocks as u64 * self.num_layers as u64 * self.block_bytes
    }

    fn record(
        &mut self,
        time: Nanos,
        end: Nanos,
        session: &SessionId,
        layers: (u32, u32),
        from: Location,
        to: Location,
        bytes: u64,
        reason: TransferReason,
    ) {
        if bytes == 0 {
            return;
        }
        self.ledger.push(TransferRecord {
            time,
            end,
            node: self.node,
            session: session.clone(),
            layers,
            from,
            to,
            bytes,
            reason,
        });
    }

    fn reserve_link(&mut self, link: Link, ready: Nanos, bytes: u64, demand: bool) -> (Nanos, Nanos) {
        let dur = self.cost.transfer_time(bytes, link);
        let demand_first = self.cfg.demand_first;
        self.links[link.index()].reserve(ready, dur, demand, demand_first)
    }

    /// Applies completed disk writes.
    pub fn settle(&mut self, now: Nanos) {
        for (id, e) in self.sessions.iter_mut() {
            for (i, l) in e.layers.iter_mut().enumerate() {
                let before = l.persisted;
                l.settle(now);
                if l.persisted > before {
                    let hw = self
                        .persisted_high_water
                        .entry((id.clone(), i as u32))
                        .or_default();
                    *hw = (*hw).max(l.persisted);
                }
            }
            if e.incoming_until.is_some_and(|t| t <= now) {
                e.incoming_until = None;
            }
        }
    }

    pub fn create(&mut self, s: &SessionId, priority: PriorityClass, now: Nanos) {
        let layers = self.num_layers;
        self.sessions
            .entry(s.clone())
            .or_insert_with(|| SessionEntry::new(layers, priority, now));
    }

    pub fn set_priority(&mut self, s: &SessionId, priority: PriorityClass) {
        if let Some(e) = self.sessions.get_mut(s) {
            e.priority = priority;
        }
    }

    pub fn pin(&mut self, s: &SessionId, now: Nanos) {
        if let Some(e) = self.sessions.get_mut(s) {
            e.pinned = true;
            e.last_use = now;
        }
    }

    pub fn unpin(&mut self, s: &SessionId, now: Nanos) {
        if let Some(e) = self.sessions.get_mut(s) {
            e.pinned = false;
            e.last_use = now;
        }
    }

    /// DEVICE bytes needed to hold `total_tokens` of `s` entirely on DEVICE,
    /// beyond what it already holds or has reserved.
    pub fn device_shortfall_for(&self, s: &SessionId, total_tokens: u64) -> u64 {
        let want = self.blocks_for(total_tokens) as u64;
        match self.sessions.get(s) {
            None => want * self.num_layers as u64 * self.block_bytes,
            Some(e) => {
                let have: u64 = e
                    .layers
                    .iter()
                    .map(|l| want.saturating_sub(l.dev as u64))
                    .sum::<u64>()
                    * self.block_bytes;
                have.saturating_sub(e.reserved)
            }
        }
    }

    /// Holds DEVICE bytes for blocks the session will create or load.
    pub fn reserve_device(&mut self, s: &SessionId, bytes: u64) -> Result<(), StoreError> {
        let free = self.device_free();
        if bytes > free {
            return Err(StoreError::DeviceOverCapacity {
                node: self.node,
                needed: bytes,
                free,
            });
        }
        let e = self
            .sessions
            .get_mut(s)
            .ok_or_else(|| StoreError::UnknownSession(s.clone()))?;
        e.reserved += bytes;
        self.budgets[Tier::Device.index()].add(bytes);
        Ok(())
    }

    pub fn release_reservation(&mut self, s: &SessionId) {
        if let Some(e) = self.sessions.get_mut(s) {
            let r = std::mem::take(&mut e.reserved);
            self.budgets[Tier::Device.index()].sub(r);
        }
    }

    /// Takes DEVICE bytes for a session, from its reservation first.
    fn take_device(&mut self, s: &SessionId, bytes: u64) -> Result<(), StoreError> {
        let e = self.sessions.get_mut(s).expect("live session");
        let from_reserved = e.reserved.min(bytes);
        e.reserved -= from_reserved;
        let extra = bytes - from_reserved;
        if extra > 0 {
            let free = self.budgets[Tier::Device.index()].free();
            if extra > free {
                // Put back what was taken so the failure has no side effects.
                self.sessions.get_mut(s).unwrap().reserved += from_reserved;
                return Err(StoreError::DeviceOverCapacity {
                    node: self.node,
                    needed: extra,
                    free,
                });
            }
            self.budgets[Tier::Device.index()].add(extra);
        }
        Ok(())
    }

    /// Adds `new_tokens` of freshly computed cache on DEVICE and, when
    /// persistence is on, schedules the write-behind to DISK.
    pub fn append_blocks(
        &mut self,
        s: &SessionId,
        new_tokens: u64,
        now: Nanos,
    ) -> Result<Vec<BlockKey>, StoreError> {
        let e = self
            .sessions
            .get(s)
            .ok_or_else(|| StoreError::UnknownSession(s.clone()))?;
        let old_blocks = e.blocks;
        let new_blocks = self.blocks_for(e.tokens + new_tokens) - old_blocks;
        let l = self.num_layers;
        if new_blocks > 0 {
            let bytes = new_blocks as u64 * l as u64 * self.block_bytes;
            self.take_device(s, bytes)?;
        }
        let e = self.sessions.get_mut(s).unwrap();
        debug_assert!(e.fully_on_device(), "append to a session not on device");
        e.tokens += new_tokens;
        e.blocks += new_blocks;
        e.last_use = now;
        for layer in e.layers.iter_mut() {
            layer.dev += new_blocks;
        }
        if new_blocks == 0 {
            return Ok(Vec::new());
        }
        if self.cfg.persist {
            let bytes = new_blocks as u64 * l as u64 * self.block_bytes;
            let (start, end) = self.reserve_link(Link::DiskWrite, now, bytes, false);
            self.budgets[Tier::Disk.index()].add(bytes);
            let e = self.sessions.get_mut(s).unwrap();
            let blocks = e.blocks;
            for layer in e.layers.iter_mut() {
                layer.disk = blocks;
                layer.pending.push_back((blocks, end));
            }
            self.record(
                start,
                end,
                s,
                (0, l),
                Location::Tier(Tier::Device),
                Location::Tier(Tier::Disk),
                bytes,
                TransferReason::Persist,
            );
        }
        let mut keys = Vec::with_capacity((new_blocks * l) as usize);
        for layer in 0..l {
            for b in old_blocks..old_blocks + new_blocks {
                keys.push(BlockKey {
                    session_id: s.clone(),
                    layer,
                    block_index: b,
                });
            }
        }
        Ok(keys)
    }

    /// Block-level view of DEVICE contents, for audits and small tests.
    pub fn device_blocks(&self, now: Nanos) -> Vec<BlockMeta> {
        let mut out = Vec::new();
        for (id, e) in &self.sessions {
            let session_bytes = self.session_bytes(e);
            for (li, l) in e.layers.iter().enumerate() {
                for b in 0..l.dev {
                    let mut residency = vec![Tier::Device];
                    if b < l.host && l.host_ready <= now {
                        residency.push(Tier::Host);
                    }
                    if b < l.persisted {
                        residency.push(Tier::Disk);
                    }
                    out.push(BlockMeta {
                        key: BlockKey {
                            session_id: id.clone(),
                            layer: li as u32,
                            block_index: b,
                        },
                        bytes: self.block_bytes,
                        residency,
                        session_bytes,
                        pinned: e.pinned,
                    });
                }
            }
        }
        out
    }

    /// Frees DEVICE copies of idle, backed blocks in eviction order.
    /// High-priority sessions are only touched after every normal one.
    /// No data moves: each dropped block already has a HOST or DISK copy.
    pub fn purge_from_device(&mut self, bytes_needed: u64, now: Nanos, exclude: &[SessionId]) -> PurgeOutcome {
        self.settle(now);
        let mut order: Vec<(PriorityClass, u64, SessionId)> = self
            .sessions
            .iter()
            .filter(|(id, e)| !e.busy(now) && !exclude.contains(id) && e.device_blocks() > 0)
            .map(|(id, e)| (e.priority, self.session_bytes(e), id.clone()))
            .collect();
        order.sort();
        let mut freed = 0u64;
        let mut awaiting = 0u64;
        let bb = self.block_bytes;
        'classes: for class in [PriorityClass::Normal, PriorityClass::High] {
            for layer in (0..self.num_layers as usize).rev() {
                for (p, _, id) in &order {
                    if *p != class {
                        continue;
                    }
                    if freed >= bytes_needed {
                        break 'classes;
                    }
                    let e = self.sessions.get_mut(id).unwrap();
                    if e.pinned {
                        self.pinned_purge_violations += 1;
                        continue;
                    }
                    let l = &mut e.layers[layer];
                    if l.dev == 0 {
                        continue;
                    }
                    if l.backed(now) < l.dev {
                        awaiting += l.dev as u64 * bb;
                        continue;
                    }
                    let want = (bytes_needed - freed).div_ceil(bb);
                    let take = want.min(l.dev as u64) as u32;
                    l.dev -= take;
                    freed += take as u64 * bb;
                }
            }
        }
        if freed > 0 {
            self.budgets[Tier::Device.index()].sub(freed);
        }
        PurgeOutcome {
            freed,
            shortfall: bytes_needed.saturating_sub(freed),
            awaiting_backing: awaiting,
        }
    }

    /// Drops whole idle sessions whose DEVICE copy has no backing and no
    /// transfer pending, smallest first. Their caches are lost.
    pub fn discard_idle(&mut self, bytes_needed: u64, now: Nanos, exclude: &[SessionId]) -> (u64, Vec<SessionId>) {
        self.settle(now);
        let mut victims: Vec<(PriorityClass, u64, SessionId)> = self
            .sessions
            .iter()
            .filter(|(id, e)| {
                !e.busy(now)
                    && !exclude.contains(id)
                    && e.device_blocks() > 0
                    && e.layers.iter().all(|l| l.host_ready <= now && l.disk_ready() <= now)
            })
            .map(|(id, e)| (e.priority, self.session_bytes(e), id.clone()))
            .collect();
        victims.sort();
        let mut freed = 0;
        let mut lost = Vec::new();
        for (_, _, id) in victims {
            if freed >= bytes_needed {
                break;
            }
            let before = self.budget(Tier::Device).used;
            self.release_session(&id);
            freed += before - self.budget(Tier::Device).used;
            lost.push(id);
        }
        (freed, lost)
    }

    /// Drops HOST copies in LRU order until `bytes_needed` are free. Copies
    /// whose blocks are not all persisted are dropped only when `lossy`, in
    /// which case sessions left without a complete copy are released.
    fn evict_host(&mut self, bytes_needed: u64, now: Nanos, exclude: &SessionId, lossy: bool) -> Vec<SessionId> {
        let mut lost = Vec::new();
        if self.budget(Tier::Host).free() >= bytes_needed {
            return lost;
        }
        let mut victims: Vec<(Nanos, SessionId)> = self
            .sessions
            .iter()
            .filter(|(id, e)| {
                *id != exclude
                    && !e.busy(now)
                    && e.host_blocks() > 0
                    && e.layers.iter().all(|l| l.host_ready <= now)
            })
            .map(|(id, e)| (e.last_use, id.clone()))
            .collect();
        victims.sort();
        for (_, id) in victims {
            if self.budget(Tier::Host).free() >= bytes_needed {
                break;
            }
            let e = &self.sessions[&id];
            let covered = e.layers.iter().all(|l| l.persisted >= l.host || l.dev >= e.blocks);
            if !covered && !lossy {
                continue;
            }
            let e = self.sessions.get_mut(&id).unwrap();
            let mut bytes = 0;
            for l in e.layers.iter_mut() {
                bytes += l.host as u64 * self.block_bytes;
                l.host = 0;
            }
            let complete_elsewhere = e
                .layers
                .iter()
                .all(|l| l.dev >= e.blocks || l.persisted >= e.blocks);
            self.budgets[Tier::Host.index()].sub(bytes);
            if !complete_elsewhere {
                self.release_session(&id);
                lost.push(id);
            }
        }
        lost
    }

    /// Copies the DEVICE blocks not yet on HOST to HOST, evicting
    /// least-recently-used HOST copies to make room. Returns sessions whose
    /// caches were lost to make room.
    pub fn offload_to_host(&mut self, s: &SessionId, now: Nanos) -> Vec<SessionId> {
        let Some(e) = self.sessions.get(s) else {
            return Vec::new();
        };
        let missing: u64 = e
            .layers
            .iter()
            .map(|l| l.dev.saturating_sub(l.host) as u64)
            .sum::<u64>()
            * self.block_bytes;
        if missing == 0 || missing > self.budget(Tier::Host).capacity {
            return Vec::new();
        }
        let lost = self.evict_host(missing, now, s, true);
        if self.budget(Tier::Host).free() < missing {
            return lost;
        }
        self.budgets[Tier::Host.index()].add(missing);
        let mut first = None;
        let mut last = now;
        for i in 0..self.num_layers as usize {
            let l = &self.sessions[s].layers[i];
            let n = l.dev.saturating_sub(l.host);
            if n == 0 {
                continue;
            }
            let (start, end) = self.reserve_link(Link::PcieD2H, now, n as u64 * self.block_bytes, false);
            first.get_or_insert(start);
            last = end;
            let l = &mut self.sessions.get_mut(s).unwrap().layers[i];
            l.host = l.dev;
            l.host_ready = end;
        }
        self.record(
            first.unwrap_or(now),
            last,
            s,
            (0, self.num_layers),
            Location::Tier(Tier::Device),
            Location::Tier(Tier::Host),
            missing,
            TransferReason::Persist,
        );
        lost
    }

    /// Schedules a layer's missing DEVICE blocks from HOST or DISK. The
    /// DEVICE bytes must already be held by the caller.
    fn load_layer_to_device(&mut self, s: &SessionId, layer: usize, now: Nanos, reason: TransferReason) -> Result<Nanos, u32> {
        let e = &self.sessions[s];
        let blocks = e.blocks;
        let l = &e.layers[layer];
        if l.dev >= blocks {
            return Ok(l.dev_ready.max(now));
        }
        let n = (blocks - l.dev) as u64;
        let bytes = n * self.block_bytes;
        let (host, host_ready, disk, disk_ready) = (l.host, l.host_ready, l.disk, l.disk_ready());
        let (from, ready) = if host >= blocks {
            (Tier::Host, host_ready)
        } else if disk >= blocks {
            let (start, end) = self.reserve_link(Link::DiskRead, now.max(disk_ready), bytes, reason == TransferReason::Demand);
            self.record(start, end, s, (layer as u32, layer as u32 + 1), Location::Tier(Tier::Disk), Location::Tier(Tier::Host), bytes, reason);
            // The bounce copy stays in HOST while there is room for it.
            let host_bytes = (blocks - self.sessions[s].layers[layer].host) as u64 * self.block_bytes;
            if self.budget(Tier::Host).free() >= host_bytes {
                self.budgets[Tier::Host.index()].add(host_bytes);
                let l = &mut self.sessions.get_mut(s).unwrap().layers[layer];
                l.host = blocks;
                l.host_ready = end;
            }
            (Tier::Disk, end)
        } else {
            return Err(layer as u32);
        };
        let (start, end) = self.reserve_link(Link::PcieH2D, now.max(ready), bytes, reason == TransferReason::Demand);
        self.record(start, end, s, (layer as u32, layer as u32 + 1), Location::Tier(from), Location::Tier(Tier::Device), bytes, reason);
        let l = &mut self.sessions.get_mut(s).unwrap().layers[layer];
        l.dev = blocks;
        l.dev_ready = l.dev_ready.max(end);
        Ok(end)
    }

    /// Loads every missing block of `s` onto DEVICE, layer by layer, and
    /// returns each layer's ready time. DEVICE bytes are taken from the
    /// session's reservation.
    pub fn load_to_device(&mut self, s: &SessionId, now: Nanos, reason: TransferReason) -> Result<Vec<Nanos>, StoreError> {
        self.settle(now);
        let e = self
            .sessions
            .get(s)
            .ok_or_else(|| StoreError::UnknownSession(s.clone()))?;
        let missing: Vec<u32> = e
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.dev < e.blocks && l.host < e.blocks && l.disk < e.blocks)
            .map(|(i, _)| i as u32)
            .collect();
        if !missing.is_empty() {
            return Err(StoreError::MissingLayers {
                session: s.clone(),
                layers: missing,
            });
        }
        let need: u64 = e
            .layers
            .iter()
            .map(|l| (e.blocks - l.dev) as u64)
            .sum::<u64>()
            * self.block_bytes;
        self.take_device(s, need)?;
        let mut ready = Vec::with_capacity(self.num_layers as usize);
        for i in 0..self.num_layers as usize {
            ready.push(self.load_layer_to_device(s, i, now, reason).expect("checked above"));
        }
        let e = self.sessions.get_mut(s).unwrap();
        e.last_use = now;
        Ok(ready)
    }

    /// Moves a session toward DEVICE: the longest prefix of layers that fits
    /// in free DEVICE memory is loaded there, and the remaining layers are
    /// staged from DISK into HOST when HOST has room. With `purge`, idle
    /// backed blocks of every session outside that list are purged first to
    /// make room for every layer, normal-priority sessions before high ones.
    pub fn promote(&mut self, s: &SessionId, now: Nanos, purge: Option<&[SessionId]>) -> PromoteOutcome {
        self.settle(now);
        let Some(e) = self.sessions.get(s) else {
            return PromoteOutcome::default();
        };
        if e.outgoing {
            return PromoteOutcome::default();
        }
        let blocks = e.blocks;
        let per_layer: Vec<u64> = e
            .layers
            .iter()
            .map(|l| (blocks - l.dev.min(blocks)) as u64 * self.block_bytes)
            .collect();
        if let Some(protect) = purge {
            let total: u64 = per_layer.iter().sum();
            let free = self.device_free();
            if total > free {
                let mut exclude = protect.to_vec();
                exclude.push(s.clone());
                self.purge_from_device(total - free, now, &exclude);
            }
        }
        let mut budget = self.device_free();
        let mut prefix = 0u32;
        for &b in &per_layer {
            if b > budget {
                break;
            }
            budget -= b;
            prefix += 1;
        }
        let mut out = PromoteOutcome {
            prefix_layers: prefix,
            ..Default::default()
        };
        let mut ready_at = now;
        let dev_bytes: u64 = per_layer[..prefix as usize].iter().sum();
        if dev_bytes > 0 {
            self.budgets[Tier::Device.index()].add(dev_bytes);
        }
        for i in 0..prefix as usize {
            if per_layer[i] == 0 {
                ready_at = ready_at.max(self.sessions[s].layers[i].dev_ready);
                continue;
            }
            let end = self
                .load_layer_to_device(s, i, now, TransferReason::Prefetch)
                .expect("session blocks exist below DEVICE");
            ready_at = ready_at.max(end);
        }
        out.device_bytes = dev_bytes;
        // Stage the rest into HOST.
        let stage: Vec<usize> = (prefix as usize..self.num_layers as usize)
            .filter(|&i| {
                let l = &self.sessions[s].layers[i];
                l.dev < blocks && l.host < blocks && l.disk >= blocks
            })
            .collect();
        let stage_bytes: u64 = stage
            .iter()
            .map(|&i| (blocks - self.sessions[s].layers[i].host) as u64 * self.block_bytes)
            .sum();
        if stage_bytes > 0 {
            self.evict_host(stage_bytes, now, s, false);
            if self.budget(Tier::Host).free() >= stage_bytes {
                self.budgets[Tier::Host.index()].add(stage_bytes);
                for &i in &stage {
                    let l = &self.sessions[s].layers[i];
                    let n = (blocks - l.host) as u64;
                    let ready = now.max(l.disk_ready());
                    let (start, end) = self.reserve_link(Link::DiskRead, ready, n * self.block_bytes, false);
                    self.record(start, end, s, (i as u32, i as u32 + 1), Location::Tier(Tier::Disk), Location::Tier(Tier::Host), n * self.block_bytes, TransferReason::Prefetch);
                    let l = &mut self.sessions.get_mut(s).unwrap().layers[i];
                    l.host = blocks;
                    l.host_ready = end;
                    ready_at = ready_at.max(end);
                }
                out.staged_bytes = stage_bytes;
            }
        }
        let e = self.sessions.get_mut(s).unwrap();
        e.last_use = now;
        out.ready_at = ready_at;
        out
    }

    /// Drops every copy of a session held by this node.
    pub fn release_session(&mut self, s: &SessionId) {
        let Some(e) = self.sessions.remove(s) else {
            return;
        };
        let bb = self.block_bytes;
        let dev: u64 = e.layers.iter().map(|l| l.dev as u64).sum::<u64>() * bb + e.reserved;
        let host: u64 = e.layers.iter().map(|l| l.host as u64).sum::<u64>() * bb;
        let disk: u64 = e.layers.iter().map(|l| l.disk as u64).sum::<u64>() * bb;
        self.budgets[Tier::Device.index()].sub(dev);
        self.budgets[Tier::Host.index()].sub(host);
        self.budgets[Tier::Disk.index()].sub(disk);
        self.persisted_high_water.retain(|(id, _), _| id != s);
    }

    /// Time at which every scheduled write of `s` has completed.
    pub fn writes_done_at(&self, s: &SessionId) -> Nanos {
        self.sessions.get(s).map_or(Nanos::ZERO, |e| {
            e.layers
                .iter()
                .map(|l| l.disk_ready().max(l.host_ready))
                .max()
                .unwrap_or(Nanos::ZERO)
        })
    }

    /// Records the sending side of a migration.
    pub fn note_outgoing(&mut self, s: &SessionId, to: NodeId, start: Nanos, end: Nanos, bytes: u64) {
        let from = match self.sessions.get(s) {
            Some(e) if e.fully_on_device() => Tier::Device,
            Some(e) if e.layers.iter().all(|l| l.host >= e.blocks) => Tier::Host,
            _ => Tier::Disk,
        };
        let l = self.num_layers;
        self.record(start, end, s, (0, l), Location::Tier(from), Location::Remote(to), bytes, TransferReason::Migrate);
    }

    pub fn mark_outgoing(&mut self, s: &SessionId) {
        if let Some(e) = self.sessions.get_mut(s) {
            e.outgoing = true;
        }
    }

    pub fn total_tokens(&self, s: &SessionId) -> Option<u64> {
        self.sessions.get(s).map(|e| e.tokens)
    }

    /// Accepts a session streamed layer by layer over the network from
    /// `from`. Leading layers land directly on DEVICE while free space lasts
    /// (when `to_device` is set); the rest land in HOST or, failing that, DISK
    /// only. Every layer is also written to DISK on arrival.
    pub fn accept_remote(
        &mut self,
        s: &SessionId,
        tokens: u64,
        priority: PriorityClass,
        from: NodeId,
        now: Nanos,
        to_device: bool,
        reason: TransferReason,
    ) -> FetchOutcome {
        debug_assert!(!self.sessions.contains_key(s));
        let blocks = self.blocks_for(tokens);
        let layer_bytes = blocks as u64 * self.block_bytes;
        let l = self.num_layers;
        let mut entry = SessionEntry::new(l, priority, now);
        entry.tokens = tokens;
        entry.blocks = blocks;
        self.sessions.insert(s.clone(), entry);

        let mut dev_budget = if to_device { self.device_free() } else { 0 };
        let lossy = !self.cfg.persist;
        let mut ready = Vec::with_capacity(l as usize);
        let demand = reason == TransferReason::Demand;
        let mut bytes_total = 0;
        for i in 0..l as usize {
            let (start, end) = self.reserve_link(Link::Network, now, layer_bytes, demand);
            bytes_total += layer_bytes;
            let target = if dev_budget >= layer_bytes {
                dev_budget -= layer_bytes;
                self.budgets[Tier::Device.index()].add(layer_bytes);
                let ls = &mut self.sessions.get_mut(s).unwrap().layers[i];
                ls.dev = blocks;
                ls.dev_ready = end;
                Tier::Device
            } else {
                if self.budget(Tier::Host).free() < layer_bytes {
                    self.evict_host(layer_bytes, now, s, lossy);
                }
                if self.budget(Tier::Host).free() >= layer_bytes {
                    self.budgets[Tier::Host.index()].add(layer_bytes);
                    let ls = &mut self.sessions.get_mut(s).unwrap().layers[i];
                    ls.host = blocks;
                    ls.host_ready = end;
                    Tier::Host
                } else {
                    Tier::Disk
                }
            };
            self.record(start, end, s, (i as u32, i as u32 + 1), Location::Remote(from), Location::Tier(target), layer_bytes, reason);
            let mut layer_ready = end;
            if self.cfg.persist || target == Tier::Disk {
                let (ws, we) = self.reserve_link(Link::DiskWrite, end, layer_bytes, false);
                self.budgets[Tier::Disk.index()].add(layer_bytes);
                self.record(ws, we, s, (i as u32, i as u32 + 1), Location::Remote(from), Location::Tier(Tier::Disk), layer_bytes, TransferReason::Persist);
                let ls = &mut self.sessions.get_mut(s).unwrap().layers[i];
                ls.disk = blocks;
                ls.pending.push_back((blocks, we));
                if target == Tier::Disk {
                    layer_ready = we;
                }
            }
            ready.push(layer_ready);
        }
        let complete_at = ready.iter().copied().max().unwrap_or(now);
        self.sessions.get_mut(s).unwrap().incoming_until = Some(complete_at);
        FetchOutcome {
            layer_ready: ready,
            complete_at,
            bytes: bytes_total,
        }
    }

    /// Earliest time after `now` at which a pending copy lands on this node.
    pub fn next_change_after(&self, now: Nanos) -> Option<Nanos> {
        let mut next: Option<Nanos> = None;
        let mut see = |t: Nanos| {
            if t > now {
                next = Some(next.map_or(t, |n| n.min(t)));
            }
        };
        for e in self.sessions.values() {
            if let Some(t) = e.incoming_until {
                see(t);
            }
            for l in &e.layers {
                see(l.dev_ready);
                see(l.host_ready);
                for &(_, t) in &l.pending {
                    see(t);
                }
            }
        }
        next
    }

    pub fn pinned_purge_violations(&self) -> u64 {
        self.pinned_purge_violations
    }

    /// Checks capacity, durability and accounting invariants.
    pub fn check_invariants(&self, now: Nanos) -> Result<(), String> {
        let bb = self.block_bytes;
        let mut used = [0u64; 3];
        for (id, e) in &self.sessions {
            used[0] += e.device_blocks() * bb + e.reserved;
            used[1] += e.host_blocks() * bb;
            used[2] += e.disk_blocks() * bb;
            for (i, l) in e.layers.iter().enumerate() {
                if l.dev > e.blocks || l.host > e.blocks || l.disk > e.blocks {
                    return Err(format!("{id} layer {i}: tier count above block count"));
                }
                let persisted = l
                    .pending
                    .iter()
                    .filter(|&&(_, t)| t <= now)
                    .map(|&(c, _)| c)
                    .max()
                    .unwrap_or(0)
                    .max(l.persisted);
                if let Some(&hw) = self.persisted_high_water.get(&(id.clone(), i as u32)) {
                    if persisted < hw {
                        return Err(format!("{id} layer {i}: persisted block left DISK"));
                    }
                }
                if e.blocks > 0 && l.dev < e.blocks && l.host < e.blocks && l.disk < e.blocks && e.incoming_until.is_none() {
                    return Err(format!("{id} layer {i}: blocks resident nowhere"));
                }
            }
            if e.pinned && !e.fully_on_device() {
                return Err(format!("{id}: pinned but not fully on device"));
            }
        }
        for t in Tier::ALL {
            let b = self.budget(t);
            if b.used > b.capacity {
                return Err(format!("node {} {t}: used {} > capacity {}", self.node, b.used, b.capacity));
            }
            if b.used != used[t.index()] {
                return Err(format!("node {} {t}: budget {} != recount {}", self.node, b.used, used[t.index()]));
            }
            if b.bytes_in - b.bytes_out != b.used {
                return Err(format!("node {} {t}: in-out {} != used {}", self.node, b.bytes_in - b.bytes_out, b.used));
            }
        }
        if self.pinned_purge_violations > 0 {
            return Err("purge visited a pinned session".into());
        }
        Ok(())
    }
}
