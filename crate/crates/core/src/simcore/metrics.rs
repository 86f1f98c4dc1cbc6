//! Run reports, per-request records and cross-run comparison.

use super::RunOutput;
use crate::config::{ClusterConfig, Policy};
use crate::engine::ActiveRequest;
use crate::kvstore::{Location, TransferReason};
use crate::nodemanager::Cluster;
use crate::scheduler::{load_imbalance, ImbalanceSummary, RouteReason};
use crate::time::Nanos;
use crate::workload::{PriorityClass, Trace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// One completed request. Field order is the column order of the tabular
/// output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub session: String,
    pub turn: u32,
    pub node: usize,
    pub admit_ns: u64,
    pub ttft_ns: u64,
    pub finish_ns: u64,
    pub out_tokens: u32,
    pub redundant_tokens: u64,
    pub arrival_ns: u64,
    pub first_token_ns: u64,
    pub prefill_tokens: u64,
    pub prefill_ns: u64,
    pub load_stall_ns: u64,
    /// Time staged while the cache streamed in, off the engine's critical path.
    pub load_wait_ns: u64,
    pub paused_steps: u32,
    pub decode_steps: u32,
    pub high_priority: bool,
}

impl RequestRecord {
    fn from_request(r: &ActiveRequest) -> RequestRecord {
        let admit = r.admit_time.expect("finished request was admitted");
        let first = r.first_token_time.expect("finished request produced a token");
        let finish = r.finish_time.expect("finished request has a finish time");
        RequestRecord {
            session: r.session_id.to_string(),
            turn: r.turn_index,
            node: r.node,
            admit_ns: admit.0,
            ttft_ns: (first - r.arrival).0,
            finish_ns: finish.0,
            out_tokens: r.generated_tokens,
            redundant_tokens: r.redundant_tokens,
            arrival_ns: r.arrival.0,
            first_token_ns: first.0,
            prefill_tokens: r.prefill_tokens,
            prefill_ns: (r.prefill_compute + r.load_stall).0,
            load_stall_ns: r.load_stall.0,
            load_wait_ns: r.load_wait.0,
            paused_steps: r.paused_steps,
            decode_steps: r.decode_steps,
            high_priority: r.class == PriorityClass::High,
        }
    }

    pub fn e2e_ns(&self) -> u64 {
        self.finish_ns - self.arrival_ns
    }

    /// End-to-end latency per output token, seconds.
    pub fn normalized_latency(&self) -> f64 {
        self.e2e_ns() as f64 / 1e9 / self.out_tokens as f64
    }

    /// Mean time between output tokens, seconds; undefined for one token.
    pub fn tpot(&self) -> Option<f64> {
        (self.out_tokens > 1).then(|| (self.finish_ns - self.first_token_ns) as f64 / 1e9 / (self.out_tokens - 1) as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTpot {
    pub normal_s: Option<f64>,
    pub high_s: Option<f64>,
    pub normal_count: usize,
    pub high_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeadStats {
    pub count: usize,
    pub mean_s: Option<f64>,
    pub p50_s: Option<f64>,
    pub p90_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficTotals {
    /// Bytes moved, keyed by transfer reason.
    pub by_reason: BTreeMap<String, u64>,
    /// Bytes moved, keyed by "source->destination".
    pub by_route: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub policy: Policy,
    pub trace_hash: String,
    pub nodes: usize,
    pub concurrency_target: u32,
    pub sessions: usize,
    pub requests: usize,
    pub events: u64,
    pub max_active_sessions: usize,
    /// Time of the last completion, seconds.
    pub makespan_s: f64,
    /// Completions per second over the middle 80% of the run.
    pub requests_per_sec: f64,
    pub ttft_mean_s: f64,
    pub ttft_p50_s: f64,
    pub ttft_p99_s: f64,
    pub tpot_mean_s: Option<f64>,
    pub tpot_by_class: ClassTpot,
    pub normalized_latency_mean_s: f64,
    pub e2e_mean_s: f64,
    pub total_prefill_tokens: u64,
    pub total_redundant_tokens: u64,
    /// Prefill compute plus cache-load stalls, seconds.
    pub total_prefill_time_s: f64,
    pub total_prefill_compute_s: f64,
    pub total_load_stall_s: f64,
    pub total_load_wait_s: f64,
    pub wasted_fraction_by_turn: BTreeMap<u32, f64>,
    pub load_imbalance: Option<ImbalanceSummary>,
    pub traffic: TrafficTotals,
    pub advisory_lead: LeadStats,
    pub advisory_misses: usize,
    pub lost_caches: usize,
    pub anomalies: usize,
    pub pinned_purge_violations: u64,
    pub paused_steps: u64,
}

/// Fraction of prefilled tokens at each turn index that re-prefilled history.
pub fn wasted_fraction_by_turn(records: &[RequestRecord]) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.turn).or_default();
        e.0 += r.redundant_tokens;
        e.1 += r.prefill_tokens;
    }
    acc.into_iter()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(k, (red, total))| (k, red as f64 / total as f64))
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Time-averaged per-node load over consecutive windows inside `[from, to)`.
fn windowed_loads(logs: &[Vec<(Nanos, u64)>], from: Nanos, to: Nanos, window: Nanos) -> Vec<Vec<f64>> {
    let mut edges = Vec::new();
    let mut t = from;
    while t + window <= to {
        edges.push((t, t + window));
        t = t + window;
    }
    if edges.is_empty() && to > from {
        edges.push((from, to));
    }
    edges
        .iter()
        .map(|&(a, b)| logs.iter().map(|log| time_average(log, a, b)).collect())
        .collect()
}

fn time_average(log: &[(Nanos, u64)], a: Nanos, b: Nanos) -> f64 {
    let mut area = 0.0;
    for (i, &(t, v)) in log.iter().enumerate() {
        let next = log.get(i + 1).map_or(Nanos::MAX, |x| x.0);
        let lo = t.max(a);
        let hi = next.min(b);
        if hi > lo {
            area += v as f64 * (hi - lo).0 as f64;
        }
    }
    area / (b - a).0 as f64
}

fn location_name(l: Location) -> String {
    match l {
        Location::Tier(t) => t.to_string(),
        Location::Remote(_) => "network".into(),
    }
}

fn reason_name(r: TransferReason) -> &'static str {
    match r {
        TransferReason::Prefetch => "prefetch",
        TransferReason::Demand => "demand",
        TransferReason::Purge => "purge",
        TransferReason::Persist => "persist",
        TransferReason::Migrate => "migrate",
    }
}

pub(super) fn build(
    trace: &Trace,
    cluster: &mut Cluster,
    policy: Policy,
    cfg: &ClusterConfig,
    hash: String,
    events: u64,
    max_active: usize,
) -> RunOutput {
    let records: Vec<RequestRecord> = cluster.requests.iter().map(RequestRecord::from_request).collect();
    let makespan = records.iter().map(|r| r.finish_ns).max().map_or(Nanos::ZERO, Nanos);
    let lo = Nanos((makespan.0 as f64 * 0.1).round() as u64);
    let hi = Nanos((makespan.0 as f64 * 0.9).round() as u64);
    let rps = if hi > lo {
        let n = records.iter().filter(|r| r.finish_ns >= lo.0 && r.finish_ns < hi.0).count();
        n as f64 / (hi - lo).as_secs_f64()
    } else {
        0.0
    };
    let mut ttfts: Vec<f64> = records.iter().map(|r| r.ttft_ns as f64 / 1e9).collect();
    ttfts.sort_by(f64::total_cmp);
    let class_tpot = |high: bool| {
        let v: Vec<f64> = records.iter().filter(|r| r.high_priority == high).filter_map(|r| r.tpot()).collect();
        (mean(v.iter().copied()), v.len())
    };
    let (normal_s, normal_count) = class_tpot(false);
    let (high_s, high_count) = class_tpot(true);

    let window = Nanos::from_secs_f64(cfg.sample_interval_s);
    let samples = windowed_loads(&cluster.load_log, lo, hi, window);
    let imbalance = load_imbalance(&samples).ok();

    let mut traffic = TrafficTotals::default();
    let mut transfers = Vec::new();
    for n in &mut cluster.nodes {
        for t in n.store.ledger.drain(..) {
            *traffic.by_reason.entry(reason_name(t.reason).to_string()).or_default() += t.bytes;
            let route = format!("{}->{}", location_name(t.from), location_name(t.to));
            *traffic.by_route.entry(route).or_default() += t.bytes;
            if cfg.keep_transfer_ledger {
                transfers.push(t);
            }
        }
    }
    transfers.sort_by(|a, b| (a.time, a.node).cmp(&(b.time, b.node)));

    let mut leads = cluster.leads.clone();
    leads.sort_by(f64::total_cmp);
    let advisory_lead = LeadStats {
        count: leads.len(),
        mean_s: mean(leads.iter().copied()),
        p50_s: percentile(&leads, 0.5),
        p90_s: percentile(&leads, 0.9),
    };
    let misses = cluster.routing.iter().filter(|r| r.reason == RouteReason::Miss).count();

    let report = MetricsReport {
        label: policy.to_string(),
        policy,
        trace_hash: hash,
        nodes: cluster.nodes.len(),
        concurrency_target: trace.concurrency_target,
        sessions: trace.sessions.len(),
        requests: records.len(),
        events,
        max_active_sessions: max_active,
        makespan_s: makespan.as_secs_f64(),
        requests_per_sec: rps,
        ttft_mean_s: mean(ttfts.iter().copied()).unwrap_or(0.0),
        ttft_p50_s: percentile(&ttfts, 0.5).unwrap_or(0.0),
        ttft_p99_s: percentile(&ttfts, 0.99).unwrap_or(0.0),
        tpot_mean_s: mean(records.iter().filter_map(|r| r.tpot())),
        tpot_by_class: ClassTpot {
            normal_s,
            high_s,
            normal_count,
            high_count,
        },
        normalized_latency_mean_s: mean(records.iter().map(|r| r.normalized_latency())).unwrap_or(0.0),
        e2e_mean_s: mean(records.iter().map(|r| r.e2e_ns() as f64 / 1e9)).unwrap_or(0.0),
        total_prefill_tokens: records.iter().map(|r| r.prefill_tokens).sum(),
        total_redundant_tokens: records.iter().map(|r| r.redundant_tokens).sum(),
        total_prefill_time_s: records.iter().map(|r| r.prefill_ns).sum::<u64>() as f64 / 1e9,
        total_prefill_compute_s: records.iter().map(|r| r.prefill_ns - r.load_stall_ns).sum::<u64>() as f64 / 1e9,
        total_load_stall_s: records.iter().map(|r| r.load_stall_ns).sum::<u64>() as f64 / 1e9,
        total_load_wait_s: records.iter().map(|r| r.load_wait_ns).sum::<u64>() as f64 / 1e9,
        wasted_fraction_by_turn: wasted_fraction_by_turn(&records),
        load_imbalance: imbalance,
        traffic,
        advisory_lead,
        advisory_misses: misses,
        lost_caches: cluster.lost.len(),
        anomalies: cluster.anomalies.len(),
        pinned_purge_violations: cluster.nodes.iter().map(|n| n.store.pinned_purge_violations()).sum(),
        paused_steps: records.iter().map(|r| r.paused_steps as u64).sum(),
    };
    RunOutput {
        report,
        requests: records,
        timeline: cluster.timeline.take().unwrap_or_default(),
        routing: std::mem::take(&mut cluster.routing),
        transfers,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("need at least two reports")]
    TooFew,
    #[error("baseline index {0} out of range")]
    BadBaseline(usize),
    #[error("report {index} ({label}) was produced from a different trace than the baseline")]
    HashMismatch { index: usize, label: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub baseline: String,
    pub tpot_ratio: Option<f64>,
    pub ttft_ratio: f64,
    pub normalized_latency_ratio: f64,
    pub rps_ratio: f64,
    pub imbalance_ratio: Option<f64>,
    pub makespan_ratio: f64,
    pub prefill_time_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Ratios of every report's headline metrics to the baseline's.
pub fn compare_runs(reports: &[MetricsReport], baseline: usize) -> Result<Vec<ComparisonRow>, CompareError> {
    if reports.len() < 2 {
        return Err(CompareError::TooFew);
    }
    let base = reports.get(baseline).ok_or(CompareError::BadBaseline(baseline))?;
    for (i, r) in reports.iter().enumerate() {
        if r.trace_hash != base.trace_hash {
            return Err(CompareError::HashMismatch {
                index: i,
                label: r.label.clone(),
            });
        }
    }
    Ok(reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            baseline: base.label.clone(),
            tpot_ratio: r.tpot_mean_s.zip(base.tpot_mean_s).map(|(a, b)| ratio(a, b)),
            ttft_ratio: ratio(r.ttft_mean_s, base.ttft_mean_s),
            normalized_latency_ratio: ratio(r.normalized_latency_mean_s, base.normalized_latency_mean_s),
            rps_ratio: ratio(r.requests_per_sec, base.requests_per_sec),
            imbalance_ratio: r
                .load_imbalance
                .as_ref()
                .zip(base.load_imbalance.as_ref())
                .map(|(a, b)| ratio(a.max_ratio, b.max_ratio)),
            makespan_ratio: ratio(r.makespan_s, base.makespan_s),
            prefill_time_ratio: ratio(r.total_prefill_time_s, base.total_prefill_time_s),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(turn: u32, prefill: u64, redundant: u64) -> RequestRecord {
        RequestRecord {
            session: "s".into(),
            turn,
            node: 0,
            admit_ns: 0,
            ttft_ns: 0,
            finish_ns: 10,
            out_tokens: 1,
            redundant_tokens: redundant,
            arrival_ns: 0,
            first_token_ns: 0,
            prefill_tokens: prefill,
            prefill_ns: 0,
            load_stall_ns: 0,
            load_wait_ns: 0,
            paused_steps: 0,
            decode_steps: 1,
            high_priority: false,
        }
    }

    #[test]
    fn wasted_fraction_definition() {
        let w = wasted_fraction_by_turn(&[rec(0, 40, 0), rec(1, 250, 200)]);
        assert_eq!(w[&0], 0.0);
        assert_eq!(w[&1], 0.8);
        assert!(!w.contains_key(&2));
    }

    #[test]
    fn time_average_of_steps() {
        let log = vec![(Nanos(0), 0), (Nanos(10), 4), (Nanos(20), 2)];
        assert_eq!(time_average(&log, Nanos(0), Nanos(20)), 2.0);
        assert_eq!(time_average(&log, Nanos(10), Nanos(30)), 3.0);
        let w = windowed_loads(&[log.clone(), log], Nanos(0), Nanos(25), Nanos(10));
        assert_eq!(w.len(), 2);
        assert_eq!(w[1], vec![4.0, 4.0]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), Some(2.0));
        assert_eq!(percentile(&v, 0.9), Some(4.0));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
