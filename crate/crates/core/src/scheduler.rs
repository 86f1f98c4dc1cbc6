//! Cluster-level request routing: least-loaded placement for advisories and
//! stateless requests, sticky placement for the swap baselines, and the
//! session routing table.

use crate::config::Policy;
use crate::kvstore::NodeId;
use crate::time::Nanos;
use crate::workload::{AdvisoryRequest, SessionId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("no load samples")]
    EmptySamples,
    #[error("load sample with no nodes")]
    NoNodes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planned {
    pub node: NodeId,
    pub turn: u32,
    pub high: bool,
    pub at: Nanos,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTable {
    owner: BTreeMap<SessionId, NodeId>,
    planned: BTreeMap<SessionId, Planned>,
}

impl RoutingTable {
    pub fn owner(&self, s: &SessionId) -> Option<NodeId> {
        self.owner.get(s).copied()
    }

    pub fn set_owner(&mut self, s: &SessionId, node: NodeId) {
        self.owner.insert(s.clone(), node);
    }

    pub fn clear_owner(&mut self, s: &SessionId) {
        self.owner.remove(s);
    }

    pub fn planned(&self, s: &SessionId) -> Option<Planned> {
        self.planned.get(s).copied()
    }

    pub fn set_planned(&mut self, s: &SessionId, p: Planned) -> Option<Planned> {
        self.planned.insert(s.clone(), p)
    }

    pub fn take_planned(&mut self, s: &SessionId) -> Option<Planned> {
        self.planned.remove(s)
    }

    pub fn owners(&self) -> impl Iterator<Item = (&SessionId, &NodeId)> {
        self.owner.iter()
    }

    pub fn planned_entries(&self) -> impl Iterator<Item = (&SessionId, &Planned)> {
        self.planned.iter()
    }
}

/// The scheduler's (possibly stale) picture of per-node load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadView {
    /// Active plus queued work, in the configured load units.
    pub load: Vec<u64>,
    /// Advisories routed to each node whose request has not yet arrived.
    pub planned: Vec<u64>,
    /// High-priority requests and plans per node.
    pub high: Vec<u64>,
}

impl LoadView {
    pub fn new(nodes: usize) -> Self {
        LoadView {
            load: vec![0; nodes],
            planned: vec![0; nodes],
            high: vec![0; nodes],
        }
    }

    pub fn nodes(&self) -> usize {
        self.load.len()
    }

    fn total(&self, n: NodeId, with_planned: bool) -> u64 {
        self.load[n] + if with_planned { self.planned[n] } else { 0 }
    }

    /// Least-loaded node, lowest id on ties.
    pub fn argmin(&self, with_planned: bool) -> NodeId {
        (0..self.nodes())
            .min_by_key(|&n| (self.total(n, with_planned), n))
            .expect("at least one node")
    }

    /// Least-loaded node, except that `owner` is kept when its load is within
    /// `slack` of the minimum so that a cache does not move for nothing.
    pub fn argmin_near(&self, owner: Option<NodeId>, slack: u64, with_planned: bool) -> NodeId {
        let best = self.argmin(with_planned);
        match owner {
            Some(o) if o < self.nodes() && self.total(o, with_planned) <= self.total(best, with_planned) + slack => o,
            _ => best,
        }
    }

    /// High-priority sessions are spread by their own count first.
    pub fn argmin_high(&self, with_planned: bool) -> NodeId {
        (0..self.nodes())
            .min_by_key(|&n| (self.high[n], self.total(n, with_planned), n))
            .expect("at least one node")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteReason {
    LeastLoaded,
    LeastLoadedHigh,
    Planned,
    Sticky,
    /// Advisory missed; falls back to the least-loaded node.
    Miss,
    /// A transfer of the session is already heading to this node.
    InFlight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    Advisory,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub time: Nanos,
    pub session: SessionId,
    pub turn: u32,
    pub kind: RouteKind,
    pub chosen_node: NodeId,
    pub reason: RouteReason,
}

/// Advisory as forwarded to a node manager.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedAdvisory {
    pub advisory: AdvisoryRequest,
    pub cache_node: Option<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromotionDirective {
    /// Promote into free device memory only.
    FreeSpace,
    /// Promote every layer, purging idle normal-priority blocks if needed.
    FullDepth,
}

/// Knobs shared by the routing functions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RouteOpts {
    /// Count planned advisories as load.
    pub with_planned: bool,
    /// Load margin within which an advisory stays on the cache owner.
    pub locality_slack: u64,
}

pub fn route_advisory(
    advisory: &AdvisoryRequest,
    view: &LoadView,
    table: &RoutingTable,
    opts: RouteOpts,
) -> (NodeId, AugmentedAdvisory) {
    let node = view.argmin_near(table.owner(&advisory.session_id), opts.locality_slack, opts.with_planned);
    (
        node,
        AugmentedAdvisory {
            advisory: advisory.clone(),
            cache_node: table.owner(&advisory.session_id),
        },
    )
}

pub fn route_priority(
    advisory: &AdvisoryRequest,
    view: &LoadView,
    table: &RoutingTable,
    opts: RouteOpts,
) -> (NodeId, AugmentedAdvisory, PromotionDirective) {
    if !advisory.is_high_priority() {
        let (n, aug) = route_advisory(advisory, view, table, opts);
        return (n, aug, PromotionDirective::FreeSpace);
    }
    let node = view.argmin_high(opts.with_planned);
    (
        node,
        AugmentedAdvisory {
            advisory: advisory.clone(),
            cache_node: table.owner(&advisory.session_id),
        },
        PromotionDirective::FullDepth,
    )
}

pub fn route_inference(
    session: &SessionId,
    turn: u32,
    table: &RoutingTable,
    view: &LoadView,
    policy: Policy,
    with_planned: bool,
) -> (NodeId, RouteReason) {
    match policy {
        Policy::Recompute => (view.argmin(with_planned), RouteReason::LeastLoaded),
        Policy::Retain | Policy::Swap => match (turn, table.owner(session)) {
            (t, Some(home)) if t > 0 => (home, RouteReason::Sticky),
            _ => (view.argmin(with_planned), RouteReason::LeastLoaded),
        },
        Policy::Symphony => match table.planned(session) {
            Some(p) if p.turn == turn => (p.node, RouteReason::Planned),
            _ if turn == 0 => (view.argmin(with_planned), RouteReason::LeastLoaded),
            _ => (view.argmin(with_planned), RouteReason::Miss),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSampleStats {
    pub max: f64,
    pub median: f64,
    pub min: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSummary {
    pub samples: Vec<LoadSampleStats>,
    /// Largest per-sample max/median ratio.
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

/// Lower median.
fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Per-sample max/median load ratio. The median is floored at one request so
/// that a nearly idle cluster does not report an unbounded ratio.
pub fn load_imbalance(samples: &[Vec<f64>]) -> Result<ImbalanceSummary, SchedError> {
    if samples.is_empty() {
        return Err(SchedError::EmptySamples);
    }
    let mut stats = Vec::with_capacity(samples.len());
    for s in samples {
        if s.is_empty() {
            return Err(SchedError::NoNodes);
        }
        let mut v = s.clone();
        v.sort_by(f64::total_cmp);
        let max = *v.last().unwrap();
        let min = v[0];
        let median = lower_median(&v);
        let ratio = if v.len() == 1 {
            1.0
        } else {
            (max / median.max(1.0)).max(1.0)
        };
        stats.push(LoadSampleStats {
            max,
            median,
            min,
            ratio,
        });
    }
    let max_ratio = stats.iter().map(|s| s.ratio).fold(1.0, f64::max);
    let mean_ratio = stats.iter().map(|s| s.ratio).sum::<f64>() / stats.len() as f64;
    Ok(ImbalanceSummary {
        samples: stats,
        max_ratio,
        mean_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPTS: RouteOpts = RouteOpts {
        with_planned: true,
        locality_slack: 0,
    };

    fn adv(s: &str, priority: Option<u8>) -> AdvisoryRequest {
        AdvisoryRequest {
            session_id: SessionId::new(s),
            model_id: "m".into(),
            expected_arrival: None,
            ordered: false,
            priority,
        }
    }

    fn view(loads: &[u64]) -> LoadView {
        let mut v = LoadView::new(loads.len());
        v.load = loads.to_vec();
        v
    }

    #[test]
    fn advisory_goes_to_least_loaded() {
        let t = RoutingTable::default();
        assert_eq!(route_advisory(&adv("a", None), &view(&[2, 4]), &t, OPTS).0, 0);
        assert_eq!(route_advisory(&adv("a", None), &view(&[4, 2]), &t, OPTS).0, 1);
        assert_eq!(route_advisory(&adv("a", None), &view(&[3, 3, 3]), &t, OPTS).0, 0);
    }

    #[test]
    fn owner_wins_ties_and_slack() {
        let mut t = RoutingTable::default();
        t.set_owner(&SessionId::new("a"), 2);
        assert_eq!(route_advisory(&adv("a", None), &view(&[3, 3, 3]), &t, OPTS).0, 2);
        assert_eq!(route_advisory(&adv("a", None), &view(&[3, 3, 4]), &t, OPTS).0, 0);
        let slack = RouteOpts { locality_slack: 1, ..OPTS };
        assert_eq!(route_advisory(&adv("a", None), &view(&[3, 3, 4]), &t, slack).0, 2);
        assert_eq!(route_advisory(&adv("a", None), &view(&[3, 3, 5]), &t, slack).0, 0);
    }

    #[test]
    fn advisory_carries_owner() {
        let mut t = RoutingTable::default();
        t.set_owner(&SessionId::new("a"), 0);
        let (n, aug) = route_advisory(&adv("a", None), &view(&[0, 5]), &t, OPTS);
        assert_eq!(aug.cache_node, Some(n));
    }

    #[test]
    fn sticky_and_stateless_routing() {
        let mut t = RoutingTable::default();
        let s = SessionId::new("a");
        t.set_owner(&s, 7);
        let v = view(&[0, 0, 0, 0, 0, 0, 0, 99]);
        assert_eq!(route_inference(&s, 3, &t, &v, Policy::Swap, true), (7, RouteReason::Sticky));
        assert_eq!(route_inference(&s, 3, &t, &v, Policy::Recompute, true).0, 0);
        assert_eq!(route_inference(&s, 3, &t, &v, Policy::Symphony, true), (0, RouteReason::Miss));
        t.set_planned(&s, Planned { node: 5, turn: 3, high: false, at: Nanos::ZERO });
        assert_eq!(route_inference(&s, 3, &t, &v, Policy::Symphony, true), (5, RouteReason::Planned));
    }

    #[test]
    fn high_priority_spreads() {
        let t = RoutingTable::default();
        let mut v = view(&[1, 1, 1]);
        let (a, _, d) = route_priority(&adv("a", Some(1)), &v, &t, OPTS);
        assert_eq!(d, PromotionDirective::FullDepth);
        v.high[a] += 1;
        v.planned[a] += 1;
        let (b, _, _) = route_priority(&adv("b", Some(1)), &v, &t, OPTS);
        assert_ne!(a, b);
        let (_, _, d) = route_priority(&adv("c", None), &v, &t, OPTS);
        assert_eq!(d, PromotionDirective::FreeSpace);
    }

    #[test]
    fn imbalance_examples() {
        let r = load_imbalance(&[vec![4.0; 4]]).unwrap();
        assert_eq!(r.max_ratio, 1.0);
        let r = load_imbalance(&[vec![31.0, 10.0, 10.0, 9.0]]).unwrap();
        assert!((r.max_ratio - 3.1).abs() < 1e-12);
        assert_eq!(r.samples[0].median, 10.0);
        let r = load_imbalance(&[vec![17.0]]).unwrap();
        assert_eq!(r.max_ratio, 1.0);
        assert_eq!(load_imbalance(&[]), Err(SchedError::EmptySamples));
    }
}
