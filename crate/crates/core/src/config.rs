//! Cluster, engine and scheduler configuration.

use crate::costmodel::{CostError, CostModel, GpuProfile, LinkProfile};
use crate::kvstore::StoreConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Stateless: every turn re-prefills the whole history.
    Recompute,
    /// Keep caches in device memory only.
    Retain,
    /// Sticky routing with device-to-host offload.
    Swap,
    /// Advisory-driven prefetching with load-balanced routing.
    Symphony,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Recompute, Policy::Retain, Policy::Swap, Policy::Symphony];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Recompute => "recompute",
            Policy::Retain => "retain",
            Policy::Swap => "swap",
            Policy::Symphony => "symphony",
        }
    }

    pub fn keeps_cache(self) -> bool {
        self != Policy::Recompute
    }

    pub fn sticky(self) -> bool {
        matches!(self, Policy::Retain | Policy::Swap)
    }

    /// Store settings this policy imposes on top of the configured ones.
    pub fn store_config(self, base: &StoreConfig) -> StoreConfig {
        let mut cfg = base.clone();
        match self {
            Policy::Symphony => cfg.persist = true,
            Policy::Swap => cfg.persist = false,
            Policy::Retain => {
                cfg.persist = false;
                cfg.host_capacity = 0;
                cfg.disk_capacity = 0;
            }
            Policy::Recompute => {
                cfg.persist = false;
            }
        }
        cfg
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "recompute" | "vllm" => Ok(Policy::Recompute),
            "retain" => Ok(Policy::Retain),
            "swap" | "sticky" => Ok(Policy::Swap),
            "symphony" => Ok(Policy::Symphony),
            other => Err(ConfigError::UnknownPolicy(other.to_string())),
        }
    }
}

/// How prefills and decode steps share the engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Interleave {
    /// One prefill (if any) followed by one decode step per quantum.
    #[default]
    Interleave,
    /// Prefills run alone while any is admissible.
    PrefillFirst,
    /// A prefill is admitted only after this many decode steps.
    DecodeFirst { steps_per_prefill: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub max_batch: u32,
    pub interleave: Interleave,
    /// Per-step decode latency above which normal-priority requests are
    /// paused while high-priority ones are decoding.
    pub priority_latency_budget_ms: f64,
    /// Requests whose cache is still streaming in wait off the critical path
    /// while other work runs, up to this many at a time. Zero makes the
    /// engine wait out every load inside the prefill.
    pub max_staged: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_batch: 48,
            interleave: Interleave::Interleave,
            priority_latency_budget_ms: 24.0,
            max_staged: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMetric {
    /// Active plus queued requests.
    #[default]
    Requests,
    /// Active plus queued requests weighted by their cache tokens.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub load_metric: LoadMetric,
    /// The scheduler's load view is refreshed at most this often.
    pub view_lag_s: f64,
    /// Honour advisory priorities.
    pub priorities: bool,
    /// Count advisories routed to a node but not yet followed by their
    /// inference request as load on that node.
    pub count_planned: bool,
    /// An advisory stays on its cache owner while the owner's load is within
    /// this many units of the least-loaded node. Zero only breaks ties.
    pub locality_slack: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            load_metric: LoadMetric::Requests,
            view_lag_s: 0.0,
            priorities: true,
            count_planned: true,
            locality_slack: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeOverride {
    pub node: usize,
    #[serde(default)]
    pub gpu: Option<GpuProfile>,
    #[serde(default)]
    pub link: Option<LinkProfile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub gpu: GpuProfile,
    pub link: LinkProfile,
    pub store: StoreConfig,
    pub engine: EngineConfig,
    pub scheduler: SchedulerConfig,
    pub overrides: Vec<NodeOverride>,
    /// Length of the load-averaging window, seconds.
    pub sample_interval_s: f64,
    /// Simulated-time guard, seconds.
    pub max_sim_time_s: f64,
    /// Keep the per-transfer ledger in the report.
    pub keep_transfer_ledger: bool,
    /// Let advisory promotions purge idle, backed blocks of sessions with no
    /// pending advisory on the node instead of using free space only.
    pub promote_over_idle: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            nodes: 8,
            gpu: GpuProfile::default(),
            link: LinkProfile::default(),
            store: StoreConfig::default(),
            engine: EngineConfig::default(),
            scheduler: SchedulerConfig::default(),
            overrides: Vec::new(),
            sample_interval_s: 60.0,
            max_sim_time_s: 7.0 * 24.0 * 3600.0,
            keep_transfer_ledger: false,
            promote_over_idle: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cluster needs at least one node")]
    NoNodes,
    #[error("max_batch must be at least 1")]
    ZeroBatch,
    #[error("block_tokens must be at least 1")]
    ZeroBlock,
    #[error("override for node {0} but the cluster has fewer nodes")]
    BadOverride(usize),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes == 0 {
            return Err(ConfigError::NoNodes);
        }
        if self.engine.max_batch == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if self.store.block_tokens == 0 {
            return Err(ConfigError::ZeroBlock);
        }
        if !(self.sample_interval_s > 0.0) {
            return Err(ConfigError::NotPositive("sample_interval_s"));
        }
        if !(self.max_sim_time_s > 0.0) {
            return Err(ConfigError::NotPositive("max_sim_time_s"));
        }
        if !(self.engine.priority_latency_budget_ms > 0.0) {
            return Err(ConfigError::NotPositive("priority_latency_budget_ms"));
        }
        if !(self.scheduler.view_lag_s >= 0.0) {
            return Err(ConfigError::NotPositive("view_lag_s"));
        }
        self.gpu.validate()?;
        self.link.validate()?;
        for o in &self.overrides {
            if o.node >= self.nodes {
                return Err(ConfigError::BadOverride(o.node));
            }
            if let Some(g) = &o.gpu {
                g.validate()?;
            }
            if let Some(l) = &o.link {
                l.validate()?;
            }
        }
        Ok(())
    }

    pub fn node_cost(&self, node: usize) -> Result<CostModel, ConfigError> {
        let o = self.overrides.iter().rev().find(|o| o.node == node);
        let gpu = o.and_then(|o| o.gpu.clone()).unwrap_or_else(|| self.gpu.clone());
        let link = o.and_then(|o| o.link.clone()).unwrap_or_else(|| self.link.clone());
        Ok(CostModel::new(gpu, link)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ClusterConfig::default().validate().unwrap();
    }

    #[test]
    fn retain_has_no_lower_tiers() {
        let s = Policy::Retain.store_config(&StoreConfig::default());
        assert_eq!(s.host_capacity, 0);
        assert!(!s.persist);
        assert!(Policy::Symphony.store_config(&s).persist);
    }

    #[test]
    fn policy_names_parse() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("sticky".parse::<Policy>().unwrap(), Policy::Swap);
        assert!("nope".parse::<Policy>().is_err());
    }

    #[test]
    fn overrides_apply_per_node() {
        let mut c = ClusterConfig::default();
        c.overrides.push(NodeOverride {
            node: 1,
            gpu: Some(GpuProfile {
                prefill_throughput: 4096.0,
                ..Default::default()
            }),
            link: None,
        });
        c.validate().unwrap();
        assert_eq!(c.node_cost(1).unwrap().gpu.prefill_throughput, 4096.0);
        assert_eq!(c.node_cost(0).unwrap().gpu.prefill_throughput, 8192.0);
        c.overrides[0].node = 9;
        assert!(matches!(c.validate(), Err(ConfigError::BadOverride(9))));
    }
}
