//! Experiment files: one TOML document describing the cluster, the workload
//! and the policy grid.

use anyhow::{bail, Context, Result};
use kvsim::config::{ClusterConfig, Policy};
use kvsim::workload::synthetic::SyntheticSpec;
use kvsim::workload::{
    assign_priorities, generate_agent_trace, inject_advisories, load_chat_corpus, metagpt_workload, read_trace,
    synthesize_arrivals, with_fixed_tokens, ArrivalOptions, SessionScript, Trace, DEFAULT_WORDS_PER_TOKEN,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Chat sessions shaped like the ShareGPT corpus.
    #[default]
    Sharegpt,
    /// Long heavy-tailed sessions from machine-speed clients.
    HeavyTailed,
    SingleTurn,
    /// Multi-agent pipeline jobs.
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedTokens {
    pub prompt: u32,
    pub response: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// A trace file to replay as is; every other workload key is ignored.
    pub trace: Option<PathBuf>,
    /// A chat corpus to build sessions from instead of a synthetic spec.
    pub corpus: Option<PathBuf>,
    pub preset: Preset,
    pub sessions: usize,
    /// Overrides the preset's generator parameters.
    pub synthetic: Option<SyntheticSpec>,
    /// Concurrent users; one trace and one grid column per entry.
    pub users: Vec<u32>,
    pub miss_fraction: f64,
    /// Fraction of sessions marked high priority.
    pub priority_mix: f64,
    /// Replace every turn with these token counts.
    pub fixed_tokens: Option<FixedTokens>,
    pub arrivals: ArrivalOptions,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            trace: None,
            corpus: None,
            preset: Preset::Sharegpt,
            sessions: 1000,
            synthetic: None,
            users: vec![64],
            miss_fraction: 0.0,
            priority_mix: 0.0,
            fixed_tokens: None,
            arrivals: ArrivalOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub policies: Vec<Policy>,
    /// Root of the cell directories.
    pub output_dir: Option<PathBuf>,
    pub cluster: ClusterConfig,
    pub workload: WorkloadConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            policies: Policy::ALL.to_vec(),
            output_dir: None,
            cluster: ClusterConfig::default(),
            workload: WorkloadConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// The file if given, otherwise defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate().context("cluster")?;
        let w = &self.workload;
        if self.policies.is_empty() {
            bail!("policies: at least one policy is required");
        }
        if w.trace.is_none() {
            if w.users.is_empty() {
                bail!("workload.users: at least one user count is required");
            }
            if w.users.contains(&0) {
                bail!("workload.users: user counts must be positive");
            }
            if w.sessions == 0 {
                bail!("workload.sessions must be positive");
            }
        }
        if !(0.0..=1.0).contains(&w.miss_fraction) {
            bail!("workload.miss_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&w.priority_mix) {
            bail!("workload.priority_mix must lie in [0, 1]");
        }
        if self.is_agent() && (w.miss_fraction > 0.0 || w.priority_mix > 0.0) {
            bail!("workload: agent jobs carry their own advisories; miss_fraction and priority_mix must be 0");
        }
        if let Some(f) = &w.fixed_tokens {
            if f.prompt == 0 || f.response == 0 {
                bail!("workload.fixed_tokens: token counts must be positive");
            }
        }
        Ok(())
    }

    fn is_agent(&self) -> bool {
        let w = &self.workload;
        w.preset == Preset::Agent && w.corpus.is_none() && w.synthetic.is_none()
    }

    fn scripts(&self) -> Result<Vec<SessionScript>> {
        let w = &self.workload;
        if let Some(path) = &w.corpus {
            return Ok(load_chat_corpus(path, w.sessions, DEFAULT_WORDS_PER_TOKEN)?);
        }
        let spec = w.synthetic.clone().unwrap_or_else(|| match w.preset {
            Preset::HeavyTailed => SyntheticSpec::heavy_tailed(w.sessions),
            Preset::SingleTurn => SyntheticSpec::single_turn(w.sessions),
            _ => SyntheticSpec::sharegpt_like(w.sessions),
        });
        Ok(spec.generate(self.seed))
    }

    /// The trace for one user count.
    pub fn trace(&self, users: u32) -> Result<Trace> {
        let w = &self.workload;
        if let Some(path) = &w.trace {
            return Ok(read_trace(path)?);
        }
        let mut trace = if self.is_agent() {
            generate_agent_trace(&metagpt_workload(w.sessions as u32, users), self.seed)?
        } else {
            let mut scripts = self.scripts()?;
            if w.priority_mix > 0.0 {
                assign_priorities(&mut scripts, w.priority_mix, self.seed);
            }
            let base = synthesize_arrivals(&scripts, users, self.seed, &w.arrivals)?;
            inject_advisories(&base, w.miss_fraction, self.seed)
        };
        if let Some(f) = &w.fixed_tokens {
            trace = with_fixed_tokens(&trace, f.prompt, f.response);
        }
        Ok(trace)
    }

    /// User counts of the grid; a replayed trace brings its own.
    pub fn user_counts(&self) -> Result<Vec<u32>> {
        match &self.workload.trace {
            Some(path) => Ok(vec![read_trace(path)?.concurrency_target]),
            None => Ok(self.workload.users.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("seed = 1\nbogus = 2\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[cluster]\nnodez = 2\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[workload]\nuser = [1]\n").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: ExperimentConfig = toml::from_str("policies = [\"swap\"]\n[cluster]\nnodes = 2\n").unwrap();
        assert_eq!(cfg.policies, vec![Policy::Swap]);
        assert_eq!(cfg.cluster.nodes, 2);
        assert_eq!(cfg.cluster.gpu, ClusterConfig::default().gpu);
        assert_eq!(cfg.workload.users, vec![64]);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.miss_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.workload.users = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.cluster.nodes = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_turn_preset_has_no_follow_ups() {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.preset = Preset::SingleTurn;
        cfg.workload.sessions = 50;
        let t = cfg.trace(8).unwrap();
        assert_eq!(t.multi_turn_fraction(), 0.0);
    }

    #[test]
    fn fixed_tokens_shape() {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.sessions = 50;
        cfg.workload.fixed_tokens = Some(FixedTokens { prompt: 1024, response: 1 });
        let t = cfg.trace(8).unwrap();
        assert!(t.sessions.iter().flat_map(|s| &s.turns).all(|t| t.prompt_tokens == 1024 && t.response_tokens == 1));
    }
}
