//! Runs the (policy, users) grid and writes one directory per cell.

use crate::experiment::ExperimentConfig;
use anyhow::{bail, Context, Result};
use kvsim::config::Policy;
use kvsim::simcore::{run, MetricsReport, RequestRecord, RunOptions};
use kvsim::workload::Trace;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Cell {
    pub policy: Policy,
    pub users: u32,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.policy, self.users, self.seed)
    }
}

pub struct CellResult {
    pub cell: Cell,
    pub outcome: Result<MetricsReport>,
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().context("path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn requests_csv(records: &[RequestRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn run_cell(cfg: &ExperimentConfig, trace: &Trace, cell: &Cell, dir: &Path) -> Result<MetricsReport> {
    let out = run(trace, &cfg.cluster, cell.policy, &RunOptions::default())?;
    let mut report = out.report;
    report.label = cell.name();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("requests.csv"), &requests_csv(&out.requests)?)?;
    let mut provenance = cfg.clone();
    provenance.policies = vec![cell.policy];
    provenance.workload.users = vec![cell.users];
    write_atomic(&dir.join("config.toml"), provenance.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Cells in grid order: user counts outermost, then policies.
pub fn cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for users in cfg.user_counts()? {
        for &policy in &cfg.policies {
            out.push(Cell {
                policy,
                users,
                seed: cfg.seed,
            });
        }
    }
    Ok(out)
}

/// Runs every cell on at most `jobs` threads. Existing cell directories are
/// an error unless `force` is set.
pub fn run_grid(cfg: &ExperimentConfig, root: &Path, jobs: usize, force: bool) -> Result<Vec<CellResult>> {
    let cells = cells(cfg)?;
    let dirs: Vec<PathBuf> = cells.iter().map(|c| root.join(c.name())).collect();
    let taken: Vec<String> = dirs.iter().filter(|d| d.exists()).map(|d| d.display().to_string()).collect();
    if !taken.is_empty() && !force {
        bail!("output already exists (use --force to overwrite): {}", taken.join(", "));
    }
    let mut users: Vec<u32> = cells.iter().map(|c| c.users).collect();
    users.dedup();
    let traces: Vec<(u32, Result<Trace>)> = users.iter().map(|&u| (u, cfg.trace(u))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let results = pool.install(|| {
        cells
            .par_iter()
            .zip(dirs.par_iter())
            .map(|(cell, dir)| {
                let trace = &traces.iter().find(|(u, _)| *u == cell.users).unwrap().1;
                let outcome = match trace {
                    Ok(t) => run_cell(cfg, t, cell, dir),
                    Err(e) => Err(anyhow::anyhow!("building trace: {e:#}")),
                };
                match &outcome {
                    Ok(_) => log::info!("{} done", cell.name()),
                    Err(e) => log::error!("{} failed: {e:#}", cell.name()),
                }
                CellResult {
                    cell: cell.clone(),
                    outcome,
                }
            })
            .collect()
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_users_by_policies() {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.users = vec![8, 16, 32, 64];
        cfg.policies = vec![Policy::Recompute, Policy::Swap, Policy::Symphony];
        let cells = cells(&cfg).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].name(), "recompute_8_7");
        assert_eq!(cells[11].name(), "symphony_64_7");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
