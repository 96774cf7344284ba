//! Training sweeps over (m, d_model, h, D_K, seed), one JSON line per run.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::SweepRecord;
use crate::error::{invalid, Result};
use crate::train::{train_run, TrainConfig};

/// Default step budget per (m, d_model).
pub fn default_step_cutoff(m: usize, d_model: usize) -> usize {
    match (m, d_model) {
        (256, 16) => 30_000,
        (512, 16) => 80_000,
        (1024, _) | (2048, _) => 80_000,
        (4096, _) => 200_000,
        _ => 20_000,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffOverride {
    pub m: usize,
    pub d_model: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Strategy {
    /// every (h, D_K) on the grid
    Full,
    /// ascending D_K per (m, d_model); stop `extra_levels` levels after the
    /// first level where some h reaches the bar
    Adaptive { extra_levels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ms: Vec<usize>,
    pub d_models: Vec<usize>,
    pub heads: Vec<usize>,
    /// total key dimensions; a (h, D_K) pair is run when h divides D_K
    pub dks: Vec<usize>,
    pub seeds: usize,
    pub seed_offset: u64,
    pub strategy: Strategy,
    pub bar: f64,
    pub cutoffs: Vec<CutoffOverride>,
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ms: vec![64, 128, 256, 512],
            d_models: vec![16, 32, 64],
            heads: vec![1, 2, 4, 8, 16, 32, 64],
            dks: vec![4, 8, 12, 16, 20, 24, 28, 32, 40, 48, 56, 64, 80, 96, 112, 128, 160, 192, 224, 256],
            seeds: 10,
            seed_offset: 0,
            strategy: Strategy::Full,
            bar: 0.99,
            cutoffs: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct HashedPart<'a> {
    train: &'a TrainConfig,
    cutoffs: Vec<(usize, usize, usize)>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ms.is_empty() || self.d_models.is_empty() || self.heads.is_empty() || self.dks.is_empty() {
            return invalid("sweep grid axes must be non-empty");
        }
        if self.seeds == 0 {
            return invalid("sweep needs at least one seed");
        }
        if self.heads.contains(&0) || self.dks.contains(&0) {
            return invalid("head counts and D_K values must be positive");
        }
        if !(self.bar > 0.0 && self.bar <= 1.0) {
            return invalid(format!("bar must lie in (0, 1], got {}", self.bar));
        }
        Ok(())
    }

    pub fn steps_for(&self, m: usize, d_model: usize) -> usize {
        self.cutoffs
            .iter()
            .find(|c| c.m == m && c.d_model == d_model)
            .map_or_else(|| default_step_cutoff(m, d_model), |c| c.steps)
    }

    /// SHA-256 over everything that changes a run's outcome for a given key
    /// (training settings and step budgets), so a log can be resumed under a
    /// widened grid but not under different training settings.
    pub fn config_hash(&self) -> String {
        let mut cutoffs: Vec<(usize, usize, usize)> = Vec::new();
        for &m in &self.ms {
            for &d in &self.d_models {
                cutoffs.push((m, d, self.steps_for(m, d)));
            }
        }
        let part = HashedPart { train: &self.train, cutoffs };
        let bytes = serde_json::to_vec(&part).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    fn sorted_dks(&self) -> Vec<usize> {
        let mut v = self.dks.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn sorted_heads(&self) -> Vec<usize> {
        let mut v = self.heads.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn train_for(&self, m: usize, d_model: usize) -> TrainConfig {
        TrainConfig { max_steps: self.steps_for(m, d_model), ..self.train.clone() }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the sweep log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub m: usize,
    pub d_model: usize,
    pub h: usize,
    #[serde(rename = "D_K")]
    pub dk: usize,
    pub seed: u64,
    pub test_f1: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub config_hash: String,
    pub ell: usize,
    pub ell_test: usize,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        (self.m, self.d_model, self.h, self.dk, self.seed)
    }
}

pub type RunKey = (usize, usize, usize, usize, u64);

/// Runs every missing job, calling `sink` once per finished run in job
/// order. `existing` records are never re-run; a record whose config hash
/// differs from this config is an error.
pub fn run_sweep(
    cfg: &SweepConfig,
    existing: &[RunRecord],
    parallel: bool,
    mut sink: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    if let Some(bad) = existing.iter().find(|r| r.config_hash != hash) {
        return invalid(format!(
            "sweep log was written under config hash {} but the current config hashes to {hash}",
            bad.config_hash
        ));
    }
    let mut all: Vec<RunRecord> = existing.to_vec();
    let done: HashSet<RunKey> = existing.iter().map(RunRecord::key).collect();
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|s| s + cfg.seed_offset).collect();
    let heads = cfg.sorted_heads();

    for &m in &cfg.ms {
        for &d in &cfg.d_models {
            let tcfg = cfg.train_for(m, d);
            let mut passed_at: Option<usize> = None;
            for (level, &dk) in cfg.sorted_dks().iter().enumerate() {
                if let (Strategy::Adaptive { extra_levels }, Some(p)) = (&cfg.strategy, passed_at) {
                    if level > p + extra_levels {
                        break;
                    }
                }
                let jobs: Vec<RunKey> = heads
                    .iter()
                    .filter(|&&h| dk % h == 0)
                    .flat_map(|&h| seeds.iter().map(move |&s| (m, d, h, dk, s)))
                    .filter(|k| !done.contains(k))
                    .collect();
                let run = |&(m, d, h, dk, seed): &RunKey| -> Result<RunRecord> {
                    let r = train_run(m, d, h, dk, seed, &tcfg)?;
                    Ok(RunRecord {
                        m,
                        d_model: d,
                        h,
                        dk,
                        seed,
                        test_f1: r.test_f1,
                        steps: r.steps_used,
                        stopped_early: r.stopped_early,
                        config_hash: hash.clone(),
                        ell: tcfg.ell,
                        ell_test: tcfg.test_ell(),
                    })
                };
                let fresh: Vec<RunRecord> = if parallel {
                    jobs.par_iter().map(run).collect::<Result<_>>()?
                } else {
                    jobs.iter().map(run).collect::<Result<_>>()?
                };
                for r in &fresh {
                    sink(r)?;
                }
                all.extend(fresh);

                if passed_at.is_none() {
                    let level_recs: Vec<RunRecord> =
                        all.iter().filter(|r| r.m == m && r.d_model == d && r.dk == dk).cloned().collect();
                    if aggregate(&level_recs)?.iter().any(|s| s.mean_f1 >= cfg.bar) {
                        passed_at = Some(level);
                    }
                }
            }
        }
    }
    Ok(all)
}

/// Groups runs by (m, d_model, h, D_K) into per-point seed statistics.
pub fn aggregate(runs: &[RunRecord]) -> Result<Vec<SweepRecord>> {
    let mut groups: BTreeMap<(usize, usize, usize, usize), Vec<(u64, f64)>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.m, r.d_model, r.h, r.dk)).or_default().push((r.seed, r.test_f1));
    }
    groups
        .into_iter()
        .map(|((m, d, h, dk), v)| SweepRecord::from_seeds(m, d, h, dk, v))
        .collect()
}
