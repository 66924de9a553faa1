//! The iterative self-transfer framework: direct training, blocks of
//! pseudo-label iterations each closed by a transfer iteration, a stopping
//! rule, and the final training, all persisted under one run directory.

mod config;
mod run;

pub use config::{DataConfig, FinalArch, FrameworkConfig, RunConfig};
pub use run::{run_framework, FrameworkData, FrameworkRun, RunLayout};
pub(crate) use run::read_records;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationKind {
    Direct,
    Pl,
    Dantr,
    Final,
}

impl IterationKind {
    pub fn label(self) -> &'static str {
        match self {
            IterationKind::Direct => "direct",
            IterationKind::Pl => "pl",
            IterationKind::Dantr => "dantr",
            IterationKind::Final => "final",
        }
    }
}

/// One iteration of the framework. Paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub kind: IterationKind,
    /// Training seed of each initialization.
    pub seeds: Vec<u64>,
    /// Validation MSE of the model each initialization contributes (the
    /// teacher when one is kept), normalized units.
    pub per_seed_val_mse: Vec<f64>,
    /// Validation MSE of the raw students, for reference.
    pub student_val_mse: Vec<f64>,
    pub avg_val_mse: f64,
    /// `1 - avg / previous avg`; absent for the first iteration.
    pub relative_reduction: Option<f64>,
    pub checkpoints: Vec<String>,
    pub chosen_checkpoint: String,
    /// Model that produced the pseudo labels used by this iteration.
    pub parent_checkpoint: Option<String>,
    pub source_dataset_ref: Option<String>,
    pub target_dataset_ref: String,
    /// Only set by the final iteration.
    pub test_mse: Option<f64>,
    /// Exploratory iteration that does not advance the schedule.
    #[serde(default)]
    pub tentative: bool,
}

impl IterationRecord {
    pub fn chosen_index(&self) -> usize {
        argmin(&self.per_seed_val_mse)
    }
}

/// Everything a run produced, in schedule order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub master_seed: u64,
    pub iterations: Vec<IterationRecord>,
    pub test_mse: Option<f64>,
    /// Checkpoint of the selected final model.
    pub model_l: Option<String>,
    pub complete: bool,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub fn relative_reduction(prev: f64, cur: f64) -> f64 {
    1.0 - cur / prev
}

/// Reduction of each initialization slot against the same slot of `prev`.
pub fn per_seed_reduction(prev: &IterationRecord, cur: &IterationRecord) -> Vec<f64> {
    prev.per_seed_val_mse
        .iter()
        .zip(&cur.per_seed_val_mse)
        .map(|(p, c)| relative_reduction(*p, *c))
        .collect()
}

/// True once `max_iterations` iterations exist or the last `stop_patience`
/// reductions all fall below `stop_epsilon`.
pub fn should_stop(history: &[IterationRecord], cfg: &FrameworkConfig) -> bool {
    if history.len() >= cfg.max_iterations {
        return true;
    }
    let reductions: Vec<f64> = history.iter().filter_map(|r| r.relative_reduction).collect();
    reductions.len() >= cfg.stop_patience
        && reductions[reductions.len() - cfg.stop_patience..]
            .iter()
            .all(|&r| r < cfg.stop_epsilon)
}

/// Kind of the next iteration, or `None` once the final training is done.
pub fn next_kind(history: &[IterationRecord], cfg: &FrameworkConfig) -> Option<IterationKind> {
    let Some(last) = history.last() else {
        return Some(IterationKind::Direct);
    };
    if last.kind == IterationKind::Final {
        return None;
    }
    if should_stop(history, cfg) {
        return Some(IterationKind::Final);
    }
    let pl_run = history.iter().rev().take_while(|r| r.kind == IterationKind::Pl).count();
    Some(if pl_run < cfg.pl_per_block {
        IterationKind::Pl
    } else {
        IterationKind::Dantr
    })
}
