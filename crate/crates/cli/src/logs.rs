//! CSV logs. Every file has a header and is read back by the same types.

use std::fs::File;
use std::path::Path;

use flowgrpo_core::baselines::RwrWeights;
use flowgrpo_core::flow::PretrainLogRow;
use flowgrpo_core::grpo::TrainLogRow;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// One training iteration; `eval_reward` and `diversity` are empty on
/// iterations without an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub eval_reward: Option<f64>,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub diversity: Option<f64>,
    pub net_evals: u64,
    pub wall_ms: u64,
}

impl TrainRecord {
    pub fn from_row(row: &TrainLogRow, wall_clock: bool) -> Self {
        Self {
            iter: row.iter,
            mean_reward: row.mean_reward,
            eval_reward: row.eval_reward,
            mean_kl: row.mean_kl,
            clip_frac: row.clip_frac,
            diversity: row.diversity,
            net_evals: row.net_evals,
            wall_ms: if wall_clock { row.wall_ms } else { 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwrRecord {
    pub iter: usize,
    pub condition: usize,
    pub index: usize,
    pub reward: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub axis: String,
    pub value: f64,
    pub final_reward: Option<f64>,
    pub diversity: Option<f64>,
    /// Mean velocity evaluations per training iteration.
    pub net_evals: Option<f64>,
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub status: String,
    pub final_reward: Option<f64>,
    pub diversity: Option<f64>,
    pub net_evals: Option<f64>,
    pub wall_s: Option<f64>,
    pub error: String,
}

/// Appending CSV writer that flushes after every record, so a crash leaves
/// a readable partial log.
pub struct CsvLog {
    inner: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> CliResult<Self> {
        Ok(Self {
            inner: csv::Writer::from_path(path)?,
        })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        self.inner.serialize(record)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_all<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::CliError::Io(e.to_string()))?;
    crate::rundir::write_atomic(path, &bytes)
}

pub fn read_all<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn pretrain_records(log: &[PretrainLogRow], wall_clock: bool) -> Vec<PretrainRecord> {
    log.iter()
        .map(|r| PretrainRecord {
            step: r.step,
            loss: r.loss,
            wall_ms: if wall_clock { r.wall_ms } else { 0 },
        })
        .collect()
}

pub fn rwr_records(weights: &[RwrWeights]) -> Vec<RwrRecord> {
    weights
        .iter()
        .flat_map(|g| {
            g.rewards
                .iter()
                .zip(&g.weights)
                .enumerate()
                .map(move |(index, (&reward, &weight))| RwrRecord {
                    iter: g.iter,
                    condition: g.condition,
                    index,
                    reward,
                    weight,
                })
        })
        .collect()
}
