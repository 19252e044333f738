use super::train::TrainedBundle;
use crate::envs::EvalOptions;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const RESULTS_VERSION: u32 = 1;

/// One evaluation outcome, one CSV row. Carries the swept axes so summaries
/// are recomputable from the CSV alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub env_id: String,
    pub guidance: String,
    pub backbone: String,
    pub blocks: usize,
    pub stride: usize,
    pub action_mode: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub wall_time_s: f64,
    pub checkpoint: String,
}

impl ResultRow {
    /// Equality on everything that must reproduce bit-for-bit across reruns
    /// (wall time legitimately varies).
    pub fn same_outcome(&self, other: &ResultRow) -> bool {
        self.version == other.version
            && self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.env_id == other.env_id
            && self.guidance == other.guidance
            && self.backbone == other.backbone
            && self.blocks == other.blocks
            && self.stride == other.stride
            && self.action_mode == other.action_mode
            && self.episodes == other.episodes
            && self.mean_return == other.mean_return
            && self.stderr_return == other.stderr_return
            && self.success_rate == other.success_rate
            && self.normalized_score == other.normalized_score
            && self.checkpoint == other.checkpoint
    }
}

/// Evaluate a trained bundle and build its result row.
pub fn run_eval(bundle: &TrainedBundle, opts: &EvalOptions, checkpoint: &str) -> Result<ResultRow> {
    let start = std::time::Instant::now();
    let stats = bundle.evaluate(opts)?;
    let cfg = &bundle.config;
    Ok(ResultRow {
        version: RESULTS_VERSION,
        config_hash: cfg.config_hash(),
        seed: bundle.seed,
        env_id: bundle.env_id.clone(),
        guidance: format!("{:?}", cfg.guidance.algo).to_lowercase(),
        backbone: format!("{:?}", cfg.planner.backbone).to_lowercase(),
        blocks: cfg.planner.blocks,
        stride: cfg.planner.stride,
        action_mode: format!("{:?}", cfg.planner.action_mode).to_lowercase(),
        episodes: opts.episodes,
        mean_return: stats.mean_return,
        stderr_return: stats.stderr_return,
        success_rate: stats.success_rate,
        normalized_score: stats.normalized_score.unwrap_or(f64::NAN),
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint: checkpoint.to_string(),
    })
}

/// Append rows to a results CSV (header written once, schema versioned per
/// row; the file is append-only).
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut out = Vec::new();
    for record in r.deserialize() {
        out.push(record.map_err(Error::from)?);
    }
    Ok(out)
}
