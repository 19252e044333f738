use super::evalrun::{append_results, run_eval, ResultRow};
use super::train::run_train;
use super::{ActionMode, RunConfig};
use crate::envs::EvalOptions;
use crate::error::{Error, Result};
use crate::guidance::GuidanceAlgo;
use crate::nets::Backbone;
use rayon::prelude::*;
use std::path::Path;

/// One swept component; values replace the corresponding config field,
/// everything else stays fixed (control-variable protocol).
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Guidance(Vec<GuidanceAlgo>),
    Backbone(Vec<Backbone>),
    Depth(Vec<usize>),
    Stride(Vec<usize>),
    ActionMode(Vec<ActionMode>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Guidance(_) => "guidance",
            SweepAxis::Backbone(_) => "backbone",
            SweepAxis::Depth(_) => "depth",
            SweepAxis::Stride(_) => "stride",
            SweepAxis::ActionMode(_) => "action-mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Guidance(v) => v.len(),
            SweepAxis::Backbone(v) => v.len(),
            SweepAxis::Depth(v) => v.len(),
            SweepAxis::Stride(v) => v.len(),
            SweepAxis::ActionMode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_label(&self, i: usize) -> String {
        match self {
            SweepAxis::Guidance(v) => format!("{:?}", v[i]).to_lowercase(),
            SweepAxis::Backbone(v) => format!("{:?}", v[i]).to_lowercase(),
            SweepAxis::Depth(v) => v[i].to_string(),
            SweepAxis::Stride(v) => v[i].to_string(),
            SweepAxis::ActionMode(v) => format!("{:?}", v[i]).to_lowercase(),
        }
    }

    fn apply(&self, config: &mut RunConfig, i: usize) {
        match self {
            SweepAxis::Guidance(v) => config.guidance.algo = v[i],
            SweepAxis::Backbone(v) => config.planner.backbone = v[i],
            SweepAxis::Depth(v) => config.planner.blocks = v[i],
            SweepAxis::Stride(v) => config.planner.stride = v[i],
            SweepAxis::ActionMode(v) => config.planner.action_mode = v[i],
        }
    }

    /// Parse `name=v1,v2,...` from the CLI.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, values) = text
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("axis `{text}` is not name=v1,v2,...")))?;
        let vals: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
        if vals.is_empty() {
            return Err(Error::InvalidConfig(format!("axis `{name}` has no values")));
        }
        let parse_err = |v: &str| Error::InvalidConfig(format!("bad value `{v}` for axis `{name}`"));
        match name {
            "guidance" => Ok(SweepAxis::Guidance(
                vals.iter()
                    .map(|v| match *v {
                        "none" => Ok(GuidanceAlgo::None),
                        "cg" => Ok(GuidanceAlgo::Cg),
                        "cfg" => Ok(GuidanceAlgo::Cfg),
                        "mcss" => Ok(GuidanceAlgo::Mcss),
                        other => Err(parse_err(other)),
                    })
                    .collect::<Result<_>>()?,
            )),
            "backbone" => Ok(SweepAxis::Backbone(
                vals.iter()
                    .map(|v| match *v {
                        "mlp" => Ok(Backbone::Mlp),
                        "unet1d" => Ok(Backbone::Unet1d),
                        "dit1d" => Ok(Backbone::Dit1d),
                        other => Err(parse_err(other)),
                    })
                    .collect::<Result<_>>()?,
            )),
            "depth" => Ok(SweepAxis::Depth(
                vals.iter()
                    .map(|v| v.parse::<usize>().map_err(|_| parse_err(v)))
                    .collect::<Result<_>>()?,
            )),
            "stride" => Ok(SweepAxis::Stride(
                vals.iter()
                    .map(|v| v.parse::<usize>().map_err(|_| parse_err(v)))
                    .collect::<Result<_>>()?,
            )),
            "action-mode" => Ok(SweepAxis::ActionMode(
                vals.iter()
                    .map(|v| match *v {
                        "separate" => Ok(ActionMode::Separate),
                        "joint" => Ok(ActionMode::Joint),
                        other => Err(parse_err(other)),
                    })
                    .collect::<Result<_>>()?,
            )),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis `{other}` (choices: guidance, backbone, depth, stride, action-mode)"
            ))),
        }
    }
}

/// One sweep cell: the base config with one value chosen per axis.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub index: usize,
    pub labels: Vec<(String, String)>,
    pub config: RunConfig,
}

/// Cross product of the axes over the base config.
pub fn sweep_cells(base: &RunConfig, axes: &[SweepAxis]) -> Result<Vec<SweepCell>> {
    if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
        return Err(Error::InvalidConfig("sweep needs at least one non-empty axis".into()));
    }
    let mut cells = vec![SweepCell { index: 0, labels: vec![], config: base.clone() }];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.len());
        for cell in &cells {
            for i in 0..axis.len() {
                let mut config = cell.config.clone();
                axis.apply(&mut config, i);
                let mut labels = cell.labels.clone();
                labels.push((axis.name().to_string(), axis.value_label(i)));
                next.push(SweepCell { index: 0, labels, config });
            }
        }
        cells = next;
    }
    for (i, c) in cells.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(cells)
}

pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SweepSummaryRow>,
}

/// Mean +/- standard error of the normalized score per axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummaryRow {
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub mean_score: f64,
    pub stderr_score: f64,
    pub mean_success: f64,
}

/// Train + evaluate every (cell, seed) pair. Cells run in parallel on up to
/// `workers` threads; rows are appended to the CSV in deterministic
/// (cell, seed) order once all cells finish.
pub fn run_sweep(
    base: &RunConfig,
    axes: &[SweepAxis],
    seeds: &[u64],
    out_dir: &Path,
    results_csv: &Path,
    workers: usize,
) -> Result<SweepOutcome> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    let cells = sweep_cells(base, axes)?;
    for cell in &cells {
        cell.config.validate()?;
    }
    std::fs::create_dir_all(out_dir)?;

    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.index, s)))
        .collect();
    let run_job = |&(ci, seed): &(usize, u64)| -> Result<ResultRow> {
        let cell = &cells[ci];
        let hash = cell.config.config_hash();
        let dir = out_dir.join(format!("{hash}/seed{seed}"));
        let (bundle, _report, _paths) = run_train(&cell.config, seed, Some(&dir))?;
        let opts = EvalOptions {
            episodes: cell.config.eval.episodes,
            replan_every: cell.config.eval.replan_every,
            seed: cell.config.eval.seed,
            workers: 1,
            rollout_dir: None,
        };
        run_eval(&bundle, &opts, &dir.display().to_string())
    };
    let results: Vec<Result<ResultRow>> = if workers == 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_job).collect())
    };
    let mut rows = Vec::with_capacity(jobs.len());
    for r in results {
        rows.push(r?);
    }
    append_results(results_csv, &rows)?;

    let summary = summarize_cells(&cells, seeds.len(), &rows);
    Ok(SweepOutcome { rows, summary })
}

fn summarize_cells(cells: &[SweepCell], seeds: usize, rows: &[ResultRow]) -> Vec<SweepSummaryRow> {
    let mut out = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let cell_rows = &rows[ci * seeds..(ci + 1) * seeds];
        let scores: Vec<f64> = cell_rows.iter().map(|r| r.normalized_score).collect();
        let successes: Vec<f64> = cell_rows.iter().map(|r| r.success_rate).collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let label = cell
            .labels
            .iter()
            .map(|(a, v)| format!("{a}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let axis = cell.labels.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>().join("x");
        out.push(SweepSummaryRow {
            axis,
            value: label,
            runs: cell_rows.len(),
            mean_score: mean,
            stderr_score: (var / n).sqrt(),
            mean_success: successes.iter().sum::<f64>() / n,
        });
    }
    out
}

/// Recompute a per-value summary table from a results CSV, grouping by one
/// column (pure function of the CSV).
pub fn summarize(rows: &[ResultRow], group_by: &str) -> Result<Vec<SweepSummaryRow>> {
    let key = |r: &ResultRow| -> Result<String> {
        Ok(match group_by {
            "guidance" => r.guidance.clone(),
            "backbone" => r.backbone.clone(),
            "depth" => r.blocks.to_string(),
            "stride" => r.stride.to_string(),
            "action-mode" => r.action_mode.clone(),
            "config" => r.config_hash.clone(),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown summary column `{other}`"
                )))
            }
        })
    };
    let mut groups: std::collections::BTreeMap<String, Vec<&ResultRow>> = Default::default();
    for r in rows {
        groups.entry(key(r)?).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(value, rs)| {
            let n = rs.len() as f64;
            let scores: Vec<f64> = rs.iter().map(|r| r.normalized_score).collect();
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            SweepSummaryRow {
                axis: group_by.to_string(),
                value,
                runs: rs.len(),
                mean_score: mean,
                stderr_score: (var / n).sqrt(),
                mean_success: rs.iter().map(|r| r.success_rate).sum::<f64>() / n,
            }
        })
        .collect())
}
