//! Repeated pretraining across capsule counts on one dataset.

use serde::{Deserialize, Serialize};

use super::{eval_series, pretrain, CheckpointState, LogRecord, OnlineEvalRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalProtocol, EvalResults, EvalSelection, MetricReport};
use crate::synthgen::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_caps: usize,
    pub pose_dim: usize,
    pub dataset_checksum: String,
    pub final_online_top1: Option<f64>,
    pub online: Vec<OnlineEvalRecord>,
    pub results: EvalResults,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn reports(&self) -> Vec<MetricReport> {
        self.rows.iter().map(|r| r.report.clone()).collect()
    }
}

/// One trained run of a sweep, with its final state and log.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub row: SweepRow,
    pub state: CheckpointState,
    pub log: Vec<LogRecord>,
}

/// Pretrains and evaluates `base` once per entry of `n_caps`, changing
/// nothing else. `on_run` sees each finished run.
pub fn capsule_sweep(
    base: &TrainConfig,
    n_caps: &[usize],
    dataset: &Dataset,
    protocol: &EvalProtocol,
    selection: EvalSelection,
    mut on_run: impl FnMut(&SweepRun) -> Result<()>,
) -> Result<SweepReport> {
    if n_caps.is_empty() {
        return Err(Error::Config(
            "capsule sweep needs at least one capsule count".into(),
        ));
    }
    let checksum = dataset.checksum()?;
    let mut rows = Vec::new();
    for &k in n_caps {
        let mut config = base.clone();
        config.model.n_caps = k;
        let (state, log) = pretrain(&config, dataset)?;
        let (model, params) = state.model()?;
        let split = dataset.object_split(config.val_fraction)?;
        let results = evaluate(&model, &params, dataset, &split, protocol, selection)?;
        let online = eval_series(&log);
        let projector = serde_json::to_value(config.model.projector)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        let row = SweepRow {
            n_caps: k,
            pose_dim: config.model.pose_dim(),
            dataset_checksum: checksum.clone(),
            final_online_top1: online.last().map(|r| r.classification_top1),
            online,
            report: results.report(&format!("n_caps={k}"), &projector, k, protocol),
            results,
        };
        let run = SweepRun { row, state, log };
        on_run(&run)?;
        rows.push(run.row);
    }
    Ok(SweepReport { rows })
}
