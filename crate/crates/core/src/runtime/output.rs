//! On-disk artifacts of a run: metrics and assignment CSVs, the JSON-lines
//! event log, the summary and per-model checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RoundReport, RunResult};
use crate::checkpoint;
use crate::error::Result;
use crate::model::{mac_count, ModelId};

pub const METRICS_HEADER: &str = "round,model_count,largest_macs,mean_loss,doc,cum_macs,round_time_s,comm_mb";
pub const ASSIGNMENTS_HEADER: &str = "round,model,participants,mean_loss,mean_utility";

pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        let doc = r.doc.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.round, r.model_count, r.largest_macs, r.mean_loss, doc, r.cum_macs, r.round_time_s, r.comm_mb
        );
    }
    s
}

/// One row per (round, model): participant count, mean training loss (empty
/// without participants) and mean utility.
pub fn assignments_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from(ASSIGNMENTS_HEADER);
    s.push('\n');
    for r in reports {
        for (model, u) in &r.mean_utility {
            let n = r.participants.get(model).copied().unwrap_or(0);
            let l = r.model_loss.get(model).map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", r.round, model, n, l, u);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryModel {
    pub id: ModelId,
    pub parent: Option<ModelId>,
    pub created_round: usize,
    pub macs: u64,
    pub params: usize,
    pub widths: Vec<usize>,
    pub clients_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_acc: f64,
    pub iqr_acc: f64,
    pub total_macs: u64,
    pub models: Vec<SummaryModel>,
    pub rounds: usize,
    pub converged_at: Option<usize>,
}

impl Summary {
    pub fn from_result(result: &RunResult) -> Self {
        let models = result
            .models
            .iter()
            .map(|m| SummaryModel {
                id: m.id,
                parent: m.parent_id,
                created_round: m.created_round,
                macs: mac_count(m),
                params: m.param_count(),
                widths: m.cells.iter().map(|c| c.out_dim).collect(),
                clients_evaluated: result.accuracies.values().filter(|e| e.model == m.id).count(),
            })
            .collect();
        Self {
            mean_acc: result.mean_acc,
            iqr_acc: result.iqr_acc,
            total_macs: result.total_macs,
            models,
            rounds: result.reports.len(),
            converged_at: result.converged_at,
        }
    }
}

/// Writes metrics, assignments, events, summary and checkpoints of `result`
/// into `dir`, creating it if needed.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&result.reports))?;
    fs::write(dir.join("assignments.csv"), assignments_csv(&result.reports))?;
    let mut events = String::new();
    for e in &result.events {
        events.push_str(&serde_json::to_string(e)?);
        events.push('\n');
    }
    fs::write(dir.join("events.jsonl"), events)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&Summary::from_result(result))?,
    )?;
    for m in &result.models {
        checkpoint::save(
            &dir.join("checkpoints").join(format!("model_{}.json", m.id)),
            m,
            &result.weights[&m.id],
        )?;
    }
    Ok(())
}
