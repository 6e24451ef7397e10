use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::harness::EvalReport;
use super::metrics::Metric;
use crate::error::{Error, Result};
use crate::rendering::RenderMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: RenderMode,
    pub calibrated: bool,
    pub mean: f64,
    pub std: f64,
    /// `mean` minus the baseline row's mean.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub task_id: String,
    pub metric: Metric,
    pub baseline: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Lines reports up against `reports[baseline]`. All reports must share a
/// task and a metric.
pub fn compare_runs(reports: &[EvalReport], baseline: usize) -> Result<ComparisonTable> {
    let base = reports.get(baseline).ok_or(Error::LabelIndex {
        index: baseline,
        count: reports.len(),
    })?;
    for r in reports {
        if r.metric != base.metric {
            return Err(Error::Invalid(format!(
                "cannot compare {} with {} reports",
                r.metric, base.metric
            )));
        }
        if r.task_id != base.task_id {
            return Err(Error::Invalid(format!(
                "cannot compare task {} with task {}",
                r.task_id, base.task_id
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label(),
            mode: r.mode,
            calibrated: r.calibrated,
            mean: r.mean,
            std: r.std,
            delta: r.mean - base.mean,
        })
        .collect();
    Ok(ComparisonTable {
        task_id: base.task_id.clone(),
        metric: base.metric,
        baseline,
        rows,
    })
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(out, "task {}  metric {}", self.task_id, self.metric);
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}",
            "run", "mean", "std", "delta"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let delta = if i == self.baseline {
                "base".to_string()
            } else {
                format!("{:+.4}", r.delta)
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8}",
                r.label, r.mean, r.std, delta
            );
        }
        out
    }
}
