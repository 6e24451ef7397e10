use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean, population_std, Metric};
use crate::error::{Error, Result};
use crate::inference::OptionScorer;
use crate::rendering::RenderMode;
use crate::task_schema::{label_variant_sweep, TaskKind, TaskSet, Verbalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub template_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: String,
    /// Mean over templates.
    pub value: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub run_label: Option<String>,
    pub seed: Option<u64>,
    pub checkpoint_id: Option<String>,
    pub config_hash: Option<String>,
    pub std_kind: String,
}

impl ReportMetadata {
    fn population() -> Self {
        Self {
            std_kind: "population".into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub mode: RenderMode,
    pub metric: Metric,
    pub calibrated: bool,
    pub per_template: Vec<TemplateScore>,
    pub mean: f64,
    pub std: f64,
    /// Empty unless the report comes from a label sweep.
    pub per_variant: Vec<VariantScore>,
    pub best_variant: Option<VariantScore>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Short row label: the run label if set, else mode (plus calibration).
    pub fn label(&self) -> String {
        match &self.metadata.run_label {
            Some(l) => l.clone(),
            None if self.calibrated => format!("{}+cal", self.mode),
            None => self.mode.to_string(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "task {}  mode {}  metric {}{}",
            self.task_id,
            self.mode,
            self.metric,
            if self.calibrated { "  calibrated" } else { "" }
        );
        for t in &self.per_template {
            let _ = writeln!(out, "  template {:<24} {:.4}", t.template_id, t.value);
        }
        for v in &self.per_variant {
            let _ = writeln!(
                out,
                "  variant  {:<24} {:.4} (std {:.4})",
                v.variant, v.value, v.std
            );
        }
        if let Some(best) = &self.best_variant {
            let _ = writeln!(out, "  best variant {} {:.4}", best.variant, best.value);
        }
        let _ = writeln!(
            out,
            "  mean {:.4}  std {:.4} ({})",
            self.mean, self.std, self.metadata.std_kind
        );
        out
    }
}

/// Predictions for one template, in instance order.
fn predict(
    scorer: &impl OptionScorer,
    task: &TaskSet,
    template_index: usize,
    verbalizer: &Verbalizer,
    mode: RenderMode,
    calibrated: bool,
) -> Result<Vec<usize>> {
    let template = &task.templates[template_index];
    task.instances
        .par_iter()
        .map(|inst| {
            Ok(scorer
                .score(mode, template, inst, verbalizer, calibrated)?
                .chosen)
        })
        .collect()
}

fn class_count(task: &TaskSet) -> usize {
    match task.kind {
        TaskKind::Classification => task.labels.len(),
        TaskKind::MultiChoice => task
            .instances
            .iter()
            .map(|i| i.options.len())
            .max()
            .unwrap_or(0),
    }
}

/// Scores every instance under every template with the task's primary
/// verbalizer and reports the per-template metric, its mean and its
/// population standard deviation.
pub fn evaluate(
    scorer: &impl OptionScorer,
    task: &TaskSet,
    mode: RenderMode,
    metric: Metric,
    calibrated: bool,
) -> Result<EvalReport> {
    if task.instances.is_empty() {
        return Err(Error::Validation {
            task: task.task_id.clone(),
            message: "no instances to evaluate".into(),
        });
    }
    let verbalizer = task.primary_verbalizer();
    let gold: Vec<usize> = task
        .instances
        .iter()
        .map(|i| i.options.correct_index())
        .collect();
    let classes = class_count(task);
    let mut per_template = Vec::with_capacity(task.templates.len());
    for (ti, template) in task.templates.iter().enumerate() {
        let pred = predict(scorer, task, ti, verbalizer, mode, calibrated)?;
        per_template.push(TemplateScore {
            template_id: template.id.clone(),
            value: metric.compute(&gold, &pred, classes)?,
        });
    }
    let values: Vec<f64> = per_template.iter().map(|t| t.value).collect();
    Ok(EvalReport {
        task_id: task.task_id.clone(),
        mode,
        metric,
        calibrated,
        mean: mean(&values),
        std: population_std(&values),
        per_template,
        per_variant: Vec::new(),
        best_variant: None,
        metadata: ReportMetadata::population(),
    })
}

/// Evaluates `task` once per label variant. The report's per-template
/// entries average each template over the variants; `per_variant` holds
/// each variant's template mean, keyed by verbalizer name.
pub fn label_sweep_eval(
    scorer: &impl OptionScorer,
    task: &TaskSet,
    mode: RenderMode,
    metric: Metric,
    calibrated: bool,
    variants: &[Verbalizer],
) -> Result<EvalReport> {
    if variants.is_empty() {
        return Err(Error::Invalid(
            "label sweep needs at least one variant".into(),
        ));
    }
    let mut names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("duplicate variant name `{}`", w[0])));
    }
    let swept = label_variant_sweep(task, variants)?;
    let reports = swept
        .iter()
        .map(|t| evaluate(scorer, t, mode, metric, calibrated))
        .collect::<Result<Vec<_>>>()?;

    let per_template: Vec<TemplateScore> = task
        .templates
        .iter()
        .enumerate()
        .map(|(ti, template)| TemplateScore {
            template_id: template.id.clone(),
            value: mean(
                &reports
                    .iter()
                    .map(|r| r.per_template[ti].value)
                    .collect::<Vec<_>>(),
            ),
        })
        .collect();
    let per_variant: Vec<VariantScore> = variants
        .iter()
        .zip(&reports)
        .map(|(v, r)| VariantScore {
            variant: v.name.clone(),
            value: r.mean,
            std: r.std,
        })
        .collect();
    let best_variant = per_variant
        .iter()
        .fold(None::<&VariantScore>, |best, v| match best {
            Some(b) if b.value >= v.value => Some(b),
            _ => Some(v),
        })
        .cloned();
    let values: Vec<f64> = per_template.iter().map(|t| t.value).collect();
    Ok(EvalReport {
        task_id: task.task_id.clone(),
        mode,
        metric,
        calibrated,
        mean: mean(&values),
        std: population_std(&values),
        per_template,
        per_variant,
        best_variant,
        metadata: ReportMetadata::population(),
    })
}

/// One scored (template, instance) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub task_id: String,
    pub template_id: String,
    pub instance: usize,
    pub mode: RenderMode,
    pub calibrated: bool,
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub correct: usize,
    #[serde(rename = "match")]
    pub matched: bool,
}

/// Per-instance scores under every template, template-major.
pub fn score_instances(
    scorer: &impl OptionScorer,
    task: &TaskSet,
    mode: RenderMode,
    calibrated: bool,
) -> Result<Vec<ScoreRecord>> {
    let verbalizer = task.primary_verbalizer();
    let mut records = Vec::with_capacity(task.templates.len() * task.instances.len());
    for template in &task.templates {
        let batch: Vec<ScoreRecord> = task
            .instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let s = scorer.score(mode, template, inst, verbalizer, calibrated)?;
                let correct = inst.options.correct_index();
                Ok(ScoreRecord {
                    task_id: task.task_id.clone(),
                    template_id: template.id.clone(),
                    instance: i,
                    mode,
                    calibrated,
                    matched: s.chosen == correct,
                    chosen: s.chosen,
                    correct,
                    scores: s.scores,
                })
            })
            .collect::<Result<_>>()?;
        records.extend(batch);
    }
    Ok(records)
}
