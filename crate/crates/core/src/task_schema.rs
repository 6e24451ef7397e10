//! Prompted tasks: templates, verbalizers, label option sets, and their
//! on-disk form.
//!
//! A task is described by a manifest (JSON object) that points at a dataset
//! file holding one JSON record per line:
//!
//! ```json
//! {"inputs": {"text": "great movie"}, "options": ["pos", "neg"], "correct": 0}
//! ```
//!
//! Templates keep instruction text and input slots apart as tagged segments,
//! so the flipped renderer never has to guess which words belong to the
//! instruction.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BINARY_VARIANTS: &str = include_str!("../data/label_pairs_binary.tsv");
const TERNARY_VARIANTS: &str = include_str!("../data/label_triples_3way.tsv");

/// Opening character of every reserved marker (sentinels, end-of-sequence).
pub const MARKER_OPEN: char = '⟨';
/// Closing character of every reserved marker.
pub const MARKER_CLOSE: char = '⟩';

pub(crate) fn has_marker(text: &str) -> bool {
    text.contains(MARKER_OPEN) || text.contains(MARKER_CLOSE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    MultiChoice,
}

/// One piece of a prompt template.
///
/// Instruction text may reference the instance's verbalized options with
/// `{choice0}`, `{choice1}`, ... or `{answer_choices}` (all options joined
/// with " or ").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Instruction(String),
    Input(String),
    Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        let template = Self {
            id: id.into(),
            segments,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn instruction_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Instruction(_)))
            .count()
    }

    pub fn has_label_slot(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Label))
    }

    pub fn input_fields(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Input(field) => Some(field.as_str()),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::Validation {
            task: format!("template {}", self.id),
            message,
        };
        if self.instruction_count() == 0 {
            return Err(invalid("needs at least one instruction segment".into()));
        }
        let label_slots = self
            .segments
            .iter()
            .filter(|s| matches!(s, Segment::Label))
            .count();
        if label_slots > 1 {
            return Err(invalid(format!(
                "{label_slots} label slots, at most one allowed"
            )));
        }
        for segment in &self.segments {
            if let Segment::Instruction(text) | Segment::Input(text) = segment {
                if has_marker(text) {
                    return Err(Error::ReservedGlyph(text.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Ordered raw label identifiers plus the index of the correct one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOptions", into = "RawOptions")]
pub struct LabelOptionSet {
    labels: Vec<String>,
    correct: usize,
}

#[derive(Serialize, Deserialize)]
struct RawOptions {
    labels: Vec<String>,
    correct: usize,
}

impl TryFrom<RawOptions> for LabelOptionSet {
    type Error = Error;
    fn try_from(raw: RawOptions) -> Result<Self> {
        LabelOptionSet::new(raw.labels, raw.correct)
    }
}

impl From<LabelOptionSet> for RawOptions {
    fn from(set: LabelOptionSet) -> Self {
        RawOptions {
            labels: set.labels,
            correct: set.correct,
        }
    }
}

impl LabelOptionSet {
    pub fn new(labels: Vec<String>, correct: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("label option set is empty".into()));
        }
        if correct >= labels.len() {
            return Err(Error::LabelIndex {
                index: correct,
                count: labels.len(),
            });
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::Invalid(format!("duplicate label option `{label}`")));
            }
        }
        Ok(Self { labels, correct })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn correct_index(&self) -> usize {
        self.correct
    }

    pub fn correct_label(&self) -> &str {
        &self.labels[self.correct]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Maps raw label identifiers to surface strings.
///
/// With `identity` set, labels missing from `mapping` are their own surface
/// form; multi-choice tasks use this since their options are free text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub name: String,
    #[serde(default)]
    pub mapping: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identity: bool,
}

impl Verbalizer {
    pub fn new<L, S>(name: impl Into<String>, pairs: impl IntoIterator<Item = (L, S)>) -> Self
    where
        L: Into<String>,
        S: Into<String>,
    {
        Self {
            name: name.into(),
            mapping: pairs
                .into_iter()
                .map(|(l, s)| (l.into(), s.into()))
                .collect(),
            identity: false,
        }
    }

    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            mapping: IndexMap::new(),
            identity: true,
        }
    }

    /// Zips `surfaces` onto `labels` in order.
    pub fn from_surfaces(
        name: impl Into<String>,
        labels: &[String],
        surfaces: &[String],
    ) -> Result<Self> {
        let name = name.into();
        if labels.len() != surfaces.len() {
            return Err(Error::ArityMismatch {
                verbalizer: name,
                expected: labels.len(),
                got: surfaces.len(),
            });
        }
        Ok(Self::new(
            name,
            labels.iter().cloned().zip(surfaces.iter().cloned()),
        ))
    }

    pub fn surface<'a>(&'a self, label: &'a str) -> Result<&'a str> {
        match self.mapping.get(label) {
            Some(surface) => Ok(surface),
            None if self.identity => Ok(label),
            None => Err(Error::UnmappedLabel {
                verbalizer: self.name.clone(),
                label: label.to_string(),
            }),
        }
    }

    /// Checks that every label maps to a distinct, non-empty surface.
    pub fn check_labels(&self, labels: &[String]) -> Result<()> {
        let mut seen = HashSet::new();
        for label in labels {
            let surface = self.surface(label)?;
            if surface.trim().is_empty() {
                return Err(Error::Invalid(format!(
                    "verbalizer `{}` maps `{label}` to an empty surface",
                    self.name
                )));
            }
            if has_marker(surface) {
                return Err(Error::ReservedGlyph(surface.to_string()));
            }
            if !seen.insert(surface) {
                return Err(Error::Invalid(format!(
                    "verbalizer `{}` maps two labels to `{surface}`",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Surface strings of every mapped label, in mapping order.
    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.mapping.values().map(String::as_str)
    }
}

/// Maps `label` to its surface form under `verbalizer`.
pub fn verbalize<'a>(verbalizer: &'a Verbalizer, label: &'a str) -> Result<&'a str> {
    verbalizer.surface(label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub inputs: BTreeMap<String, String>,
    pub options: LabelOptionSet,
}

impl Instance {
    pub fn new<K, V>(inputs: impl IntoIterator<Item = (K, V)>, options: LabelOptionSet) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            inputs: inputs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            options,
        }
    }

    /// The same instance with every input field set to the empty string.
    pub fn content_free(&self) -> Self {
        Self {
            inputs: self
                .inputs
                .keys()
                .map(|k| (k.clone(), String::new()))
                .collect(),
            options: self.options.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSet {
    pub task_id: String,
    pub kind: TaskKind,
    /// Shared raw label space of a classification task; empty for
    /// multi-choice tasks.
    pub labels: Vec<String>,
    pub templates: Vec<PromptTemplate>,
    pub verbalizers: Vec<Verbalizer>,
    pub instances: Vec<Instance>,
    pub instance_cap: Option<usize>,
}

impl TaskSet {
    /// Builds and validates a task. Instances beyond `instance_cap` are
    /// dropped in order.
    pub fn new(
        task_id: impl Into<String>,
        kind: TaskKind,
        templates: Vec<PromptTemplate>,
        verbalizers: Vec<Verbalizer>,
        mut instances: Vec<Instance>,
        instance_cap: Option<usize>,
    ) -> Result<Self> {
        if let Some(cap) = instance_cap {
            instances.truncate(cap);
        }
        let labels = match kind {
            TaskKind::Classification => instances
                .first()
                .map(|inst| inst.options.labels().to_vec())
                .unwrap_or_default(),
            TaskKind::MultiChoice => Vec::new(),
        };
        let verbalizers = if verbalizers.is_empty() && kind == TaskKind::MultiChoice {
            vec![Verbalizer::identity()]
        } else {
            verbalizers
        };
        let task = Self {
            task_id: task_id.into(),
            kind,
            labels,
            templates,
            verbalizers,
            instances,
            instance_cap,
        };
        task.validate()?;
        Ok(task)
    }

    fn invalid(&self, message: impl Into<String>) -> Error {
        Error::Validation {
            task: self.task_id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(self.invalid("no templates"));
        }
        if self.verbalizers.is_empty() {
            return Err(self.invalid("no verbalizers"));
        }
        for template in &self.templates {
            template.validate()?;
        }
        if let Some(cap) = self.instance_cap {
            if self.instances.len() > cap {
                return Err(self.invalid(format!(
                    "{} instances exceed cap {cap}",
                    self.instances.len()
                )));
            }
        }
        for (i, inst) in self.instances.iter().enumerate() {
            self.validate_instance(inst)
                .map_err(|e| self.invalid(format!("instance {i}: {e}")))?;
        }
        if self.kind == TaskKind::Classification {
            for v in &self.verbalizers {
                v.check_labels(&self.labels)?;
            }
        }
        Ok(())
    }

    fn validate_instance(&self, inst: &Instance) -> Result<()> {
        for template in &self.templates {
            for field in template.input_fields() {
                if !inst.inputs.contains_key(field) {
                    return Err(Error::MissingField(field.to_string()));
                }
            }
        }
        for text in inst.inputs.values() {
            if has_marker(text) {
                return Err(Error::ReservedGlyph(text.clone()));
            }
        }
        match self.kind {
            TaskKind::Classification => {
                if inst.options.labels() != self.labels.as_slice() {
                    return Err(Error::Invalid(format!(
                        "options {:?} differ from the task label space {:?}",
                        inst.options.labels(),
                        self.labels
                    )));
                }
            }
            TaskKind::MultiChoice => {
                for v in &self.verbalizers {
                    v.check_labels(inst.options.labels())?;
                }
            }
        }
        Ok(())
    }

    /// The verbalizer used when none is chosen explicitly.
    pub fn primary_verbalizer(&self) -> &Verbalizer {
        &self.verbalizers[0]
    }

    /// A copy of this task that uses `verbalizer` only.
    pub fn with_verbalizer(&self, verbalizer: Verbalizer) -> Result<Self> {
        if self.kind == TaskKind::Classification && verbalizer.mapping.len() != self.labels.len() {
            return Err(Error::ArityMismatch {
                verbalizer: verbalizer.name,
                expected: self.labels.len(),
                got: verbalizer.mapping.len(),
            });
        }
        let task = Self {
            verbalizers: vec![verbalizer],
            ..self.clone()
        };
        task.validate()?;
        Ok(task)
    }
}

/// One task per verbalizer, with instances and templates untouched.
pub fn label_variant_sweep(task: &TaskSet, variants: &[Verbalizer]) -> Result<Vec<TaskSet>> {
    if task.kind != TaskKind::Classification {
        return Err(Error::Validation {
            task: task.task_id.clone(),
            message: "label sweeps need a classification task".into(),
        });
    }
    variants
        .iter()
        .map(|v| task.with_verbalizer(v.clone()))
        .collect()
}

/// A row of a built-in label-variant table: surfaces in raw-label order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVariant {
    pub surfaces: Vec<String>,
}

impl LabelVariant {
    pub fn name(&self) -> String {
        self.surfaces
            .iter()
            .map(|s| s.replace(' ', "-"))
            .collect::<Vec<_>>()
            .join("_")
    }

    pub fn to_verbalizer(&self, labels: &[String]) -> Result<Verbalizer> {
        Verbalizer::from_surfaces(self.name(), labels, &self.surfaces)
    }
}

fn parse_variant_table(table: &str) -> Vec<LabelVariant> {
    table
        .lines()
        .filter(|line| !line.trim().is_empty() && !line.starts_with('#'))
        .map(|line| LabelVariant {
            surfaces: line.split('\t').map(|s| s.trim().to_string()).collect(),
        })
        .collect()
}

/// The 20 binary label pairs, original surfaces first.
pub fn builtin_binary_variants() -> Vec<LabelVariant> {
    parse_variant_table(BINARY_VARIANTS)
}

/// The 20 three-way label triples.
pub fn builtin_ternary_variants() -> Vec<LabelVariant> {
    parse_variant_table(TERNARY_VARIANTS)
}

/// Built-in variants matching the task's arity, as verbalizers over its labels.
pub fn builtin_variants_for(task: &TaskSet) -> Result<Vec<Verbalizer>> {
    let table = match task.labels.len() {
        2 => builtin_binary_variants(),
        3 => builtin_ternary_variants(),
        n => {
            return Err(Error::Validation {
                task: task.task_id.clone(),
                message: format!("no built-in label variants for {n} labels"),
            })
        }
    };
    table
        .iter()
        .map(|v| v.to_verbalizer(&task.labels))
        .collect()
}

/// Reads a label-variant table (tab-separated surfaces, `#` comments).
pub fn load_variant_table(path: &Path) -> Result<Vec<LabelVariant>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_variant_table(&text))
}

/// On-disk task description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_id: String,
    pub task_kind: TaskKind,
    pub templates: Vec<PromptTemplate>,
    #[serde(default)]
    pub verbalizers: Vec<Verbalizer>,
    #[serde(default)]
    pub instance_cap: Option<usize>,
    /// Dataset path, relative to the manifest's directory.
    pub data_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub inputs: BTreeMap<String, String>,
    pub options: Vec<String>,
    pub correct: usize,
}

impl InstanceRecord {
    pub fn from_instance(inst: &Instance) -> Self {
        Self {
            inputs: inst.inputs.clone(),
            options: inst.options.labels().to_vec(),
            correct: inst.options.correct_index(),
        }
    }
}

/// Reads up to `cap` instance records from a line-delimited dataset file.
/// Blank lines are skipped; lines past the cap are not read.
pub fn load_instances(path: &Path, cap: Option<usize>) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        if cap.is_some_and(|c| instances.len() >= c) {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let options = LabelOptionSet::new(record.options, record.correct)
            .map_err(|e| parse_err(e.to_string()))?;
        instances.push(Instance {
            inputs: record.inputs,
            options,
        });
    }
    Ok(instances)
}

/// Loads a task manifest and its dataset, then validates the result.
pub fn load_taskset(manifest_path: &Path) -> Result<TaskSet> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: TaskManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let data_path = base.join(&manifest.data_path);
    let instances = load_instances(&data_path, manifest.instance_cap)?;
    TaskSet::new(
        manifest.task_id,
        manifest.task_kind,
        manifest.templates,
        manifest.verbalizers,
        instances,
        manifest.instance_cap,
    )
}

/// Writes `<dir>/<task_id>.json` and `<dir>/<task_id>.jsonl`; returns the
/// manifest path.
pub fn save_taskset(task: &TaskSet, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_name = format!("{}.jsonl", task.task_id);
    let manifest = TaskManifest {
        task_id: task.task_id.clone(),
        task_kind: task.kind,
        templates: task.templates.clone(),
        verbalizers: task.verbalizers.clone(),
        instance_cap: task.instance_cap,
        data_path: PathBuf::from(&data_name),
    };
    let mut data = String::new();
    for inst in &task.instances {
        data.push_str(&serde_json::to_string(&InstanceRecord::from_instance(
            inst,
        ))?);
        data.push('\n');
    }
    let data_path = dir.join(&data_name);
    fs::write(&data_path, data).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(format!("{}.json", task.task_id));
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
