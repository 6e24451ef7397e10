//! Turns (template, instance, label option) into source/target text pairs.
//!
//! Three layouts are supported:
//!
//! * `Direct`: source is the prompted input, target is the label.
//! * `Channel`: source is the label, target is the prompted input.
//! * `Flipped`: source is the prompted input with every instruction segment
//!   replaced by a sentinel and the label filled in; target regenerates the
//!   masked instruction spans, each introduced by its sentinel and closed by
//!   one extra sentinel.
//!
//! Every target ends with the end-of-sequence marker. Pieces are joined with
//! single spaces and carry no leading or trailing whitespace.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_schema::{Instance, PromptTemplate, Segment, TaskKind, TaskSet, Verbalizer};

pub const EOS_MARKER: &str = "⟨eos⟩";

pub fn sentinel(index: usize) -> String {
    format!("⟨s{index}⟩")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Direct,
    Channel,
    Flipped,
}

impl RenderMode {
    pub const ALL: [RenderMode; 3] = [RenderMode::Direct, RenderMode::Channel, RenderMode::Flipped];

    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Direct => "direct",
            RenderMode::Channel => "channel",
            RenderMode::Flipped => "flipped",
        }
    }
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(RenderMode::Direct),
            "channel" => Ok(RenderMode::Channel),
            "flipped" => Ok(RenderMode::Flipped),
            other => Err(Error::Invalid(format!("unknown render mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedExample {
    pub source_text: String,
    pub target_text: String,
    pub mode: RenderMode,
    /// Option that was rendered; `None` when the label was borrowed from
    /// another instance.
    pub label_index: Option<usize>,
    pub sentinel_count: usize,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn join_pieces<'a>(pieces: impl IntoIterator<Item = &'a str>) -> String {
    pieces
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Substitutes `{choiceN}` and `{answer_choices}` with the instance's
/// verbalized options.
fn expand_instruction(text: &str, surfaces: &[&str]) -> String {
    let mut out = text.replace("{answer_choices}", &surfaces.join(" or "));
    for (i, surface) in surfaces.iter().enumerate() {
        out = out.replace(&format!("{{choice{i}}}"), surface);
    }
    normalize(&out)
}

enum Piece {
    Instruction(String),
    Input(String),
    Label,
}

fn fill(template: &PromptTemplate, inst: &Instance, verbalizer: &Verbalizer) -> Result<Vec<Piece>> {
    let surfaces = inst
        .options
        .labels()
        .iter()
        .map(|l| verbalizer.surface(l))
        .collect::<Result<Vec<_>>>()?;
    template
        .segments
        .iter()
        .map(|segment| match segment {
            Segment::Instruction(text) => {
                Ok(Piece::Instruction(expand_instruction(text, &surfaces)))
            }
            Segment::Input(field) => inst
                .inputs
                .get(field)
                .map(|v| Piece::Input(normalize(v)))
                .ok_or_else(|| Error::MissingField(field.clone())),
            Segment::Label => Ok(Piece::Label),
        })
        .collect()
}

/// The verbalized instruction segments of `template` for `inst`, in order.
pub fn instruction_texts(
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
) -> Result<Vec<String>> {
    Ok(fill(template, inst, verbalizer)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Instruction(text) => Some(text),
            _ => None,
        })
        .collect())
}

/// Renders `inst` with option `label_index`.
pub fn render(
    mode: RenderMode,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
    label_index: usize,
) -> Result<RenderedExample> {
    let label = inst
        .options
        .labels()
        .get(label_index)
        .ok_or(Error::LabelIndex {
            index: label_index,
            count: inst.options.len(),
        })?;
    let surface = verbalizer.surface(label)?;
    render_with_surface(mode, template, inst, verbalizer, surface, Some(label_index))
}

/// Renders `inst` with an explicit label surface, which need not be one of
/// the instance's own options.
pub fn render_with_surface(
    mode: RenderMode,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
    surface: &str,
    label_index: Option<usize>,
) -> Result<RenderedExample> {
    let surface = normalize(surface);
    if surface.contains(crate::task_schema::MARKER_OPEN)
        || surface.contains(crate::task_schema::MARKER_CLOSE)
    {
        return Err(Error::ReservedGlyph(surface));
    }
    let pieces = fill(template, inst, verbalizer)?;
    let prompt_without_label = || {
        join_pieces(pieces.iter().map(|p| match p {
            Piece::Instruction(t) | Piece::Input(t) => t.as_str(),
            Piece::Label => "",
        }))
    };
    let (source_text, target_text, sentinel_count) = match mode {
        RenderMode::Direct => (prompt_without_label(), format!("{surface}{EOS_MARKER}"), 0),
        RenderMode::Channel => (
            surface.clone(),
            format!("{}{EOS_MARKER}", prompt_without_label()),
            0,
        ),
        RenderMode::Flipped => {
            let mut source = Vec::with_capacity(pieces.len() + 1);
            let mut target = Vec::new();
            for piece in &pieces {
                match piece {
                    Piece::Instruction(text) => {
                        if text.is_empty() {
                            return Err(Error::NoInstruction(template.id.clone()));
                        }
                        let marker = sentinel(target.len() / 2);
                        source.push(marker.clone());
                        target.push(marker);
                        target.push(text.clone());
                    }
                    Piece::Input(text) => source.push(text.clone()),
                    Piece::Label => source.push(surface.clone()),
                }
            }
            let n = target.len() / 2;
            if n == 0 {
                return Err(Error::NoInstruction(template.id.clone()));
            }
            if !template.has_label_slot() {
                source.push(surface.clone());
            }
            target.push(sentinel(n));
            let target_text = format!("{}{EOS_MARKER}", target.join(" "));
            (
                join_pieces(source.iter().map(String::as_str)),
                target_text,
                n,
            )
        }
    };
    Ok(RenderedExample {
        source_text,
        target_text,
        mode,
        label_index,
        sentinel_count,
    })
}

/// One rendering per label option, in option order.
pub fn render_all_options(
    mode: RenderMode,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
) -> Result<Vec<RenderedExample>> {
    (0..inst.options.len())
        .map(|i| render(mode, template, inst, verbalizer, i))
        .collect()
}

/// Every plain word any rendering of these tasks can produce, plus the
/// surfaces of `extra` verbalizers (e.g. label variants swept at evaluation).
pub fn corpus_words<'a>(
    tasks: impl IntoIterator<Item = &'a TaskSet>,
    extra: &[Verbalizer],
) -> Result<BTreeSet<String>> {
    let mut words = BTreeSet::new();
    let mut add = |text: &str| {
        words.extend(text.split_whitespace().map(str::to_string));
    };
    for v in extra {
        v.surfaces().for_each(&mut add);
    }
    for task in tasks {
        for v in &task.verbalizers {
            v.surfaces().for_each(&mut add);
        }
        let mut seen_options = BTreeSet::new();
        for inst in &task.instances {
            inst.inputs.values().for_each(|t| add(t));
            if task.kind == TaskKind::MultiChoice {
                inst.options.labels().iter().for_each(|l| add(l));
            }
            if !seen_options.insert(inst.options.labels().to_vec()) {
                continue;
            }
            for template in &task.templates {
                for v in task.verbalizers.iter().chain(extra) {
                    if task.kind == TaskKind::Classification && v.mapping.len() != task.labels.len()
                    {
                        continue;
                    }
                    if let Ok(texts) = instruction_texts(template, inst, v) {
                        texts.iter().for_each(|t| add(t));
                    }
                }
            }
        }
    }
    Ok(words)
}
