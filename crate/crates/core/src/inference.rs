//! Decision rules over a frozen model.
//!
//! * Direct: `log P(label | prompt)`.
//! * Channel: `log P(prompt | label)`; the label prior is uniform and adds
//!   nothing.
//! * Flipped: `log P(instruction | masked input, label)`; the prior
//!   `P(label | input)` is likewise taken as uniform.
//!
//! The chosen option is the highest score, ties going to the lowest index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rendering::{render_all_options, RenderMode, RenderedExample};
use crate::seq_model::SequenceScorer;
use crate::task_schema::{Instance, PromptTemplate, Verbalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionScores {
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub mode: RenderMode,
    pub calibrated: bool,
}

impl OptionScores {
    pub fn new(scores: Vec<f64>, mode: RenderMode, calibrated: bool) -> Self {
        let chosen = argmax(&scores);
        Self {
            scores,
            chosen,
            mode,
            calibrated,
        }
    }
}

/// Index of the largest score; the first one wins ties. NaN never wins.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoringOptions {
    /// Divide Direct scores by the label's token count. Channel and
    /// Flipped score the same target for every option, so this would not
    /// change their ranking and is not applied there.
    pub length_normalize: bool,
    /// Log-prior per option added to every score. Off by default: the
    /// decision rules assume a uniform prior.
    pub log_priors: Option<Vec<f64>>,
}

fn score_rendered<S: SequenceScorer + ?Sized>(
    model: &S,
    rendered: &[RenderedExample],
    mode: RenderMode,
    opts: &ScoringOptions,
) -> Result<OptionScores> {
    let mut scores = Vec::with_capacity(rendered.len());
    for ex in rendered {
        let (source, target) = model.encode(ex)?;
        let mut score = model.sequence_logprob(&source, &target)?;
        if opts.length_normalize && mode == RenderMode::Direct && !target.is_empty() {
            score /= target.len() as f64;
        }
        scores.push(score);
    }
    if let Some(priors) = &opts.log_priors {
        if priors.len() != scores.len() {
            return Err(Error::LengthMismatch(priors.len(), scores.len()));
        }
        scores.iter_mut().zip(priors).for_each(|(s, p)| *s += p);
    }
    Ok(OptionScores::new(scores, mode, false))
}

/// Scores every option of `inst` under `mode`.
pub fn score_options<S: SequenceScorer + ?Sized>(
    model: &S,
    mode: RenderMode,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
    opts: &ScoringOptions,
) -> Result<OptionScores> {
    let rendered = render_all_options(mode, template, inst, verbalizer)?;
    score_rendered(model, &rendered, mode, opts)
}

pub fn score_direct<S: SequenceScorer + ?Sized>(
    model: &S,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
) -> Result<OptionScores> {
    score_options(
        model,
        RenderMode::Direct,
        template,
        inst,
        verbalizer,
        &ScoringOptions::default(),
    )
}

pub fn score_channel<S: SequenceScorer + ?Sized>(
    model: &S,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
) -> Result<OptionScores> {
    score_options(
        model,
        RenderMode::Channel,
        template,
        inst,
        verbalizer,
        &ScoringOptions::default(),
    )
}

pub fn score_flipped<S: SequenceScorer + ?Sized>(
    model: &S,
    template: &PromptTemplate,
    inst: &Instance,
    verbalizer: &Verbalizer,
) -> Result<OptionScores> {
    score_options(
        model,
        RenderMode::Flipped,
        template,
        inst,
        verbalizer,
        &ScoringOptions::default(),
    )
}

/// Subtracts content-free label scores from Direct scores.
pub fn apply_calibration(raw: &OptionScores, content_free: &[f64]) -> Result<OptionScores> {
    if raw.mode != RenderMode::Direct {
        return Err(Error::Invalid(format!(
            "calibration applies to direct scores, got {}",
            raw.mode
        )));
    }
    if content_free.len() != raw.scores.len() {
        return Err(Error::LengthMismatch(raw.scores.len(), content_free.len()));
    }
    let scores = raw
        .scores
        .iter()
        .zip(content_free)
        .map(|(s, c)| s - c)
        .collect();
    Ok(OptionScores::new(scores, RenderMode::Direct, true))
}

/// Contextual calibration: rescores each label on `empty_inst` (the same
/// prompt with every input field blank) and subtracts that from `raw`.
pub fn calibrate<S: SequenceScorer + ?Sized>(
    model: &S,
    template: &PromptTemplate,
    empty_inst: &Instance,
    verbalizer: &Verbalizer,
    raw: &OptionScores,
) -> Result<OptionScores> {
    if raw.mode != RenderMode::Direct {
        return Err(Error::Invalid(format!(
            "calibration applies to direct scores, got {}",
            raw.mode
        )));
    }
    let content_free = score_direct(model, template, empty_inst, verbalizer)?;
    apply_calibration(raw, &content_free.scores)
}

/// Option-level scoring, the interface the evaluation harness consumes.
pub trait OptionScorer: Sync {
    fn score(
        &self,
        mode: RenderMode,
        template: &PromptTemplate,
        inst: &Instance,
        verbalizer: &Verbalizer,
        calibrated: bool,
    ) -> Result<OptionScores>;
}

/// Adapts a sequence model to [`OptionScorer`].
pub struct ModelScorer<'a, S: ?Sized> {
    pub model: &'a S,
    pub options: ScoringOptions,
}

impl<'a, S: SequenceScorer + ?Sized> ModelScorer<'a, S> {
    pub fn new(model: &'a S) -> Self {
        Self {
            model,
            options: ScoringOptions::default(),
        }
    }
}

impl<S: SequenceScorer + ?Sized> OptionScorer for ModelScorer<'_, S> {
    fn score(
        &self,
        mode: RenderMode,
        template: &PromptTemplate,
        inst: &Instance,
        verbalizer: &Verbalizer,
        calibrated: bool,
    ) -> Result<OptionScores> {
        let raw = score_options(self.model, mode, template, inst, verbalizer, &self.options)?;
        if !calibrated {
            return Ok(raw);
        }
        let empty = inst.content_free();
        let content_free = score_options(
            self.model,
            mode,
            template,
            &empty,
            verbalizer,
            &self.options,
        )?;
        apply_calibration(&raw, &content_free.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-2.0]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[f64::NAN, -1.0]), 1);
    }

    #[test]
    fn calibration_arithmetic() {
        let raw = OptionScores::new(vec![-1.0, -1.2], RenderMode::Direct, false);
        assert_eq!(raw.chosen, 0);
        let cal = apply_calibration(&raw, &[-0.1, -0.9]).unwrap();
        assert!((cal.scores[0] + 0.9).abs() < 1e-12);
        assert!((cal.scores[1] + 0.3).abs() < 1e-12);
        assert_eq!(cal.chosen, 1);
        assert!(cal.calibrated);

        let flat = apply_calibration(&raw, &[-0.4, -0.4]).unwrap();
        assert_eq!(flat.chosen, raw.chosen);

        let single = OptionScores::new(vec![-3.0], RenderMode::Direct, false);
        assert_eq!(apply_calibration(&single, &[-1.0]).unwrap().chosen, 0);
    }

    #[test]
    fn calibration_needs_direct_scores() {
        let raw = OptionScores::new(vec![-1.0, -2.0], RenderMode::Flipped, false);
        assert!(apply_calibration(&raw, &[0.0, 0.0]).is_err());
    }
}
