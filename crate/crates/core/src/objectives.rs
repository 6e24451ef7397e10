//! Meta-training objectives and the training loop.
//!
//! The likelihood term is the negated teacher-forced log-probability of the
//! target rendered with the correct label. The unlikelihood term penalizes
//! `-log(1 - p)` for every target token rendered with an incorrect label,
//! pushing the model away from producing the same target for the wrong
//! label. The two are combined as `l_lm + lambda * l_ul`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rendering::{render, render_with_surface, RenderMode, RenderedExample};
use crate::seq_model::{Adam, AdamConfig, Mat, Model, SequenceScorer, Tape, TokenId};
use crate::task_schema::{PromptTemplate, TaskSet, Verbalizer};

/// Probabilities are clamped to at most `1 - UL_EPS` before `log(1 - p)`.
pub const UL_EPS: f64 = 1e-6;

/// Default unlikelihood weight.
pub const DEFAULT_LAMBDA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_ul: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Combines the two loss terms. With `lambda == 0` the total is bitwise
/// equal to `l_lm` (for any finite `l_ul`).
pub fn loss_total(l_lm: f64, l_ul: f64, lambda: f64) -> LossBreakdown {
    debug_assert!(lambda >= 0.0);
    LossBreakdown {
        l_lm,
        l_ul,
        lambda,
        total: l_lm + lambda * l_ul,
    }
}

fn unlikelihood_term(logp: f64) -> f64 {
    -(1.0 - logp.exp().min(1.0 - UL_EPS)).ln()
}

/// Likelihood loss of a pair rendered with the correct label.
pub fn loss_lm<S: SequenceScorer + ?Sized>(model: &S, example: &RenderedExample) -> Result<f64> {
    let (source, target) = model.encode(example)?;
    Ok(0.0 - model.sequence_logprob(&source, &target)?)
}

/// Unlikelihood loss of a pair rendered with an incorrect label.
pub fn loss_ul<S: SequenceScorer + ?Sized>(model: &S, example: &RenderedExample) -> Result<f64> {
    let (source, target) = model.encode(example)?;
    Ok(model
        .token_logprobs(&source, &target)?
        .values
        .iter()
        .map(|&lp| unlikelihood_term(lp))
        .sum())
}

/// One encoded training example: the correct-label pair and, when
/// unlikelihood is on, an incorrect-label pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub positive: (Vec<TokenId>, Vec<TokenId>),
    pub negative: Option<(Vec<TokenId>, Vec<TokenId>)>,
}

/// Loss terms and their gradient for one example.
pub fn example_loss_and_grad(
    model: &Model,
    example: &EncodedExample,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let mut tape = Tape::new(model.params());
    let (source, target) = &example.positive;
    let logits = model.forward(&mut tape, source, target)?;
    let ids: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let logp = tape.pick_log_softmax(logits, &ids);
    let sum = tape.sum(logp);
    let lm = tape.scale(sum, -1.0);
    let l_lm = 0.0 - tape.scalar(sum);

    let (l_ul, total) = match (&example.negative, lambda > 0.0) {
        (Some((source, target)), true) => {
            let logits = model.forward(&mut tape, source, target)?;
            let ids: Vec<usize> = target.iter().map(|&t| t as usize).collect();
            let logp = tape.pick_log_softmax(logits, &ids);
            let ul = tape.unlikelihood(logp, UL_EPS);
            let ul = tape.sum(ul);
            let l_ul = tape.scalar(ul);
            let weighted = tape.scale(ul, lambda);
            (l_ul, tape.add(lm, weighted))
        }
        _ => (0.0, lm),
    };
    let breakdown = loss_total(
        l_lm,
        l_ul,
        if example.negative.is_some() {
            lambda
        } else {
            0.0
        },
    );
    Ok((breakdown, tape.backward(total)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Another option of the same instance.
    FromOptions,
    /// The correct label of a different instance of the same task, for
    /// targets that do not come with an option set.
    FromOtherInstances,
}

impl FromStr for NegativeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "from_options" | "options" => Ok(Self::FromOptions),
            "from_other_instances" | "other_instances" => Ok(Self::FromOtherInstances),
            other => Err(Error::Config(format!(
                "unknown negative sampling `{other}`"
            ))),
        }
    }
}

impl NegativeSampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FromOptions => "from_options",
            Self::FromOtherInstances => "from_other_instances",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NegativeLabel {
    /// Index into the instance's own options.
    Option(usize),
    /// Surface form borrowed from another instance.
    Borrowed { instance: usize, surface: String },
}

/// Draws an incorrect label for instance `index` of `task`.
pub fn draw_incorrect_label<R: Rng + ?Sized>(
    task: &TaskSet,
    index: usize,
    verbalizer: &Verbalizer,
    strategy: NegativeSampling,
    rng: &mut R,
) -> Result<NegativeLabel> {
    let inst = &task.instances[index];
    match strategy {
        NegativeSampling::FromOptions => {
            let k = inst.options.len();
            if k < 2 {
                return Err(Error::NoNegative(format!(
                    "instance {index} of {} has a single option",
                    task.task_id
                )));
            }
            let correct = inst.options.correct_index();
            let draw = rng.random_range(0..k - 1);
            Ok(NegativeLabel::Option(if draw >= correct {
                draw + 1
            } else {
                draw
            }))
        }
        NegativeSampling::FromOtherInstances => {
            let own = verbalizer.surface(inst.options.correct_label())?;
            let mut candidates = Vec::new();
            for (j, other) in task.instances.iter().enumerate() {
                if j == index {
                    continue;
                }
                let surface = verbalizer.surface(other.options.correct_label())?;
                if surface != own {
                    candidates.push((j, surface));
                }
            }
            let &(instance, surface) = candidates.choose(rng).ok_or_else(|| {
                Error::NoNegative(format!(
                    "no other instance of {} has a correct label different from `{own}`",
                    task.task_id
                ))
            })?;
            Ok(NegativeLabel::Borrowed {
                instance,
                surface: surface.to_string(),
            })
        }
    }
}

/// Renders instance `index` with a randomly drawn incorrect label.
#[allow(clippy::too_many_arguments)]
pub fn sample_incorrect<R: Rng + ?Sized>(
    task: &TaskSet,
    index: usize,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    mode: RenderMode,
    strategy: NegativeSampling,
    rng: &mut R,
) -> Result<RenderedExample> {
    let inst = &task.instances[index];
    match draw_incorrect_label(task, index, verbalizer, strategy, rng)? {
        NegativeLabel::Option(i) => render(mode, template, inst, verbalizer, i),
        NegativeLabel::Borrowed { surface, .. } => {
            render_with_surface(mode, template, inst, verbalizer, &surface, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: RenderMode,
    pub lambda: f64,
    pub ul_enabled: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negative_sampling: NegativeSampling,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: RenderMode::Flipped,
            lambda: DEFAULT_LAMBDA,
            ul_enabled: true,
            steps: 500,
            batch_size: 16,
            seed: 0,
            negative_sampling: NegativeSampling::FromOptions,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, tasks: &[TaskSet]) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.ul_enabled && self.negative_sampling == NegativeSampling::FromOptions {
            for task in tasks {
                if let Some(i) = task
                    .instances
                    .iter()
                    .position(|inst| inst.options.len() < 2)
                {
                    return Err(Error::Config(format!(
                        "unlikelihood with from_options needs two or more options; instance {i} of {} has one",
                        task.task_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_lm: f64,
    pub l_ul: f64,
    pub lambda: f64,
    pub total: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// One JSON record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Draws and encodes one minibatch. All randomness is consumed here, in
/// order, so the parallel loss computation cannot change the draw sequence.
fn draw_batch(
    model: &Model,
    tasks: &[TaskSet],
    pool: &[(usize, usize)],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncodedExample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let &(ti, ii) = pool.choose(rng).expect("non-empty pool");
            let task = &tasks[ti];
            let template = task.templates.choose(rng).expect("validated templates");
            let verbalizer = task.verbalizers.choose(rng).expect("validated verbalizers");
            let inst = &task.instances[ii];
            let positive = render(
                cfg.mode,
                template,
                inst,
                verbalizer,
                inst.options.correct_index(),
            )?;
            let negative = if cfg.ul_enabled {
                Some(sample_incorrect(
                    task,
                    ii,
                    template,
                    verbalizer,
                    cfg.mode,
                    cfg.negative_sampling,
                    rng,
                )?)
            } else {
                None
            };
            Ok(EncodedExample {
                positive: model.encode(&positive)?,
                negative: negative.map(|n| model.encode(&n)).transpose()?,
            })
        })
        .collect()
}

/// Averages per-example losses and gradients over a batch in fixed order.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &[EncodedExample],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let results: Vec<(LossBreakdown, Vec<Mat>)> = batch
        .par_iter()
        .map(|ex| example_loss_and_grad(model, ex, lambda))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut grads: Vec<Mat> = model
        .params()
        .iter()
        .map(|p| Mat::zeros(p.raw_dim()))
        .collect();
    let (mut l_lm, mut l_ul) = (0.0, 0.0);
    let mut effective_lambda = 0.0;
    for (loss, g) in &results {
        l_lm += loss.l_lm;
        l_ul += loss.l_ul;
        effective_lambda = loss.lambda;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    for g in &mut grads {
        *g /= n;
    }
    Ok((loss_total(l_lm / n, l_ul / n, effective_lambda), grads))
}

/// Runs `cfg.steps` optimizer steps over instances drawn uniformly from the
/// pooled tasks. Examples are never packed together.
pub fn train(model: &mut Model, tasks: &[TaskSet], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate(tasks)?;
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok(log);
    }
    let pool: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.instances.len()).map(move |ii| (ti, ii)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Invalid("no training instances".into()));
    }
    let lambda = if cfg.ul_enabled { cfg.lambda } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.optimizer.clone(), model.params());
    for step in 0..cfg.steps {
        let batch = draw_batch(model, tasks, &pool, cfg, &mut rng)?;
        let (loss, grads) = batch_loss_and_grad(model, &batch, lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "loss".into(),
            });
        }
        optimizer
            .step(model.params_mut(), &grads)
            .map_err(|e| Error::Diverged {
                step,
                what: e.to_string(),
            })?;
        if !model.all_finite() {
            return Err(Error::Diverged {
                step,
                what: "parameters".into(),
            });
        }
        log.records.push(StepRecord {
            step,
            l_lm: loss.l_lm,
            l_ul: loss.l_ul,
            lambda: loss.lambda,
            total: loss.total,
            learning_rate: cfg.optimizer.learning_rate,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_schema::{Instance, LabelOptionSet, Segment, TaskKind};

    fn options(k: usize, correct: usize) -> LabelOptionSet {
        LabelOptionSet::new((0..k).map(|i| format!("l{i}")).collect(), correct).unwrap()
    }

    fn task(k: usize, corrects: &[usize]) -> TaskSet {
        let template = PromptTemplate::new(
            "t",
            vec![
                Segment::Instruction("pick one".into()),
                Segment::Input("text".into()),
            ],
        )
        .unwrap();
        let verbalizer =
            Verbalizer::new("v", (0..k).map(|i| (format!("l{i}"), format!("word{i}"))));
        let instances = corrects
            .iter()
            .map(|&c| Instance::new([("text", "some text")], options(k, c)))
            .collect();
        TaskSet::new(
            "task",
            TaskKind::Classification,
            vec![template],
            vec![verbalizer],
            instances,
            None,
        )
        .unwrap()
    }

    #[test]
    fn loss_total_arithmetic() {
        let b = loss_total(8.3178, 0.1935, 3.0);
        assert!((b.total - 8.8983).abs() < 1e-12);
        assert_eq!(loss_total(2.5, 7.0, 0.0).total.to_bits(), 2.5f64.to_bits());
        assert_eq!(loss_total(0.0, 0.0, 3.0).total, 0.0);
    }

    #[test]
    fn binary_negative_is_forced() {
        let t = task(2, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let neg = draw_incorrect_label(
                &t,
                0,
                &t.verbalizers[0],
                NegativeSampling::FromOptions,
                &mut rng,
            )
            .unwrap();
            assert_eq!(neg, NegativeLabel::Option(1));
        }
    }

    #[test]
    fn negatives_are_uniform_over_incorrect_options() {
        let t = task(4, &[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            match draw_incorrect_label(
                &t,
                0,
                &t.verbalizers[0],
                NegativeSampling::FromOptions,
                &mut rng,
            )
            .unwrap()
            {
                NegativeLabel::Option(i) => counts[i] += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(counts[2], 0);
        // Binomial(n, 1/3): three standard deviations.
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for i in [0, 1, 3] {
            assert!(
                (counts[i] as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn other_instance_negatives_differ_from_correct() {
        let t = task(3, &[0, 0, 1, 2, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            match draw_incorrect_label(
                &t,
                0,
                &t.verbalizers[0],
                NegativeSampling::FromOtherInstances,
                &mut rng,
            )
            .unwrap()
            {
                NegativeLabel::Borrowed { instance, surface } => {
                    assert!(instance == 2 || instance == 3);
                    assert_ne!(surface, "word0");
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        let same = task(3, &[1, 1, 1]);
        assert!(matches!(
            draw_incorrect_label(
                &same,
                0,
                &same.verbalizers[0],
                NegativeSampling::FromOtherInstances,
                &mut rng
            ),
            Err(Error::NoNegative(_))
        ));
    }

    #[test]
    fn single_option_cannot_supply_a_negative() {
        let t = task(1, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_incorrect_label(
            &t,
            0,
            &t.verbalizers[0],
            NegativeSampling::FromOptions,
            &mut rng
        )
        .is_err());
        let cfg = TrainConfig::default();
        assert!(matches!(
            cfg.validate(std::slice::from_ref(&t)),
            Err(Error::Config(_))
        ));
        let lm_only = TrainConfig {
            ul_enabled: false,
            ..TrainConfig::default()
        };
        lm_only.validate(&[t]).unwrap();
    }

    #[test]
    fn sampling_strategy_parses() {
        assert_eq!(
            "from_options".parse::<NegativeSampling>().unwrap(),
            NegativeSampling::FromOptions
        );
        assert_eq!(
            "from-other-instances".parse::<NegativeSampling>().unwrap(),
            NegativeSampling::FromOtherInstances
        );
        assert!("whatever".parse::<NegativeSampling>().is_err());
    }
}
