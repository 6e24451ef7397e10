//! Rule-based synthetic tasks small enough to meta-train on a CPU.
//!
//! Every instruction states its rule, so each instance's label follows
//! from the input alone. Training tasks carry the training verbalizers;
//! held-out tasks use new rule parameters and the held-out verbalizers.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_schema::{
    builtin_binary_variants, Instance, LabelOptionSet, LabelVariant, PromptTemplate, Segment,
    TaskKind, TaskSet, Verbalizer,
};

pub const PRESENT: &str = "present";
pub const ABSENT: &str = "absent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleFamily {
    /// Binary classification: does the input contain the task's keyword?
    KeywordPresence,
    /// Two-option multi-choice: which of two words occurs more often?
    PairwiseCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub family: RuleFamily,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub instances_per_task: usize,
    pub eval_instances_per_task: usize,
    /// Words per input text.
    pub input_len: usize,
    pub content_words: Vec<String>,
    pub train_variants: Vec<LabelVariant>,
    pub heldout_variants: Vec<LabelVariant>,
    /// Extra training label pairs made of generated nonce words, so that
    /// training sees many label surfaces rather than a handful.
    #[serde(default)]
    pub nonce_train_pairs: usize,
    /// Also evaluate every training task on fresh instances (with the
    /// held-out verbalizers), next to the held-out tasks.
    #[serde(default)]
    pub eval_seen_tasks: bool,
    /// Whether keyword instructions spell out which surface means what.
    /// Without it the instruction is a bare question and the label word
    /// carries no information about the instruction text.
    #[serde(default = "yes")]
    pub name_labels: bool,
}

fn yes() -> bool {
    true
}

const CONTENT_WORDS: &[&str] = &[
    "apple", "river", "stone", "cloud", "tiger", "piano", "candle", "forest", "window", "garden",
    "silver", "rocket", "button", "castle", "pepper", "dragon", "mirror", "planet", "ladder",
    "marble", "pillow", "anchor", "basket", "cotton", "desert", "falcon", "harbor", "island",
    "jacket", "kettle", "lemon", "meadow", "needle", "orange", "parrot", "quartz", "saddle",
    "tunnel", "violin", "wagon", "yogurt", "zebra", "bridge", "copper", "feather", "glacier",
    "hammer", "lantern",
];

impl Default for SyntheticTaskSpec {
    /// Keyword tasks; the binary label pairs split into nine training
    /// pairs and ten held-out pairs. The `always`/`never` pair is left out
    /// because `never` also appears in a held-out pair.
    fn default() -> Self {
        let table = builtin_binary_variants();
        let train_variants = table[..10]
            .iter()
            .filter(|v| v.surfaces[0] != "always")
            .cloned()
            .collect();
        Self {
            family: RuleFamily::KeywordPresence,
            train_tasks: 12,
            eval_tasks: 4,
            instances_per_task: 64,
            eval_instances_per_task: 40,
            input_len: 5,
            content_words: CONTENT_WORDS.iter().map(|w| w.to_string()).collect(),
            train_variants,
            heldout_variants: table[10..].to_vec(),
            nonce_train_pairs: 40,
            eval_seen_tasks: true,
            name_labels: true,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::Config(m));
        if self.input_len < 3 {
            return invalid("input_len must be at least 3".into());
        }
        if self.train_tasks + self.eval_tasks == 0 {
            return invalid("no tasks requested".into());
        }
        let distinct: BTreeSet<&str> = self.content_words.iter().map(String::as_str).collect();
        let needed = self.train_tasks + self.eval_tasks + 2;
        if distinct.len() < needed {
            return invalid(format!(
                "{} distinct content words, need at least {needed}",
                distinct.len()
            ));
        }
        if self.family == RuleFamily::KeywordPresence {
            if self.train_tasks > 0 && self.train_variants.is_empty() {
                return invalid("training tasks need training verbalizers".into());
            }
            if self.eval_tasks > 0 && self.heldout_variants.is_empty() {
                return invalid("held-out tasks need held-out verbalizers".into());
            }
            for v in self.train_variants.iter().chain(&self.heldout_variants) {
                if v.surfaces.len() != 2 {
                    return invalid(format!("variant {} is not binary", v.name()));
                }
            }
            let train: BTreeSet<&str> = self
                .train_variants
                .iter()
                .flat_map(|v| v.surfaces.iter().map(String::as_str))
                .collect();
            if let Some(clash) = self
                .heldout_variants
                .iter()
                .flat_map(|v| &v.surfaces)
                .find(|s| train.contains(s.as_str()))
            {
                return invalid(format!(
                    "surface `{clash}` is both a training and a held-out label"
                ));
            }
        }
        Ok(())
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Distinct two-syllable nonce words, none of them a content word or a
/// surface of any configured variant.
fn nonce_pairs(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<LabelVariant> {
    let taken: BTreeSet<&str> = spec
        .content_words
        .iter()
        .chain(spec.train_variants.iter().flat_map(|v| &v.surfaces))
        .chain(spec.heldout_variants.iter().flat_map(|v| &v.surfaces))
        .flat_map(|s| s.split_whitespace())
        .collect();
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(2 * spec.nonce_train_pairs);
    let syllable = |rng: &mut ChaCha8Rng| {
        format!(
            "{}{}",
            ONSETS.choose(rng).expect("onsets"),
            VOWELS.choose(rng).expect("vowels")
        )
    };
    while words.len() < 2 * spec.nonce_train_pairs {
        let w = format!("{}{}", syllable(rng), syllable(rng));
        if !taken.contains(w.as_str()) && seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
        .chunks(2)
        .map(|pair| LabelVariant {
            surfaces: pair.to_vec(),
        })
        .collect()
}

fn template(id: String, segments: Vec<Segment>) -> PromptTemplate {
    PromptTemplate { id, segments }
}

fn keyword_templates(keyword: &str, name_labels: bool) -> Vec<PromptTemplate> {
    use Segment::{Input, Instruction};
    if !name_labels {
        return vec![
            template(
                format!("contains_{keyword}"),
                vec![
                    Instruction(format!("does the text contain {keyword} ?")),
                    Input("text".into()),
                ],
            ),
            template(
                format!("mention_{keyword}"),
                vec![
                    Input("text".into()),
                    Instruction(format!("is {keyword} mentioned in this text ?")),
                ],
            ),
        ];
    }
    vec![
        template(
            format!("contains_{keyword}"),
            vec![
                Instruction(format!("if the text contains {keyword} answer {{choice0}} , otherwise answer {{choice1}} .")),
                Input("text".into()),
            ],
        ),
        template(
            format!("mention_{keyword}"),
            vec![
                Input("text".into()),
                Instruction(format!(
                    "does this text mention {keyword} ? say {{choice0}} if it does and {{choice1}} if it does not ."
                )),
            ],
        ),
        template(
            format!("present_{keyword}"),
            vec![
                Instruction("text :".into()),
                Input("text".into()),
                Instruction(format!("is {keyword} present ? {{choice0}} means present and {{choice1}} means absent .")),
            ],
        ),
    ]
}

fn count_templates() -> Vec<PromptTemplate> {
    use Segment::{Input, Instruction};
    vec![
        template(
            "more_often".into(),
            vec![
                Instruction("which word occurs more often in the text , {answer_choices} ?".into()),
                Input("text".into()),
            ],
        ),
        template(
            "most_frequent".into(),
            vec![
                Input("text".into()),
                Instruction("of {choice0} and {choice1} , which one is repeated more ?".into()),
            ],
        ),
    ]
}

fn keyword_instance(
    rng: &mut ChaCha8Rng,
    keyword: &str,
    filler: &[&str],
    len: usize,
    present: bool,
) -> Instance {
    let mut words: Vec<&str> = (0..len)
        .map(|_| *filler.choose(rng).expect("filler is non-empty"))
        .collect();
    if present {
        let at = rng.random_range(0..len);
        words[at] = keyword;
    }
    let labels = vec![PRESENT.to_string(), ABSENT.to_string()];
    let options =
        LabelOptionSet::new(labels, if present { 0 } else { 1 }).expect("two distinct labels");
    Instance::new([("text", words.join(" "))], options)
}

fn count_instance(rng: &mut ChaCha8Rng, words: &[&str], len: usize) -> Instance {
    let mut pick: Vec<&str> = words.choose_multiple(rng, 2).copied().collect();
    let pair = [pick[0], pick[1]];
    let high = rng.random_range(2..=len.clamp(2, 4));
    let low = rng.random_range(0..high).min(len - high);
    let mut text: Vec<&str> = Vec::with_capacity(len);
    text.extend(std::iter::repeat_n(pair[0], high));
    text.extend(std::iter::repeat_n(pair[1], low));
    let filler: Vec<&str> = words
        .iter()
        .copied()
        .filter(|w| !pair.contains(w))
        .collect();
    while text.len() < len {
        text.push(filler.choose(rng).expect("filler is non-empty"));
    }
    text.shuffle(rng);
    pick.shuffle(rng);
    let correct = pick.iter().position(|w| *w == pair[0]).expect("pair word");
    let options = LabelOptionSet::new(pick.iter().map(|w| w.to_string()).collect(), correct)
        .expect("distinct pair");
    Instance::new([("text", text.join(" "))], options)
}

fn keyword_task(
    rng: &mut ChaCha8Rng,
    id: String,
    keyword: &str,
    words: &[&str],
    spec: &SyntheticTaskSpec,
    n: usize,
    verbalizers: Vec<Verbalizer>,
) -> Result<TaskSet> {
    let filler: Vec<&str> = words.iter().copied().filter(|w| *w != keyword).collect();
    let instances = (0..n)
        .map(|i| keyword_instance(rng, keyword, &filler, spec.input_len, i % 2 == 0))
        .collect();
    TaskSet::new(
        id,
        TaskKind::Classification,
        keyword_templates(keyword, spec.name_labels),
        verbalizers,
        instances,
        None,
    )
}

fn count_task(
    rng: &mut ChaCha8Rng,
    id: String,
    words: &[&str],
    spec: &SyntheticTaskSpec,
    n: usize,
) -> Result<TaskSet> {
    let instances = (0..n)
        .map(|_| count_instance(rng, words, spec.input_len))
        .collect();
    TaskSet::new(
        id,
        TaskKind::MultiChoice,
        count_templates(),
        Vec::new(),
        instances,
        None,
    )
}

/// Deterministically generates `(training tasks, held-out tasks)`.
pub fn generate_synthetic(
    spec: &SyntheticTaskSpec,
    seed: u64,
) -> Result<(Vec<TaskSet>, Vec<TaskSet>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<&str> = spec
        .content_words
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels = [PRESENT.to_string(), ABSENT.to_string()];
    let to_verbalizers = |variants: &[LabelVariant]| -> Result<Vec<Verbalizer>> {
        variants.iter().map(|v| v.to_verbalizer(&labels)).collect()
    };
    let mut train_variants = spec.train_variants.clone();
    train_variants.extend(nonce_pairs(spec, &mut rng));
    let train_verbalizers = to_verbalizers(&train_variants)?;
    let heldout_verbalizers = to_verbalizers(&spec.heldout_variants)?;

    match spec.family {
        RuleFamily::KeywordPresence => {
            words.shuffle(&mut rng);
            let keywords: Vec<&str> = words[..spec.train_tasks + spec.eval_tasks].to_vec();
            let mut train = Vec::with_capacity(spec.train_tasks);
            for (i, kw) in keywords[..spec.train_tasks].iter().enumerate() {
                let mut vs = train_verbalizers.clone();
                let shift = i % vs.len();
                vs.rotate_left(shift);
                train.push(keyword_task(
                    &mut rng,
                    format!("keyword_train_{i:02}"),
                    kw,
                    &words,
                    spec,
                    spec.instances_per_task,
                    vs,
                )?);
            }
            let mut eval = Vec::with_capacity(spec.eval_tasks + spec.train_tasks);
            if spec.eval_seen_tasks {
                // Without held-out pairs the fresh copies keep their own labels.
                let fresh_verbalizers = |i: usize| {
                    if heldout_verbalizers.is_empty() {
                        train[i].verbalizers.clone()
                    } else {
                        heldout_verbalizers.clone()
                    }
                };
                for (i, kw) in keywords[..spec.train_tasks].iter().enumerate() {
                    eval.push(keyword_task(
                        &mut rng,
                        format!("keyword_train_{i:02}_fresh"),
                        kw,
                        &words,
                        spec,
                        spec.eval_instances_per_task,
                        fresh_verbalizers(i),
                    )?);
                }
            }
            for (i, kw) in keywords[spec.train_tasks..].iter().enumerate() {
                eval.push(keyword_task(
                    &mut rng,
                    format!("keyword_eval_{i:02}"),
                    kw,
                    &words,
                    spec,
                    spec.eval_instances_per_task,
                    heldout_verbalizers.clone(),
                )?);
            }
            Ok((train, eval))
        }
        RuleFamily::PairwiseCount => {
            let train = (0..spec.train_tasks)
                .map(|i| {
                    count_task(
                        &mut rng,
                        format!("count_train_{i:02}"),
                        &words,
                        spec,
                        spec.instances_per_task,
                    )
                })
                .collect::<Result<_>>()?;
            let eval = (0..spec.eval_tasks)
                .map(|i| {
                    count_task(
                        &mut rng,
                        format!("count_eval_{i:02}"),
                        &words,
                        spec,
                        spec.eval_instances_per_task,
                    )
                })
                .collect::<Result<_>>()?;
            Ok((train, eval))
        }
    }
}

/// The correct label of a keyword-presence input, recomputed from the rule.
pub fn keyword_rule(text: &str, keyword: &str) -> &'static str {
    if text.split_whitespace().any(|w| w == keyword) {
        PRESENT
    } else {
        ABSENT
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SyntheticTaskSpec::default();
        let a = generate_synthetic(&spec, 3).unwrap();
        let b = generate_synthetic(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn keyword_labels_follow_the_rule() {
        let (train, eval) = generate_synthetic(&SyntheticTaskSpec::default(), 0).unwrap();
        for task in train.iter().chain(&eval) {
            let kw = task.templates[0].id.strip_prefix("contains_").unwrap();
            for inst in &task.instances {
                assert_eq!(
                    keyword_rule(&inst.inputs["text"], kw),
                    inst.options.correct_label()
                );
            }
        }
        assert_eq!(eval[0].verbalizers.len(), 10);
        assert_eq!(train[0].verbalizers.len(), 49);
        assert_eq!(eval.len(), 16);
        assert_eq!(eval[0].templates, train[0].templates);
        assert_ne!(eval[0].instances, train[0].instances[..40]);
    }

    #[test]
    fn overlapping_surfaces_rejected() {
        let mut spec = SyntheticTaskSpec::default();
        spec.heldout_variants.push(spec.train_variants[0].clone());
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn count_family_correct_option_is_more_frequent() {
        let spec = SyntheticTaskSpec {
            family: RuleFamily::PairwiseCount,
            input_len: 6,
            ..SyntheticTaskSpec::default()
        };
        let (train, _) = generate_synthetic(&spec, 1).unwrap();
        for inst in &train[0].instances {
            let count = |w: &str| {
                inst.inputs["text"]
                    .split_whitespace()
                    .filter(|x| *x == w)
                    .count()
            };
            let labels = inst.options.labels();
            let c = inst.options.correct_index();
            assert!(count(&labels[c]) > count(&labels[1 - c]));
        }
    }
}
