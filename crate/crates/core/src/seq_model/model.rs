use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use super::vocab::{TokenId, Vocabulary, EOS, PAD};
use crate::error::{Error, Result};
use crate::rendering::RenderedExample;

/// Shape of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Encoder length limit, counting the appended end-of-sequence token.
    pub max_source_len: usize,
    pub max_target_len: usize,
    /// Reuse the token embedding table as the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            max_source_len: 64,
            max_target_len: 48,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_source_len == 0 || self.max_target_len == 0 {
            return Err(Error::Config(
                "d_ff and length limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-position log-probabilities of realized target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs {
    pub values: Vec<f64>,
    /// `false` marks padding, which is excluded from every sum.
    pub mask: Vec<bool>,
}

impl TokenLogProbs {
    pub fn unpadded(values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn total(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that assigns teacher-forced log-probabilities to a target
/// sequence given a source sequence.
pub trait SequenceScorer: Sync {
    fn vocab(&self) -> &Vocabulary;

    fn token_logprobs(&self, source: &[TokenId], target: &[TokenId]) -> Result<TokenLogProbs>;

    /// Unnormalized sum of the target's token log-probabilities.
    fn sequence_logprob(&self, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
        Ok(self.token_logprobs(source, target)?.total())
    }

    /// Token ids for a rendered pair. The source gets a trailing
    /// end-of-sequence token; the target already carries one.
    fn encode(&self, example: &RenderedExample) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        let mut source = self.vocab().encode_rendered(&example.source_text)?;
        source.push(EOS);
        let target = self.vocab().encode_rendered(&example.target_text)?;
        Ok((source, target))
    }
}

/// Scores a batch, padding results to the longest target. Each entry is
/// computed independently, so batching never changes a score.
pub fn token_logprobs_batch<S: SequenceScorer + ?Sized>(
    scorer: &S,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<Vec<TokenLogProbs>> {
    let width = pairs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    pairs
        .par_iter()
        .map(|(s, t)| {
            let mut lp = scorer.token_logprobs(s, t)?;
            lp.values.resize(width, 0.0);
            lp.mask.resize(width, false);
            Ok(lp)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct LayerNormIds {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    query: usize,
    key: usize,
    value: usize,
    out: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForwardIds {
    input: usize,
    output: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: LayerNormIds,
    attn: AttentionIds,
    ff_norm: LayerNormIds,
    ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: LayerNormIds,
    self_attn: AttentionIds,
    cross_norm: LayerNormIds,
    cross_attn: AttentionIds,
    ff_norm: LayerNormIds,
    ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    source_pos: usize,
    target_pos: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNormIds,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNormIds,
    out_proj: Option<usize>,
    out_bias: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: (usize, usize),
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    slots: Vec<Slot>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.slots.push(Slot { name, shape, init });
        self.slots.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.add(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        let std = (d as f64).powf(-0.5);
        AttentionIds {
            query: self.add(format!("{prefix}.query"), (d, d), Init::Normal(std)),
            key: self.add(format!("{prefix}.key"), (d, d), Init::Normal(std)),
            value: self.add(format!("{prefix}.value"), (d, d), Init::Normal(std)),
            out: self.add(format!("{prefix}.out"), (d, d), Init::Normal(std)),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForwardIds {
        FeedForwardIds {
            input: self.add(
                format!("{prefix}.in"),
                (d, d_ff),
                Init::Normal((d as f64).powf(-0.5)),
            ),
            output: self.add(
                format!("{prefix}.out"),
                (d_ff, d),
                Init::Normal((d_ff as f64).powf(-0.5)),
            ),
        }
    }
}

fn build_layout(config: &ModelConfig, vocab_size: usize) -> (Layout, Vec<Slot>) {
    let d = config.d_model;
    let mut b = LayoutBuilder::default();
    let embed = b.add("embed".into(), (vocab_size, d), Init::Normal(1.0));
    let source_pos = b.add(
        "source_pos".into(),
        (config.max_source_len, d),
        Init::Normal(0.1),
    );
    let target_pos = b.add(
        "target_pos".into(),
        (config.max_target_len, d),
        Init::Normal(0.1),
    );
    let encoder = (0..config.encoder_layers)
        .map(|i| EncoderLayer {
            attn_norm: b.norm(&format!("encoder.{i}.attn_norm"), d),
            attn: b.attention(&format!("encoder.{i}.attn"), d),
            ff_norm: b.norm(&format!("encoder.{i}.ff_norm"), d),
            ff: b.feed_forward(&format!("encoder.{i}.ff"), d, config.d_ff),
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let decoder = (0..config.decoder_layers)
        .map(|i| DecoderLayer {
            self_norm: b.norm(&format!("decoder.{i}.self_norm"), d),
            self_attn: b.attention(&format!("decoder.{i}.self_attn"), d),
            cross_norm: b.norm(&format!("decoder.{i}.cross_norm"), d),
            cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), d),
            ff_norm: b.norm(&format!("decoder.{i}.ff_norm"), d),
            ff: b.feed_forward(&format!("decoder.{i}.ff"), d, config.d_ff),
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let out_proj = (!config.tie_embeddings).then(|| {
        b.add(
            "out_proj".into(),
            (d, vocab_size),
            Init::Normal((d as f64).powf(-0.5)),
        )
    });
    let out_bias = b.add("out_bias".into(), (1, vocab_size), Init::Zeros);
    let layout = Layout {
        embed,
        source_pos,
        target_pos,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        out_proj,
        out_bias,
    };
    (layout, b.slots)
}

/// A small pre-norm transformer encoder-decoder over a word vocabulary.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Mat>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.names == other.names
            && self.params == other.params
    }
}

impl Model {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, slots) = build_layout(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = slots
            .iter()
            .map(|slot| match slot.init {
                Init::Zeros => Mat::zeros(slot.shape),
                Init::Ones => Mat::ones(slot.shape),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Mat::from_shape_simple_fn(slot.shape, || normal.sample(&mut rng))
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            layout,
            names: slots.into_iter().map(|s| s.name).collect(),
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        tensors: Vec<(String, Mat)>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, slots) = build_layout(&config, vocab.len());
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(slots.len());
        for (slot, (name, tensor)) in slots.iter().zip(tensors) {
            if slot.name != name || slot.shape != tensor.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    tensor.dim(),
                    slot.name,
                    slot.shape
                )));
            }
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            params.push(tensor);
        }
        Ok(Self {
            config,
            vocab,
            layout,
            names: slots.into_iter().map(|s| s.name).collect(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_lengths(&self, source: &[TokenId], target: &[TokenId]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::Invalid("empty source sequence".into()));
        }
        if source.len() > self.config.max_source_len {
            return Err(Error::TooLong {
                which: "source",
                len: source.len(),
                max: self.config.max_source_len,
            });
        }
        if target.len() > self.config.max_target_len {
            return Err(Error::TooLong {
                which: "target",
                len: target.len(),
                max: self.config.max_target_len,
            });
        }
        let vocab = self.vocab.len() as TokenId;
        if let Some(&bad) = source.iter().chain(target).find(|&&id| id >= vocab) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(())
    }

    fn norm(&self, t: &mut Tape<'_>, ids: LayerNormIds, x: Var) -> Var {
        let gain = t.param(ids.gain);
        let bias = t.param(ids.bias);
        t.layer_norm(x, gain, bias)
    }

    fn attention(
        &self,
        t: &mut Tape<'_>,
        ids: AttentionIds,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> Var {
        let (wq, wk, wv, wo) = (
            t.param(ids.query),
            t.param(ids.key),
            t.param(ids.value),
            t.param(ids.out),
        );
        let q = t.matmul(queries, wq);
        let k = t.matmul(memory, wk);
        let v = t.matmul(memory, wv);
        let heads = self.config.n_heads;
        let head_dim = self.config.d_model / heads;
        let scale = (head_dim as f64).powf(-0.5);
        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_dim;
                (
                    t.slice_cols(q, start, head_dim),
                    t.slice_cols(k, start, head_dim),
                    t.slice_cols(v, start, head_dim),
                )
            };
            let scores = t.matmul_t(qh, kh);
            let scores = t.scale(scores, scale);
            let weights = t.softmax(scores, causal);
            outputs.push(t.matmul(weights, vh));
        }
        let merged = if heads == 1 {
            outputs[0]
        } else {
            t.concat_cols(&outputs)
        };
        t.matmul(merged, wo)
    }

    fn feed_forward(&self, t: &mut Tape<'_>, ids: FeedForwardIds, x: Var) -> Var {
        let w_in = t.param(ids.input);
        let w_out = t.param(ids.output);
        let h = t.matmul(x, w_in);
        let h = t.gelu(h);
        t.matmul(h, w_out)
    }

    /// Records the forward pass and returns the `target.len() × vocab`
    /// logits, teacher-forced on `target` shifted right behind a padding
    /// start token.
    pub fn forward(&self, t: &mut Tape<'_>, source: &[TokenId], target: &[TokenId]) -> Result<Var> {
        self.check_lengths(source, target)?;
        if target.is_empty() {
            return Err(Error::Invalid("empty target sequence".into()));
        }
        let embed = t.param(self.layout.embed);
        let src_ids: Vec<usize> = source.iter().map(|&id| id as usize).collect();
        let tok = t.rows(embed, &src_ids);
        let pos_table = t.param(self.layout.source_pos);
        let pos = t.rows(pos_table, &(0..source.len()).collect::<Vec<_>>());
        let mut x = t.add(tok, pos);
        for layer in &self.layout.encoder {
            let h = self.norm(t, layer.attn_norm, x);
            let a = self.attention(t, layer.attn, h, h, false);
            x = t.add(x, a);
            let h = self.norm(t, layer.ff_norm, x);
            let f = self.feed_forward(t, layer.ff, h);
            x = t.add(x, f);
        }
        let memory = self.norm(t, self.layout.encoder_norm, x);

        let dec_ids: Vec<usize> = std::iter::once(PAD as usize)
            .chain(target[..target.len() - 1].iter().map(|&id| id as usize))
            .collect();
        let tok = t.rows(embed, &dec_ids);
        let pos_table = t.param(self.layout.target_pos);
        let pos = t.rows(pos_table, &(0..target.len()).collect::<Vec<_>>());
        let mut y = t.add(tok, pos);
        for layer in &self.layout.decoder {
            let h = self.norm(t, layer.self_norm, y);
            let a = self.attention(t, layer.self_attn, h, h, true);
            y = t.add(y, a);
            let h = self.norm(t, layer.cross_norm, y);
            let c = self.attention(t, layer.cross_attn, h, memory, false);
            y = t.add(y, c);
            let h = self.norm(t, layer.ff_norm, y);
            let f = self.feed_forward(t, layer.ff, h);
            y = t.add(y, f);
        }
        let h = self.norm(t, self.layout.decoder_norm, y);
        let logits = match self.layout.out_proj {
            Some(id) => {
                let w = t.param(id);
                t.matmul(h, w)
            }
            None => {
                let scores = t.matmul_t(h, embed);
                t.scale(scores, (self.config.d_model as f64).powf(-0.5))
            }
        };
        let bias = t.param(self.layout.out_bias);
        Ok(t.add_row(logits, bias))
    }

    /// Raw logits, one row per target position.
    pub fn logits(&self, source: &[TokenId], target: &[TokenId]) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, source, target)?;
        Ok(tape.value(logits).clone())
    }
}

impl SequenceScorer for Model {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn token_logprobs(&self, source: &[TokenId], target: &[TokenId]) -> Result<TokenLogProbs> {
        if target.is_empty() {
            return Ok(TokenLogProbs::unpadded(Vec::new()));
        }
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, source, target)?;
        let targets: Vec<usize> = target.iter().map(|&id| id as usize).collect();
        let picked = tape.pick_log_softmax(logits, &targets);
        Ok(TokenLogProbs::unpadded(
            tape.value(picked).column(0).to_vec(),
        ))
    }
}
