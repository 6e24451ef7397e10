//! The probability engine: vocabulary, a small encoder-decoder, reverse-mode
//! gradients, the optimizer and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod vocab;

pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint};
pub use model::{token_logprobs_batch, Model, ModelConfig, SequenceScorer, TokenLogProbs};
pub use optim::{global_norm, Adam, AdamConfig};
pub use tape::{Mat, Tape, Var};
pub use vocab::{TokenId, Vocabulary, EOS, PAD, UNK};
