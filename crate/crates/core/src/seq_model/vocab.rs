use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rendering::{corpus_words, sentinel, EOS_MARKER};
use crate::task_schema::{has_marker, TaskSet, Verbalizer, MARKER_CLOSE, MARKER_OPEN};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
const FIRST_SENTINEL: TokenId = 3;

const PAD_MARKER: &str = "⟨pad⟩";
const UNK_MARKER: &str = "⟨unk⟩";

/// Word-level vocabulary. Ids `0..3` are padding, end-of-sequence and
/// unknown, followed by the sentinels, followed by content words in sorted
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    sentinels: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    sentinels: usize,
    words: Vec<String>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        let first_word = FIRST_SENTINEL as usize + v.sentinels;
        VocabFile {
            sentinels: v.sentinels,
            words: v.tokens[first_word..].to_vec(),
        }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;
    fn try_from(file: VocabFile) -> Result<Self> {
        let vocab = Vocabulary::new(file.words.iter().cloned(), file.sentinels);
        if vocab.len() != FIRST_SENTINEL as usize + file.sentinels + file.words.len() {
            return Err(Error::Checkpoint("vocabulary words are not unique".into()));
        }
        Ok(vocab)
    }
}

impl Vocabulary {
    /// Builds a vocabulary from content words. Duplicates, empty strings and
    /// anything containing a reserved marker character are dropped.
    pub fn new(words: impl IntoIterator<Item = String>, sentinels: usize) -> Self {
        let mut content: Vec<String> = words
            .into_iter()
            .filter(|w| !w.is_empty() && !has_marker(w) && !w.chars().any(char::is_whitespace))
            .collect();
        content.sort();
        content.dedup();
        let mut tokens = vec![
            PAD_MARKER.to_string(),
            EOS_MARKER.to_string(),
            UNK_MARKER.to_string(),
        ];
        tokens.extend((0..sentinels).map(sentinel));
        tokens.extend(content);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            sentinels,
        }
    }

    /// Covers every word any rendering of `tasks` can produce, plus the
    /// surfaces of `extra`, with enough sentinels for the longest template.
    pub fn for_tasks(tasks: &[TaskSet], extra: &[Verbalizer]) -> Result<Self> {
        let sentinels = tasks
            .iter()
            .flat_map(|t| &t.templates)
            .map(|t| t.instruction_count() + 1)
            .max()
            .unwrap_or(1);
        Ok(Self::new(corpus_words(tasks, extra)?, sentinels))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentinel_count(&self) -> usize {
        self.sentinels
    }

    pub fn sentinel_id(&self, i: usize) -> Option<TokenId> {
        (i < self.sentinels).then(|| FIRST_SENTINEL + i as TokenId)
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < FIRST_SENTINEL as usize + self.sentinels
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn word_id(&self, word: &str) -> TokenId {
        match self.index.get(word) {
            Some(&id) if !self.is_reserved(id) => id,
            _ => UNK,
        }
    }

    /// Tokenizes plain text on whitespace. Unknown words map to [`UNK`];
    /// text containing reserved marker characters is rejected.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if has_marker(text) {
            return Err(Error::ReservedGlyph(text.to_string()));
        }
        Ok(text.split_whitespace().map(|w| self.word_id(w)).collect())
    }

    /// Tokenizes rendered text, where sentinel and end-of-sequence markers
    /// are recognized wherever they occur.
    pub fn encode_rendered(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            while let Some(start) = rest.find(MARKER_OPEN) {
                if start > 0 {
                    ids.push(self.word_id(&rest[..start]));
                }
                let after = &rest[start..];
                let end = after
                    .find(MARKER_CLOSE)
                    .ok_or_else(|| Error::ReservedGlyph(chunk.to_string()))?
                    + MARKER_CLOSE.len_utf8();
                let marker = &after[..end];
                match self.index.get(marker) {
                    Some(&id) if id == EOS || (id >= FIRST_SENTINEL && self.is_reserved(id)) => {
                        ids.push(id)
                    }
                    _ => return Err(Error::ReservedGlyph(marker.to_string())),
                }
                rest = &after[end..];
            }
            if rest.contains(MARKER_CLOSE) {
                return Err(Error::ReservedGlyph(chunk.to_string()));
            }
            if !rest.is_empty() {
                ids.push(self.word_id(rest));
            }
        }
        Ok(ids)
    }

    /// Inverse of [`Vocabulary::tokenize`] on in-vocabulary text. The
    /// end-of-sequence marker is attached without a separating space, as in
    /// rendered targets.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).unwrap_or(UNK_MARKER);
            if !out.is_empty() && id != EOS {
                out.push(' ');
            }
            out.push_str(token);
        }
        out
    }
}
