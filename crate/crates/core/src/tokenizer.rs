//! Word-level tokenizer with a frequency-ranked vocabulary.
//!
//! Text is split on whitespace; runs of alphanumeric characters form words
//! and every other non-space character is a token of its own. Chunking and
//! the model only see the [`Tokenizer`] trait, so a subword tokenizer can be
//! swapped in.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Text to token ids, without special tokens.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    /// Total vocabulary size including the four reserved tokens.
    pub max_vocab: usize,
    pub min_token_frequency: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            max_vocab: 30_000,
            min_token_frequency: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("max_vocab must be at least {min} (reserved tokens), got {0}", min = RESERVED.len())]
    TooSmall(usize),
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

/// Immutable token/id bijection with dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    lowercase: bool,
    token_to_id: BTreeMap<String, u32>,
}

/// Splits text into word and punctuation pieces.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            pieces.push(&text[start..i]);
        }
        if !c.is_whitespace() {
            pieces.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(start) = word_start {
        pieces.push(&text[start..]);
    }
    pieces
}

impl Vocabulary {
    /// Ranks tokens by descending frequency, ties broken lexicographically,
    /// and keeps the top `max_vocab - 4`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        config: &TokenizerConfig,
    ) -> Result<Self, VocabError> {
        if config.max_vocab < RESERVED.len() {
            return Err(VocabError::TooSmall(config.max_vocab));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for piece in pre_tokenize(text) {
                let token = if config.lowercase {
                    piece.to_lowercase()
                } else {
                    piece.to_string()
                };
                *counts.entry(token).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= config.min_token_frequency && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(config.max_vocab - RESERVED.len());

        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, config.lowercase))
    }

    fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            index,
            lowercase,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            lowercase: v.lowercase,
            token_to_id: v.index.into_iter().collect(),
        }
    }
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = VocabError;

    fn try_from(file: VocabularyFile) -> Result<Self, VocabError> {
        let n = file.token_to_id.len();
        let mut tokens = vec![None; n];
        for (token, id) in file.token_to_id {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| VocabError::Invalid(format!("id {id} out of range for {n} tokens")))?;
            if slot.replace(token).is_some() {
                return Err(VocabError::Invalid(format!("id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| VocabError::Invalid("ids are not dense".into()))?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(VocabError::Invalid("reserved tokens missing or misplaced".into()));
        }
        Ok(Self::from_tokens(tokens, file.lowercase))
    }
}

impl Tokenizer for Vocabulary {
    fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .into_iter()
            .map(|piece| {
                let found = if self.lowercase {
                    self.index.get(&piece.to_lowercase())
                } else {
                    self.index.get(piece)
                };
                match found.copied() {
                    // Reserved spellings in the text are ordinary unknown words.
                    Some(id) if id as usize >= RESERVED.len() => id,
                    _ => UNK_ID,
                }
            })
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}
