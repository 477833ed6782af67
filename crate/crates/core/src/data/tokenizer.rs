use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// First id available to real tokens.
pub const FIRST_FREE_ID: usize = 2;

const PAD_WORD: &str = "<pad>";
const UNK_WORD: &str = "<unk>";

/// Byte-level or whitespace-word tokenizer with ids 0 (pad) and 1 (unknown)
/// reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tokenizer {
    /// Byte `b` has id `b + 2`.
    Byte,
    /// `words[i]` has id `i + 2`.
    Word { words: Vec<String> },
}

impl Tokenizer {
    /// Word vocabulary of the `max_vocab − 2` most frequent words of `text`
    /// (ties broken alphabetically).
    pub fn word_from_text(text: &str, max_vocab: usize) -> Result<Self> {
        if max_vocab < FIRST_FREE_ID {
            return Err(Error::config(format!(
                "vocabulary size {max_vocab} leaves no room for words"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        words.truncate(max_vocab - FIRST_FREE_ID);
        Ok(Tokenizer::Word {
            words: words.into_iter().map(|(w, _)| w.to_string()).collect(),
        })
    }

    /// Word vocabulary with the given words in order, duplicates removed.
    pub fn word_from_list<S: AsRef<str>>(list: &[S]) -> Self {
        let mut seen = std::collections::HashSet::new();
        let words = list
            .iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| seen.insert(w.clone()))
            .collect();
        Tokenizer::Word { words }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256 + FIRST_FREE_ID,
            Tokenizer::Word { words } => words.len() + FIRST_FREE_ID,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self {
            Tokenizer::Byte => text.bytes().map(|b| b as usize + FIRST_FREE_ID).collect(),
            Tokenizer::Word { words } => {
                let index: HashMap<&str, usize> = words
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (w.as_str(), i + FIRST_FREE_ID))
                    .collect();
                text.split_whitespace()
                    .map(|w| index.get(w).copied().unwrap_or(UNK_ID))
                    .collect()
            }
        }
    }

    /// Id of a single word (word mode) or byte string of length one (byte
    /// mode).
    pub fn token_id(&self, token: &str) -> Option<usize> {
        match self {
            Tokenizer::Byte => match token.as_bytes() {
                [b] => Some(*b as usize + FIRST_FREE_ID),
                _ => None,
            },
            Tokenizer::Word { words } => words
                .iter()
                .position(|w| w == token)
                .map(|i| i + FIRST_FREE_ID),
        }
    }

    /// Text of one id; pad and unknown render as `<pad>` / `<unk>`.
    pub fn token_text(&self, id: usize) -> Result<String> {
        match id {
            PAD_ID => return Ok(PAD_WORD.into()),
            UNK_ID => return Ok(UNK_WORD.into()),
            _ => {}
        }
        match self {
            Tokenizer::Byte if id < 256 + FIRST_FREE_ID => {
                Ok(String::from_utf8_lossy(&[(id - FIRST_FREE_ID) as u8]).into_owned())
            }
            Tokenizer::Word { words } if id - FIRST_FREE_ID < words.len() => {
                Ok(words[id - FIRST_FREE_ID].clone())
            }
            _ => Err(Error::Index {
                index: id,
                bound: self.vocab_size(),
            }),
        }
    }

    /// Inverse of [`Tokenizer::encode`]: bytes are reassembled (pad ids are
    /// dropped), words joined by single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        match self {
            Tokenizer::Byte => {
                let mut bytes = Vec::with_capacity(ids.len());
                for &id in ids {
                    match id {
                        PAD_ID => {}
                        UNK_ID => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                        _ if id < 256 + FIRST_FREE_ID => bytes.push((id - FIRST_FREE_ID) as u8),
                        _ => {
                            return Err(Error::Index {
                                index: id,
                                bound: self.vocab_size(),
                            })
                        }
                    }
                }
                String::from_utf8(bytes)
                    .map_err(|e| Error::Format(format!("decoded bytes are not UTF-8: {e}")))
            }
            Tokenizer::Word { .. } => {
                let parts = ids
                    .iter()
                    .filter(|&&id| id != PAD_ID)
                    .map(|&id| self.token_text(id))
                    .collect::<Result<Vec<_>>>()?;
                Ok(parts.join(" "))
            }
        }
    }
}
