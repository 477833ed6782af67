//! Held-out perplexity and a synthetic needle-retrieval task.
//!
//! A needle is `[KEY_MARKER, key, value]` placed once in Zipf filler; the
//! instance ends with `[QUERY_MARKER, key]` and the expected next token is
//! `value`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pack_sequences, Zipf};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

pub const KEY_MARKER: usize = 2;
pub const QUERY_MARKER: usize = 3;
/// Smallest id used for filler, keys and values.
pub const FIRST_CONTENT_ID: usize = 4;
pub const NEEDLE_LEN: usize = 3;
pub const QUERY_LEN: usize = 2;
/// Desk-scale retrieval lengths.
pub const DEFAULT_LENGTHS: [usize; 3] = [128, 256, 512];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahInstance {
    /// Filler with the needle inserted, followed by the query.
    pub tokens: Vec<usize>,
    pub key: usize,
    pub value: usize,
    /// Index of the needle's key marker.
    pub needle_pos: usize,
    /// Index of the query marker.
    pub query_pos: usize,
    pub answer: usize,
}

/// A `context_len`-token instance over ids `0..vocab`.
pub fn build_niah(context_len: usize, vocab: usize, seed: u64) -> Result<NiahInstance> {
    if context_len < NEEDLE_LEN + QUERY_LEN {
        return Err(Error::config(format!(
            "context of {context_len} cannot hold a needle and a query ({})",
            NEEDLE_LEN + QUERY_LEN
        )));
    }
    if vocab <= FIRST_CONTENT_ID + 1 {
        return Err(Error::config(format!(
            "vocabulary {vocab} leaves too few content ids"
        )));
    }
    let content = vocab - FIRST_CONTENT_ID;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = FIRST_CONTENT_ID + rng.random_range(0..content);
    let value = FIRST_CONTENT_ID + rng.random_range(0..content);
    let filler_len = context_len - NEEDLE_LEN - QUERY_LEN;
    let zipf = Zipf::new(content, 1.0)?;
    let mut tokens: Vec<usize> = (0..filler_len)
        .map(|_| FIRST_CONTENT_ID + zipf.sample(&mut rng))
        .collect();
    let needle_pos = rng.random_range(0..=filler_len);
    tokens.splice(needle_pos..needle_pos, [KEY_MARKER, key, value]);
    let query_pos = tokens.len();
    tokens.extend([QUERY_MARKER, key]);
    Ok(NiahInstance {
        tokens,
        key,
        value,
        needle_pos,
        query_pos,
        answer: value,
    })
}

/// Anything that scores every position of a sequence.
pub trait NextTokenModel {
    /// `tokens.len() × V` logits.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;

    /// Logits for the token after `tokens`.
    fn next_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let l = self.logits(tokens)?;
        Ok(l.row(l.rows() - 1).to_vec())
    }
}

impl NextTokenModel for Model {
    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward(tokens)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Greedy exact-match accuracy on the answer token.
pub fn score_retrieval<M: NextTokenModel + ?Sized>(
    model: &M,
    instances: &[NiahInstance],
) -> Result<RetrievalScore> {
    let mut correct = 0;
    for inst in instances {
        if argmax(&model.next_logits(&inst.tokens)?) == inst.answer {
            correct += 1;
        }
    }
    Ok(RetrievalScore {
        correct,
        total: instances.len(),
        accuracy: if instances.is_empty() {
            0.0
        } else {
            correct as f64 / instances.len() as f64
        },
    })
}

/// `exp` of the mean next-token negative log-likelihood over consecutive
/// `seq`-length windows of `corpus`.
pub fn val_ppl<M: NextTokenModel + ?Sized>(model: &M, corpus: &[usize], seq: usize) -> Result<f64> {
    let windows = pack_sequences(corpus, seq);
    if windows.is_empty() {
        return Err(Error::Degenerate(format!(
            "held-out corpus of {} tokens has no {seq}-token window",
            corpus.len()
        )));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for (inputs, targets) in &windows {
        let logits = model.logits(inputs)?;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Activated parameter count (shared weights plus table rows read) for each
/// prefix length of `tokens`.
pub fn activated_by_prefix(
    model: &Model,
    tokens: &[usize],
    lengths: &[usize],
) -> Result<Vec<usize>> {
    lengths
        .iter()
        .map(|&l| {
            if l > tokens.len() {
                return Err(Error::Index {
                    index: l,
                    bound: tokens.len() + 1,
                });
            }
            Ok(model.count_params(&tokens[..l])?.active)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahRow {
    pub length: usize,
    pub accuracy: f64,
    /// Mean activated parameters per instance.
    pub activated_params: f64,
}

/// Retrieval accuracy and mean activated parameters per length, with
/// `per_length` instances each; instance seeds derive from `seed`.
pub fn niah_sweep(
    model: &Model,
    lengths: &[usize],
    per_length: usize,
    seed: u64,
) -> Result<Vec<NiahRow>> {
    let vocab = model.config().vocab;
    lengths
        .iter()
        .enumerate()
        .map(|(li, &length)| {
            let instances = (0..per_length)
                .map(|i| build_niah(length, vocab, seed ^ ((li as u64) << 32 | i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let score = score_retrieval(model, &instances)?;
            let mut active = 0.0;
            for inst in &instances {
                active += model.count_params(&inst.tokens)?.active as f64;
            }
            Ok(NiahRow {
                length,
                accuracy: score.accuracy,
                activated_params: active / per_length.max(1) as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
