use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Next-token batch: `batch·seq` inputs and the matching shifted targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Draws windows from a token stream; the batch for a step depends only on
/// the seed and the step index.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    batch: usize,
    seq: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::config(
                "batch size and sequence length must be positive",
            ));
        }
        Ok(BatchSampler { seed, batch, seq })
    }

    pub fn batch_at(&self, step: usize, stream: &[usize]) -> Result<Batch> {
        if stream.len() < self.seq + 1 {
            return Err(Error::config(format!(
                "corpus of {} tokens is shorter than seq_len + 1 = {}",
                stream.len(),
                self.seq + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64);
        let starts = stream.len() - self.seq;
        let mut inputs = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            let s = rng.random_range(0..starts);
            inputs.extend_from_slice(&stream[s..s + self.seq]);
            targets.extend_from_slice(&stream[s + 1..s + self.seq + 1]);
        }
        Ok(Batch {
            inputs,
            targets,
            batch: self.batch,
            seq: self.seq,
        })
    }
}

/// Splits a stream into consecutive non-overlapping `seq`-length windows with
/// shifted targets, dropping the incomplete tail.
pub fn pack_sequences(stream: &[usize], seq: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    if seq == 0 || stream.len() < 2 {
        return Vec::new();
    }
    (0..(stream.len() - 1) / seq)
        .map(|i| {
            let s = i * seq;
            (
                stream[s..s + seq].to_vec(),
                stream[s + 1..s + seq + 1].to_vec(),
            )
        })
        .collect()
}
