//! Token streams: tokenizers, batching, Zipf sampling and synthetic corpora.

mod batch;
mod synthetic;
mod tokenizer;
mod zipf;

pub use batch::{pack_sequences, Batch, BatchSampler};
pub use synthetic::{markov_corpus, CountryWorld};
pub use tokenizer::{Tokenizer, FIRST_FREE_ID, PAD_ID, UNK_ID};
pub use zipf::{zipf_stream, Zipf};

#[cfg(test)]
mod tests;
