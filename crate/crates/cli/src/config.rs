//! Run configuration: model shape and placement, training settings, corpus
//! source and tokenizer, as one JSON document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stem_core::data::{markov_corpus, CountryWorld, Tokenizer, FIRST_FREE_ID};
use stem_core::layers::FfnKind;
use stem_core::model::{ModelConfig, MoeConfig, PlacementPolicy};
use stem_core::training::TrainConfig;

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_holdout() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Taken from the tokenizer or synthetic source when absent.
    #[serde(default)]
    pub vocab: Option<usize>,
    /// Dense everywhere when absent.
    #[serde(default)]
    pub placement: Option<PlacementPolicy>,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub moe: MoeConfig,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// A UTF-8 text file.
    File { path: PathBuf },
    /// Sparse Markov chain over `vocab` ids.
    Markov {
        vocab: usize,
        tokens: usize,
        fanout: usize,
        restart: f64,
        seed: u64,
    },
    /// Country and capital sentences.
    Countries {
        countries: usize,
        sentences: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerChoice {
    Byte,
    /// Most frequent words of the corpus, up to `max_vocab` ids in total.
    Word {
        max_vocab: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: CorpusSource,
    /// Ignored for synthetic id sources.
    #[serde(default)]
    pub tokenizer: Option<TokenizerChoice>,
    /// Trailing share of the stream kept for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

/// Tokenized corpus split into training and held-out streams.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokenizer: Option<Tokenizer>,
    pub vocab: usize,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl RunConfig {
    /// Every problem found, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let m = &self.model;
        let probe = ModelConfig {
            layers: m.layers,
            d: m.d,
            d_ff: m.d_ff,
            vocab: m.vocab.unwrap_or(2),
            heads: m.heads,
            max_len: m.max_len,
            variants: vec![FfnKind::Dense; m.layers],
            tie_embeddings: m.tie_embeddings,
            moe: m.moe.clone(),
            norm_eps: m.norm_eps,
        };
        if let Err(e) = probe.validate() {
            out.push(e.to_string());
        }
        if let Some(p) = &m.placement {
            if m.layers > 0 {
                if let Err(e) = probe.clone().with_placement(p) {
                    out.push(format!("model.placement: {e}"));
                }
            }
        }
        if let Err(e) = self.train.validate() {
            out.push(e.to_string());
        }
        if self.train.seq_len > m.max_len {
            out.push(format!(
                "train.seq_len: {} exceeds model.max_len {}",
                self.train.seq_len, m.max_len
            ));
        }
        let d = &self.data;
        if !(0.0..0.5).contains(&d.holdout_fraction) {
            out.push(format!(
                "data.holdout_fraction: {} outside [0, 0.5)",
                d.holdout_fraction
            ));
        }
        match &d.source {
            CorpusSource::File { path } => {
                if !path.is_file() {
                    out.push(format!(
                        "data.source.path: {} is not a readable file",
                        path.display()
                    ));
                }
                if d.tokenizer.is_none() {
                    out.push("data.tokenizer: required for file corpora".into());
                }
            }
            CorpusSource::Markov { vocab, fanout, .. } => {
                if *vocab <= FIRST_FREE_ID + 1 {
                    out.push(format!("data.source.vocab: {vocab} is too small"));
                }
                if *fanout == 0 {
                    out.push("data.source.fanout: must be positive".into());
                }
            }
            CorpusSource::Countries { countries, .. } => {
                if !(1..=256).contains(countries) {
                    out.push(format!(
                        "data.source.countries: {countries} outside 1..=256"
                    ));
                }
            }
        }
        if let Some(TokenizerChoice::Word { max_vocab }) = &d.tokenizer {
            if *max_vocab <= FIRST_FREE_ID {
                out.push(format!(
                    "data.tokenizer.max_vocab: {max_vocab} is too small"
                ));
            }
        }
        out
    }

    /// Reads the corpus and splits off the held-out tail.
    pub fn load_corpus(&self) -> anyhow::Result<Corpus> {
        let (tokenizer, stream) = match &self.data.source {
            CorpusSource::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    anyhow::Error::new(e).context(format!("reading {}", path.display()))
                })?;
                let tok = match self.data.tokenizer.as_ref().expect("validated") {
                    TokenizerChoice::Byte => Tokenizer::Byte,
                    TokenizerChoice::Word { max_vocab } => {
                        Tokenizer::word_from_text(&text, *max_vocab)?
                    }
                };
                let ids = tok.encode(&text);
                (Some(tok), ids)
            }
            CorpusSource::Markov {
                vocab,
                tokens,
                fanout,
                restart,
                seed,
            } => (
                None,
                markov_corpus(*vocab, FIRST_FREE_ID, *tokens, *fanout, *restart, *seed)?,
            ),
            CorpusSource::Countries {
                countries,
                sentences,
                seed,
            } => {
                let world = CountryWorld::new(*countries)?;
                let tok = country_tokenizer(&world);
                let ids = tok.encode(&world.corpus(*sentences, *seed));
                (Some(tok), ids)
            }
        };
        let vocab = match (&tokenizer, &self.data.source) {
            (Some(t), _) => t.vocab_size(),
            (None, CorpusSource::Markov { vocab, .. }) => *vocab,
            _ => unreachable!("file and country sources carry a tokenizer"),
        };
        let cut =
            stream.len() - (stream.len() as f64 * self.data.holdout_fraction).round() as usize;
        Ok(Corpus {
            tokenizer,
            vocab,
            train: stream[..cut].to_vec(),
            heldout: stream[cut..].to_vec(),
        })
    }

    /// The model configuration with vocabulary and placement resolved.
    pub fn model_config(&self, corpus_vocab: usize) -> stem_core::Result<ModelConfig> {
        let m = &self.model;
        let vocab = m.vocab.unwrap_or(corpus_vocab);
        if vocab < corpus_vocab {
            return Err(stem_core::Error::Config(format!(
                "model.vocab: {vocab} is smaller than the corpus vocabulary {corpus_vocab}"
            )));
        }
        let mut c = ModelConfig::dense(m.layers, m.d, m.d_ff, vocab, m.heads, m.max_len);
        c.tie_embeddings = m.tie_embeddings;
        c.moe = m.moe.clone();
        c.norm_eps = m.norm_eps;
        if let Some(p) = &m.placement {
            c = c.with_placement(p)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Word tokenizer covering every word the country corpus can produce.
pub fn country_tokenizer(world: &CountryWorld) -> Tokenizer {
    let mut words: Vec<String> = CountryWorld::function_words()
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(world.countries.iter().cloned());
    words.extend(world.capitals.iter().cloned());
    Tokenizer::word_from_list(&words)
}
