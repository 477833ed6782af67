//! Decoder-only transformer with a per-layer choice of feed-forward variant.

mod checkpoint;
mod config;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    FORMAT_VERSION, MAGIC,
};
pub use config::{select_placement, ModelConfig, MoeConfig, PlacementKind, PlacementPolicy};

use crate::error::{Error, Result};
use crate::layers::{
    causal_attention, AttentionParams, FfnKind, FfnParams, HashMoeParams, HashRouter, Lookup,
    MoeParams, StemDaggerParams, StemGateParams, StemParams, StemTable, SwiGluParams, INIT_STD,
};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

/// One pre-norm decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub attn: AttentionParams,
    pub ffn_norm: Tensor,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// Output projection V×d; `None` when tied to `embed`.
    pub lm_head: Option<Tensor>,
}

/// Per-call forward options.
#[derive(Debug, Clone, Default)]
pub struct ForwardHooks<'a> {
    /// Per layer, an alternative table/row source for token-indexed slots.
    pub lookups: Vec<Option<Lookup<'a>>>,
}

impl<'a> ForwardHooks<'a> {
    fn lookup(&self, layer: usize) -> Option<Lookup<'a>> {
        self.lookups.get(layer).copied().flatten()
    }
}

/// Handles into the tape produced by [`Model::forward_tape`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `batch·seq × V` logits.
    pub logits: Var,
    /// Normalised FFN input of every layer, `batch·seq × d`.
    pub ffn_inputs: Vec<Var>,
}

/// Parameter census.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Everything except token-indexed tables.
    pub shared: usize,
    /// Table rows actually read, summed over layers.
    pub table_rows_touched: usize,
    /// `shared + table_rows_touched · d_ff`.
    pub active: usize,
}

pub(crate) fn init_ffn(
    config: &ModelConfig,
    layer: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FfnParams> {
    let (d, d_ff, v) = (config.d, config.d_ff, config.vocab);
    Ok(match config.variants[layer] {
        FfnKind::Dense => FfnParams::Dense(SwiGluParams::init(d, d_ff, rng)),
        FfnKind::Stem => {
            let f = SwiGluParams::init(d, d_ff, rng);
            FfnParams::Stem(StemParams {
                w_g: f.w_g,
                w_d: f.w_d,
                table: StemTable::init(v, d_ff, layer, rng),
            })
        }
        FfnKind::StemGate => {
            let f = SwiGluParams::init(d, d_ff, rng);
            FfnParams::StemGate(StemGateParams {
                w_u: f.w_u,
                w_d: f.w_d,
                table: StemTable::init(v, d_ff, layer, rng),
            })
        }
        FfnKind::StemDagger => FfnParams::StemDagger(StemDaggerParams {
            ffn: SwiGluParams::init(d, d_ff, rng),
            table: StemTable::init(v, d_ff, layer, rng),
        }),
        FfnKind::Moe => FfnParams::Moe(MoeParams::init(
            d,
            config.expert_width(),
            config.moe.experts,
            config.moe.top_r,
            rng,
        )?),
        FfnKind::HashMoe => FfnParams::HashMoe(HashMoeParams {
            experts: (0..config.moe.experts)
                .map(|_| SwiGluParams::init(d, config.expert_width(), rng))
                .collect(),
            router: HashRouter::build(
                v,
                config.moe.experts,
                config.moe.hash_seed.wrapping_add(layer as u64),
            )?,
        }),
    })
}

/// Deterministic initialisation from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d;
    let embed = Tensor::randn_truncated(&[config.vocab, d], INIT_STD, &mut rng);
    let mut blocks = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        let attn = AttentionParams::init(d, config.heads, &mut rng)?;
        let ffn = init_ffn(config, layer, &mut rng)?;
        blocks.push(Block {
            attn_norm: Tensor::full(&[d], 1.0),
            attn,
            ffn_norm: Tensor::full(&[d], 1.0),
            ffn,
        });
    }
    let lm_head = if config.tie_embeddings {
        None
    } else {
        Some(Tensor::randn_truncated(
            &[config.vocab, d],
            INIT_STD,
            &mut rng,
        ))
    };
    Ok(Model {
        config: config.clone(),
        embed,
        blocks,
        final_norm: Tensor::full(&[d], 1.0),
        lm_head,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &Tensor {
        self.lm_head.as_ref().unwrap_or(&self.embed)
    }

    pub fn table(&self, layer: usize) -> Option<&StemTable> {
        self.blocks.get(layer).and_then(|b| b.ffn.table())
    }

    pub fn table_mut(&mut self, layer: usize) -> Option<&mut StemTable> {
        self.blocks.get_mut(layer).and_then(|b| b.ffn.table_mut())
    }

    pub fn stem_layers(&self) -> BTreeSet<usize> {
        self.config.stem_layers()
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if batch == 0 || seq == 0 {
            return Err(Error::shape("forward over an empty batch"));
        }
        if tokens.len() != batch * seq {
            return Err(Error::shape(format!(
                "{} tokens for batch {batch} × seq {seq}",
                tokens.len()
            )));
        }
        if seq > self.config.max_len {
            return Err(Error::shape(format!(
                "sequence length {seq} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                index: bad,
                bound: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Records the forward pass of `batch` sequences of length `seq` (packed
    /// row-major in `tokens`) on `tape`. Operation counts are attributed to
    /// scopes `layer.{i}.attn`, `layer.{i}.ffn` and `head`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        hooks: &ForwardHooks<'_>,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens, batch, seq)?;
        let eps = self.config.norm_eps;
        let embed = tape.param(&self.embed);
        let mut h = tape.gather_rows(embed, tokens)?;
        let mut ffn_inputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            tape.set_scope(Some(format!("layer.{i}.attn")));
            let scale = tape.param(&block.attn_norm);
            let a = tape.rmsnorm(h, scale, eps)?;
            let a = causal_attention(tape, a, &block.attn, batch, seq)?;
            h = tape.add(h, a)?;
            tape.set_scope(Some(format!("layer.{i}.ffn")));
            let scale = tape.param(&block.ffn_norm);
            let f = tape.rmsnorm(h, scale, eps)?;
            ffn_inputs.push(f);
            let f = block.ffn.forward(tape, f, tokens, hooks.lookup(i))?;
            h = tape.add(h, f)?;
        }
        tape.set_scope(Some("head".into()));
        let scale = tape.param(&self.final_norm);
        let out = tape.rmsnorm(h, scale, eps)?;
        let head = tape.param(self.head());
        let logits = tape.linear(out, head)?;
        tape.set_scope(None);
        Ok(ForwardTrace { logits, ffn_inputs })
    }

    /// Logits `L×V` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_with(tokens, &ForwardHooks::default())
    }

    pub fn forward_with(&self, tokens: &[usize], hooks: &ForwardHooks<'_>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let trace = self.forward_tape(&mut tape, tokens, 1, tokens.len(), hooks)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Logits for `batch` packed sequences, `batch·seq × V`.
    pub fn forward_batch(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let trace = self.forward_tape(&mut tape, tokens, batch, seq, &ForwardHooks::default())?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Mean next-token cross-entropy of `targets` given `inputs`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let trace = self.forward_tape(tape, inputs, batch, seq, &ForwardHooks::default())?;
        tape.cross_entropy(trace.logits, targets)
    }

    /// Total and activated parameter counts for one forward over `tokens`,
    /// with table usage traced from the gathers actually executed.
    pub fn count_params(&self, tokens: &[usize]) -> Result<ParamCount> {
        let total = self.param_count();
        let tables: Vec<&StemTable> = self.blocks.iter().filter_map(|b| b.ffn.table()).collect();
        let table_params: usize = tables.iter().map(|t| t.u.numel()).sum();
        let shared = total - table_params;
        let touched = if tokens.is_empty() {
            0
        } else {
            let mut tape = Tape::inference();
            self.forward_tape(&mut tape, tokens, 1, tokens.len(), &ForwardHooks::default())?;
            tables
                .iter()
                .map(|t| {
                    tape.param_var(&t.u)
                        .map_or(0, |v| tape.gathered_rows(v).len())
                })
                .sum()
        };
        Ok(ParamCount {
            total,
            shared,
            table_rows_touched: touched,
            active: shared + touched * self.config.d_ff,
        })
    }

    /// Replaces parameters by name, checking shapes; every model parameter
    /// must be present.
    pub fn load_params<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> = named.into_iter().collect();
        for (name, t) in self.named_params_mut() {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

impl ParamSet for Model {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &b.attn_norm));
            for (n, t) in b.attn.named_params() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            out.push((format!("layers.{i}.ffn_norm"), &b.ffn_norm));
            for (n, t) in b.ffn.named_params() {
                out.push((format!("layers.{i}.ffn.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut b.attn_norm));
            for (n, t) in b.attn.named_params_mut() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            out.push((format!("layers.{i}.ffn_norm"), &mut b.ffn_norm));
            for (n, t) in b.ffn.named_params_mut() {
                out.push((format!("layers.{i}.ffn.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }
}

/// Closed-form parameter census of a configuration.
pub fn closed_form_param_count(config: &ModelConfig) -> usize {
    let (d, f, v) = (config.d, config.d_ff, config.vocab);
    let e = config.expert_width();
    let k = config.moe.experts;
    let mut total = v * d + d;
    if !config.tie_embeddings {
        total += v * d;
    }
    for kind in &config.variants {
        total += 4 * d * d + 2 * d;
        total += match kind {
            FfnKind::Dense => 3 * d * f,
            FfnKind::Stem | FfnKind::StemGate => 2 * d * f + v * f,
            FfnKind::StemDagger => 3 * d * f + v * f,
            FfnKind::Moe => k * d + k * 3 * d * e,
            FfnKind::HashMoe => k * 3 * d * e,
        };
    }
    total
}
