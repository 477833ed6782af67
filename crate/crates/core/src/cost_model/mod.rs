//! Per-layer FLOP, parameter-load and communication formulas for dense and
//! STEM feed-forward layers, an instrumented counter that checks them, and the
//! training ROI ratio.
//!
//! Counting convention: one unit per multiply-accumulate of a matrix product
//! and one unit per element of the gate product, so a dense SwiGLU layer
//! costs `3·d·d_ff + d_ff` per token.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::FfnKind;
use crate::model::{ForwardHooks, Model};
use crate::numerics::{FlopTally, Tape};

/// Public Qwen2.5 widths `(name, d, d_ff)`.
pub const QWEN25: [(&str, u64, u64); 5] = [
    ("1.5B", 1536, 8960),
    ("3B", 2048, 11008),
    ("7B", 3584, 18944),
    ("14B", 5120, 13824),
    ("32B", 5120, 27648),
];

/// Context length used with [`QWEN25`].
pub const QWEN_CONTEXT: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchHyperparams {
    pub d: u64,
    pub d_ff: u64,
    /// Sequence length L.
    pub seq_len: u64,
    /// Batch size B.
    pub batch: u64,
    pub vocab: u64,
}

impl ArchHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
            ("batch", self.batch),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::config(format!("cost.{name}: must be positive")));
            }
        }
        Ok(())
    }
}

/// The two FFN forms the formulas cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    /// SwiGLU with gate, up and down projections.
    Base,
    /// Up-projection replaced by a table lookup.
    Stem,
}

impl CostVariant {
    /// The cost form of a model slot; `None` for expert layers.
    pub fn of(kind: FfnKind) -> Option<Self> {
        match kind {
            FfnKind::Dense => Some(CostVariant::Base),
            FfnKind::Stem | FfnKind::StemGate => Some(CostVariant::Stem),
            _ => None,
        }
    }

    /// Number of `d×d_ff` projections.
    fn projections(self) -> u128 {
        match self {
            CostVariant::Base => 3,
            CostVariant::Stem => 2,
        }
    }
}

fn wide(h: &ArchHyperparams) -> (u128, u128, u128, u128) {
    (
        h.d as u128,
        h.d_ff as u128,
        h.seq_len as u128,
        h.batch as u128,
    )
}

/// FFN-block prefill cost `B(k·d_ff·d·L + d_ff·L)`, `k` = 3 or 2.
pub fn prefill_flops(h: &ArchHyperparams, v: CostVariant) -> u128 {
    let (d, f, l, b) = wide(h);
    b * (v.projections() * f * d * l + f * l)
}

/// Attention-block cost `B(4Ld² + 2L²d)` under the same convention.
pub fn attention_flops(h: &ArchHyperparams) -> u128 {
    let (d, _, l, b) = wide(h);
    b * (4 * l * d * d + 2 * l * l * d)
}

/// Per-layer training cost `B(4Ld² + 2L²d + k·L·d·d_ff)`.
pub fn train_flops(h: &ArchHyperparams, v: CostVariant) -> u128 {
    let (d, f, l, b) = wide(h);
    b * (4 * l * d * d + 2 * l * l * d + v.projections() * l * d * f)
}

/// Per-step decode load in elements, `B(4d² + 2Ld + k·d·d_ff)`.
pub fn decode_mem(h: &ArchHyperparams, v: CostVariant) -> u128 {
    let (d, f, l, b) = wide(h);
    b * (4 * d * d + 2 * l * d + v.projections() * d * f)
}

/// `d_ff / (4d + 2L + 3d_ff)`.
pub fn saving_fraction(d: f64, d_ff: f64, seq_len: f64) -> f64 {
    d_ff / (4.0 * d + 2.0 * seq_len + 3.0 * d_ff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
    Training,
}

fn unique_count(tokens: &[usize]) -> u128 {
    tokens.iter().collect::<BTreeSet<_>>().len() as u128
}

/// Table elements moved between tiers: one row per distinct id in `tokens`
/// (the whole batch for prefill and training, the current step's tokens for
/// decode); training also returns the row gradients.
pub fn comm_cost(phase: Phase, tokens: &[usize], d_ff: u64) -> u128 {
    let once = unique_count(tokens) * d_ff as u128;
    match phase {
        Phase::Prefill | Phase::Decode => once,
        Phase::Training => 2 * once,
    }
}

/// Table parameters activated by a sequence: `|S|·d_ff·L_uniq`.
pub fn activated_params(stem_layers: usize, d_ff: usize, tokens: &[usize]) -> u128 {
    stem_layers as u128 * d_ff as u128 * unique_count(tokens)
}

/// Accuracy per unit of training compute.
pub fn roi(avg_accuracy: f64, total_train_flops: f64) -> Result<f64> {
    if !(total_train_flops > 0.0) {
        return Err(Error::Degenerate(format!(
            "training FLOPs {total_train_flops} must be positive"
        )));
    }
    Ok(avg_accuracy / total_train_flops)
}

/// ROI relative to a baseline run.
pub fn normalized_roi(
    accuracy: f64,
    flops: f64,
    base_accuracy: f64,
    base_flops: f64,
) -> Result<f64> {
    let base = roi(base_accuracy, base_flops)?;
    if base == 0.0 {
        return Err(Error::Degenerate("baseline accuracy is zero".into()));
    }
    Ok(roi(accuracy, flops)? / base)
}

/// Every cost quantity for one layer shape, base against STEM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub hyper: ArchHyperparams,
    pub prefill_flops_base: u128,
    pub prefill_flops_stem: u128,
    pub prefill_flops_delta: u128,
    pub train_flops_base: u128,
    pub train_flops_stem: u128,
    pub train_flops_delta: u128,
    pub decode_elements_base: u128,
    pub decode_elements_stem: u128,
    pub decode_elements_delta: u128,
    pub bytes_per_element: u64,
    pub decode_param_bytes_base: u128,
    pub decode_param_bytes_stem: u128,
    pub comm_elements_prefill: u128,
    pub comm_elements_decode: u128,
    pub comm_elements_training: u128,
    pub saving_fraction: f64,
    pub train_saving_fraction: f64,
    pub decode_saving_fraction: f64,
}

impl CostReport {
    /// Without token ids the communication entries are the all-distinct upper
    /// bounds. With ids (`batch·seq_len`, row-major) decode uses the last
    /// token of each sequence.
    pub fn compute(
        h: ArchHyperparams,
        bytes_per_element: u64,
        tokens: Option<&[usize]>,
    ) -> Result<Self> {
        h.validate()?;
        let (pb, ps) = (
            prefill_flops(&h, CostVariant::Base),
            prefill_flops(&h, CostVariant::Stem),
        );
        let (tb, ts) = (
            train_flops(&h, CostVariant::Base),
            train_flops(&h, CostVariant::Stem),
        );
        let (mb, ms) = (
            decode_mem(&h, CostVariant::Base),
            decode_mem(&h, CostVariant::Stem),
        );
        let (d_ff, bl) = (h.d_ff as u128, (h.batch * h.seq_len) as u128);
        let (prefill, decode) = match tokens {
            Some(t) => {
                if t.len() as u128 != bl {
                    return Err(Error::shape(format!(
                        "{} token ids for batch·seq_len = {bl}",
                        t.len()
                    )));
                }
                let last: Vec<usize> = t
                    .chunks(h.seq_len as usize)
                    .map(|s| s[s.len() - 1])
                    .collect();
                (
                    comm_cost(Phase::Prefill, t, h.d_ff),
                    comm_cost(Phase::Decode, &last, h.d_ff),
                )
            }
            None => (bl * d_ff, h.batch as u128 * d_ff),
        };
        let bpe = bytes_per_element as u128;
        Ok(CostReport {
            hyper: h,
            prefill_flops_base: pb,
            prefill_flops_stem: ps,
            prefill_flops_delta: pb - ps,
            train_flops_base: tb,
            train_flops_stem: ts,
            train_flops_delta: tb - ts,
            decode_elements_base: mb,
            decode_elements_stem: ms,
            decode_elements_delta: mb - ms,
            bytes_per_element,
            decode_param_bytes_base: mb * bpe,
            decode_param_bytes_stem: ms * bpe,
            comm_elements_prefill: prefill,
            comm_elements_decode: decode,
            comm_elements_training: 2 * prefill,
            saving_fraction: saving_fraction(h.d as f64, h.d_ff as f64, h.seq_len as f64),
            train_saving_fraction: (tb - ts) as f64 / tb as f64,
            decode_saving_fraction: (mb - ms) as f64 / mb as f64,
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = String::from("metric,value\n");
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                match v {
                    serde_json::Value::Object(inner) => {
                        for (ik, iv) in inner {
                            out.push_str(&format!("{k}.{ik},{iv}\n"));
                        }
                    }
                    v => out.push_str(&format!("{k},{v}\n")),
                }
            }
        }
        out
    }
}

/// Operation counts of one instrumented forward pass, by scope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasuredFlops {
    pub scopes: BTreeMap<String, FlopTally>,
}

impl MeasuredFlops {
    fn scope(&self, name: &str) -> u64 {
        self.scopes.get(name).map_or(0, FlopTally::total)
    }

    pub fn ffn(&self, layer: usize) -> u64 {
        self.scope(&format!("layer.{layer}.ffn"))
    }

    pub fn attention(&self, layer: usize) -> u64 {
        self.scope(&format!("layer.{layer}.attn"))
    }

    pub fn head(&self) -> u64 {
        self.scope("head")
    }

    pub fn total(&self) -> u64 {
        self.scopes.values().map(FlopTally::total).sum()
    }
}

/// Counts the operations a forward pass over `batch` packed sequences of
/// length `seq` actually executes.
pub fn measured_flops(
    model: &Model,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<MeasuredFlops> {
    let mut tape = Tape::inference();
    model.forward_tape(&mut tape, tokens, batch, seq, &ForwardHooks::default())?;
    Ok(MeasuredFlops {
        scopes: tape.flops().clone(),
    })
}
