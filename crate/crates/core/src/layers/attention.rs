use rand::Rng;

use super::ffn::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

pub const ROPE_BASE: f64 = 10000.0;

/// Multi-head causal self-attention with rotary positions; all projections
/// are d×d and stored output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::config(format!(
                "{heads} heads must divide width {d} into even head widths"
            )));
        }
        Ok(AttentionParams {
            w_q: Tensor::randn_truncated(&[d, d], INIT_STD, rng),
            w_k: Tensor::randn_truncated(&[d, d], INIT_STD, rng),
            w_v: Tensor::randn_truncated(&[d, d], INIT_STD, rng),
            w_o: Tensor::randn_truncated(&[d, d], INIT_STD, rng),
            heads,
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }
}

impl ParamSet for AttentionParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("w_o".into(), &self.w_o),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("w_o".into(), &mut self.w_o),
        ]
    }
}

/// Attention over `batch` sequences of length `seq` packed as `batch·seq` rows.
pub fn causal_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if seq == 0 {
        return Err(Error::shape("attention over an empty sequence"));
    }
    let d = p.d();
    let shape = tape.value(x).shape().to_vec();
    if shape != [batch * seq, d] {
        return Err(Error::shape(format!(
            "attention input {shape:?} for batch {batch} × seq {seq} × width {d}"
        )));
    }
    let (wq, wk, wv, wo) = (
        tape.param(&p.w_q),
        tape.param(&p.w_k),
        tape.param(&p.w_v),
        tape.param(&p.w_o),
    );
    let q = tape.linear(x, wq)?;
    let k = tape.linear(x, wk)?;
    let v = tape.linear(x, wv)?;
    let q = tape.rope(q, seq, p.head_dim(), ROPE_BASE)?;
    let k = tape.rope(k, seq, p.head_dim(), ROPE_BASE)?;
    let o = tape.causal_attention(q, k, v, batch, seq, p.heads)?;
    tape.linear(o, wo)
}
