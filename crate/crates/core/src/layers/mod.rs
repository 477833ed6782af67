//! Feed-forward variants and causal attention.

mod attention;
mod ffn;
mod hash;

pub use attention::{causal_attention, AttentionParams, ROPE_BASE};
pub(crate) use ffn::INIT_STD;
pub use ffn::{
    eval_rows, hash_moe_forward, moe_expert_width, moe_forward, stem_dagger_forward, stem_forward,
    stem_gate_forward, swiglu_forward, FfnKind, FfnParams, HashMoeParams, Lookup, MoeParams,
    StemDaggerParams, StemGateParams, StemParams, StemTable, SwiGluParams,
};
pub use hash::HashRouter;
