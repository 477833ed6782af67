use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{moe_expert_width, FfnKind};

/// Which layers receive the sparse variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    /// Every k-th layer with `k = round(1/p)`, starting at layer `k − 1`.
    Ratio(f64),
    /// All layers but layer 0.
    FullExceptFirst,
    Explicit(BTreeSet<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub kind: PlacementKind,
    pub variant: FfnKind,
}

impl PlacementPolicy {
    pub fn new(kind: PlacementKind, variant: FfnKind) -> Self {
        PlacementPolicy { kind, variant }
    }

    pub fn ratio(p: f64, variant: FfnKind) -> Self {
        Self::new(PlacementKind::Ratio(p), variant)
    }
}

/// The selected layer set for `n` layers.
pub fn select_placement(n: usize, kind: &PlacementKind) -> Result<BTreeSet<usize>> {
    if n == 0 {
        return Err(Error::config("placement over zero layers"));
    }
    let set: BTreeSet<usize> = match kind {
        PlacementKind::Ratio(p) => {
            if !(p.is_finite() && *p > 0.0 && *p <= 1.0) {
                return Err(Error::config(format!("placement ratio {p} outside (0, 1]")));
            }
            let k = (1.0 / p).round() as usize;
            (1..).map(|i| i * k - 1).take_while(|&l| l < n).collect()
        }
        PlacementKind::FullExceptFirst => (1..n).collect(),
        PlacementKind::Explicit(s) => {
            if let Some(&bad) = s.iter().find(|&&l| l >= n) {
                return Err(Error::config(format!(
                    "placement layer {bad} outside 0..{n}"
                )));
            }
            s.clone()
        }
    };
    if set.is_empty() {
        return Err(Error::config(format!(
            "placement {kind:?} selects no layer of {n}"
        )));
    }
    Ok(set)
}

/// Expert settings used by `Moe` and `HashMoe` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_r: usize,
    /// Expert width; when absent it is chosen so one sparse layer holds as many
    /// weights as a STEM layer of the same model.
    #[serde(default)]
    pub expert_width: Option<usize>,
    #[serde(default)]
    pub hash_seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            experts: 4,
            top_r: 1,
            expert_width: None,
            hash_seed: 0,
        }
    }
}

fn default_norm_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub heads: usize,
    pub max_len: usize,
    pub variants: Vec<FfnKind>,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub moe: MoeConfig,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// All-dense configuration.
    pub fn dense(
        layers: usize,
        d: usize,
        d_ff: usize,
        vocab: usize,
        heads: usize,
        max_len: usize,
    ) -> Self {
        ModelConfig {
            layers,
            d,
            d_ff,
            vocab,
            heads,
            max_len,
            variants: vec![FfnKind::Dense; layers],
            tie_embeddings: false,
            moe: MoeConfig::default(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Dense configuration with the placement's layers switched to its variant.
    pub fn with_placement(mut self, policy: &PlacementPolicy) -> Result<Self> {
        for l in select_placement(self.layers, &policy.kind)? {
            self.variants[l] = policy.variant;
        }
        Ok(self)
    }

    /// The placement set: layers whose slot is not dense.
    pub fn sparse_layers(&self) -> BTreeSet<usize> {
        (0..self.variants.len())
            .filter(|&l| self.variants[l] != FfnKind::Dense)
            .collect()
    }

    /// Layers holding a token-indexed table.
    pub fn stem_layers(&self) -> BTreeSet<usize> {
        (0..self.variants.len())
            .filter(|&l| self.variants[l].is_token_indexed())
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn expert_width(&self) -> usize {
        self.moe.expert_width.unwrap_or_else(|| {
            let stem_layer = self.vocab * self.d_ff + 2 * self.d * self.d_ff;
            moe_expert_width(stem_layer, self.d, self.moe.experts.max(1))
        })
    }

    /// Checks every invariant, reporting the offending field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.layers == 0 {
            return fail("layers", "must be at least 1".into());
        }
        if self.d == 0 || self.d_ff == 0 {
            return fail(
                "d",
                format!("widths must be positive (d={}, d_ff={})", self.d, self.d_ff),
            );
        }
        if self.vocab < 2 {
            return fail("vocab", format!("{} < 2", self.vocab));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(
                "heads",
                format!("{} does not divide d={}", self.heads, self.d),
            );
        }
        if self.head_dim() % 2 != 0 {
            return fail("heads", format!("head width {} is odd", self.head_dim()));
        }
        if self.max_len == 0 {
            return fail("max_len", "must be positive".into());
        }
        if self.variants.len() != self.layers {
            return fail(
                "variants",
                format!("{} entries for {} layers", self.variants.len(), self.layers),
            );
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return fail("norm_eps", format!("{} is not positive", self.norm_eps));
        }
        let uses_experts = self
            .variants
            .iter()
            .any(|v| matches!(v, FfnKind::Moe | FfnKind::HashMoe));
        if uses_experts {
            let m = &self.moe;
            if m.experts == 0 {
                return fail("moe.experts", "must be at least 1".into());
            }
            if m.top_r == 0 || m.top_r > m.experts {
                return fail("moe.top_r", format!("{} not in 1..={}", m.top_r, m.experts));
            }
            if m.experts > self.vocab && self.variants.contains(&FfnKind::HashMoe) {
                return fail(
                    "moe.experts",
                    format!("{} experts exceed vocabulary {}", m.experts, self.vocab),
                );
            }
            if m.expert_width == Some(0) {
                return fail("moe.expert_width", "must be positive".into());
            }
        }
        Ok(())
    }
}
