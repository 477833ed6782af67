//! Discrete-event model of STEM tables kept on a slow host tier: per-layer
//! prefetch during prefill, exposed fetches during decode, batch
//! deduplication and an LFU row cache keyed by (token, layer).
//!
//! Time is in abstract units: a transfer of `n > 0` elements costs
//! `host_latency + n / host_bandwidth`.

mod cache;

use serde::{Deserialize, Serialize};

pub use crate::data::zipf_stream;
pub use cache::{dedup, Access, LfuCache};

use crate::error::{Error, Result};
use crate::layers::FfnKind;
use crate::model::ModelConfig;

/// Share of a trace treated as cache warm-up.
pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierModel {
    pub host_latency: f64,
    /// Elements per time unit.
    pub host_bandwidth: f64,
    pub layer_compute_time: f64,
}

impl TierModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("host_latency", self.host_latency),
            ("host_bandwidth", self.host_bandwidth),
            ("layer_compute_time", self.layer_compute_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tier.{name}: {v} is not positive")));
            }
        }
        Ok(())
    }

    pub fn transfer_time(&self, elements: u64) -> f64 {
        if elements == 0 {
            0.0
        } else {
            self.host_latency + elements as f64 / self.host_bandwidth
        }
    }
}

/// Cache key: token id and layer index.
pub type RowKey = (usize, usize);

/// One layer (prefill) or one token (decode) of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    pub step: usize,
    pub hits: u64,
    pub misses: u64,
    pub transfer_time: f64,
    pub stall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    /// Hit rate over the steps after the first [`WARMUP_FRACTION`].
    pub steady_hit_rate: f64,
    pub elements_transferred: u64,
    pub transfer_time: f64,
    pub compute_time: f64,
    pub total_time: f64,
    pub stall_time: f64,
    /// Share of transfer time hidden behind compute (1 when nothing moved).
    pub overlap_fraction: f64,
    pub steps: Vec<SimStep>,
}

impl SimReport {
    fn build(
        steps: Vec<SimStep>,
        d_ff: usize,
        compute_time: f64,
        total_time: f64,
        stall_time: f64,
    ) -> Self {
        let hits: u64 = steps.iter().map(|s| s.hits).sum();
        let misses: u64 = steps.iter().map(|s| s.misses).sum();
        let rate = |h: u64, m: u64| {
            if h + m == 0 {
                1.0
            } else {
                h as f64 / (h + m) as f64
            }
        };
        let skip = (steps.len() as f64 * WARMUP_FRACTION).floor() as usize;
        let (sh, sm) = steps[skip..]
            .iter()
            .fold((0, 0), |(h, m), s| (h + s.hits, m + s.misses));
        let transfer_time: f64 = steps.iter().map(|s| s.transfer_time).sum();
        SimReport {
            hits,
            misses,
            hit_rate: rate(hits, misses),
            steady_hit_rate: rate(sh, sm),
            elements_transferred: misses * d_ff as u64,
            transfer_time,
            compute_time,
            total_time,
            stall_time,
            overlap_fraction: if transfer_time > 0.0 {
                (1.0 - stall_time / transfer_time).clamp(0.0, 1.0)
            } else {
                1.0
            },
            steps,
        }
    }

    /// `step,hits,misses,transfer_time,stall_time` rows.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,hits,misses,transfer_time,stall_time\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{:?},{:?}\n",
                s.step, s.hits, s.misses, s.transfer_time, s.stall_time
            ));
        }
        out
    }
}

/// Resolves the distinct ids of `ids` at `layer` against the cache.
fn resolve(cache: &mut LfuCache<RowKey>, ids: &[usize], layer: usize) -> (u64, u64) {
    let (unique, _) = dedup(ids);
    let mut hits = 0;
    for &t in &unique {
        if cache.lookup((t, layer)) == Access::Hit {
            hits += 1;
        }
    }
    (hits, unique.len() as u64 - hits)
}

/// One prefill pass over a batch (ids of all sequences, flattened) through a
/// model whose layer `l` holds a table when `stem[l]`. The table rows for a
/// layer are fetched while the previous layer computes; the first layer's
/// fetch has nothing to hide behind.
pub fn simulate_prefill(
    ids: &[usize],
    cache: &mut LfuCache<RowKey>,
    tier: &TierModel,
    stem: &[bool],
    d_ff: usize,
) -> Result<SimReport> {
    tier.validate()?;
    let c = tier.layer_compute_time;
    let mut steps = Vec::new();
    let mut link_free = 0.0f64;
    let mut prev_compute_start = 0.0f64;
    let mut compute_end = 0.0f64;
    for (l, &has_table) in stem.iter().enumerate() {
        let mut ready = 0.0f64;
        if has_table {
            let (hits, misses) = resolve(cache, ids, l);
            let t = tier.transfer_time(misses * d_ff as u64);
            let start = link_free.max(prev_compute_start);
            ready = start + t;
            if t > 0.0 {
                link_free = ready;
            }
            steps.push(SimStep {
                step: l,
                hits,
                misses,
                transfer_time: t,
                stall_time: (ready - compute_end).max(0.0),
            });
        }
        let start = compute_end.max(ready);
        prev_compute_start = start;
        compute_end = start + c;
    }
    let compute = c * stem.len() as f64;
    Ok(SimReport::build(
        steps,
        d_ff,
        compute,
        compute_end,
        (compute_end - compute).max(0.0),
    ))
}

/// Token-by-token decode: each step's rows for every table layer are
/// resolved once the previous forward has finished, so the fetch is fully
/// exposed before the step's `layers` layers compute.
pub fn simulate_decode(
    stream: &[usize],
    cache: &mut LfuCache<RowKey>,
    tier: &TierModel,
    stem_layers: &[usize],
    layers: usize,
    d_ff: usize,
) -> Result<SimReport> {
    tier.validate()?;
    if let Some(&bad) = stem_layers.iter().find(|&&l| l >= layers) {
        return Err(Error::config(format!(
            "table layer {bad} outside 0..{layers}"
        )));
    }
    let step_compute = tier.layer_compute_time * layers as f64;
    let mut steps = Vec::with_capacity(stream.len());
    let (mut total, mut stall) = (0.0, 0.0);
    for (i, &t) in stream.iter().enumerate() {
        let (mut hits, mut misses) = (0, 0);
        for &l in stem_layers {
            match cache.lookup((t, l)) {
                Access::Hit => hits += 1,
                Access::Miss => misses += 1,
            }
        }
        let fetch = tier.transfer_time(misses * d_ff as u64);
        total += fetch + step_compute;
        stall += fetch;
        steps.push(SimStep {
            step: i,
            hits,
            misses,
            transfer_time: fetch,
            stall_time: fetch,
        });
    }
    Ok(SimReport::build(
        steps,
        d_ff,
        step_compute * stream.len() as f64,
        total,
        stall,
    ))
}

/// Fast-tier versus host-tier memory of a model's FFN slots, in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMemory {
    /// FFN projection bytes of the same model with every slot dense.
    pub dense_ffn_bytes: u64,
    /// FFN projection bytes still on the fast tier.
    pub resident_ffn_bytes: u64,
    pub cache_bytes: u64,
    /// Table bytes on the host tier.
    pub offloaded_bytes: u64,
    /// Share of dense FFN projection memory no longer resident.
    pub fraction_freed: f64,
}

/// Memory accounting with every table offloaded and a cache of `cache_rows`
/// rows kept resident. Only STEM and gate-table slots drop a projection.
pub fn table_memory_freed(
    config: &ModelConfig,
    cache_rows: usize,
    bytes_per_element: u64,
) -> TableMemory {
    let dd = (config.d * config.d_ff) as u64;
    let dense = 3 * dd * config.layers as u64;
    let replaced = config
        .variants
        .iter()
        .filter(|v| matches!(v, FfnKind::Stem | FfnKind::StemGate))
        .count() as u64;
    let tables = config.stem_layers().len() as u64;
    TableMemory {
        dense_ffn_bytes: dense * bytes_per_element,
        resident_ffn_bytes: (dense - replaced * dd) * bytes_per_element,
        cache_bytes: (cache_rows * config.d_ff) as u64 * bytes_per_element,
        offloaded_bytes: tables * (config.vocab * config.d_ff) as u64 * bytes_per_element,
        fraction_freed: (replaced * dd) as f64 / dense as f64,
    }
}

/// `Σ_{r≤k} r^(−s) / Σ_{r≤V} r^(−s)`: the hit rate of a cache that holds
/// exactly the `k` most frequent ids of a Zipf source.
pub fn zipf_head_mass(vocab: usize, s: f64, k: usize) -> Result<f64> {
    Ok(crate::data::Zipf::new(vocab, s)?.head_mass(k))
}
