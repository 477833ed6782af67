//! Geometry of FFN address vectors (pairwise cosine distributions) and
//! Heaps-law growth of distinct tokens.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{eval_rows, FfnParams};
use crate::model::{ForwardHooks, Model};
use crate::numerics::{Tape, Tensor};

pub const COSINE_BINS: usize = 200;
pub const DEFAULT_SAMPLE_PAIRS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHistogram {
    pub label: String,
    /// `COSINE_BINS + 1` edges spanning [−1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub pairs: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    /// Rows dropped for having zero norm.
    pub zero_rows: usize,
}

impl CosineHistogram {
    /// `bin_left,bin_right,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{:?},{:?},{c}\n",
                self.edges[i],
                self.edges[i + 1]
            ));
        }
        out
    }
}

fn unit_rows(rows: &Tensor) -> (Vec<Vec<f64>>, usize) {
    let mut kept = Vec::new();
    let mut zero = 0;
    for i in 0..rows.rows() {
        let r = rows.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            kept.push(r.iter().map(|v| v / norm).collect());
        } else {
            zero += 1;
        }
    }
    (kept, zero)
}

/// Cosine similarities of distinct row pairs: every pair when there are at
/// most `sample_pairs` of them, otherwise `sample_pairs` pairs drawn with the
/// seed.
pub fn pairwise_cosine(
    rows: &Tensor,
    sample_pairs: usize,
    seed: u64,
    label: &str,
) -> Result<CosineHistogram> {
    if rows.rank() != 2 {
        return Err(Error::shape(format!(
            "expected a matrix, got {:?}",
            rows.shape()
        )));
    }
    let (unit, zero_rows) = unit_rows(rows);
    let n = unit.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "{n} nonzero rows of {}; need two",
            rows.rows()
        )));
    }
    let dot = |i: usize, j: usize| -> f64 {
        unit[i]
            .iter()
            .zip(&unit[j])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    };
    let all = n * (n - 1) / 2;
    let cosines: Vec<f64> = if all <= sample_pairs {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| dot(i, j))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sample_pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                dot(i, j)
            })
            .collect()
    };
    let edges: Vec<f64> = (0..=COSINE_BINS)
        .map(|b| -1.0 + 2.0 * b as f64 / COSINE_BINS as f64)
        .collect();
    let mut counts = vec![0u64; COSINE_BINS];
    for &c in &cosines {
        let b = (((c + 1.0) / 2.0) * COSINE_BINS as f64).floor() as usize;
        counts[b.min(COSINE_BINS - 1)] += 1;
    }
    let m = cosines.len() as f64;
    let mean = cosines.iter().sum::<f64>() / m;
    let std = (cosines.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / m).sqrt();
    let mean_abs = cosines.iter().map(|c| c.abs()).sum::<f64>() / m;
    Ok(CosineHistogram {
        label: label.to_string(),
        edges,
        counts,
        pairs: cosines.len(),
        mean,
        std,
        mean_abs,
        zero_rows,
    })
}

/// Which vector feeds the down projection's address slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddressKind {
    /// `W_u x`.
    UpOutput,
    /// `U[t]`.
    StemRow,
    /// The full down-projection input, gate included.
    Gated,
}

/// Per-position address vectors (`tokens.len() × d_ff`) of one layer for a
/// single sequence.
pub fn address_vectors(
    model: &Model,
    tokens: &[usize],
    layer: usize,
    kind: AddressKind,
) -> Result<Tensor> {
    let block = model.blocks.get(layer).ok_or(Error::Index {
        index: layer,
        bound: model.blocks.len(),
    })?;
    let mut tape = Tape::inference();
    let trace = model.forward_tape(&mut tape, tokens, 1, tokens.len(), &ForwardHooks::default())?;
    let x = tape.value(trace.ffn_inputs[layer]).clone();
    let rows =
        |table: &Tensor| -> Result<Tensor> { eval_rows(table, |t, u| t.gather_rows(u, tokens)) };
    let up = |w_u: &Tensor| -> Result<Tensor> {
        eval_rows(&x, |t, xv| {
            let w = t.constant(w_u.clone());
            t.linear(xv, w)
        })
    };
    let gate = |w_g: &Tensor| -> Result<Tensor> {
        eval_rows(&x, |t, xv| {
            let w = t.constant(w_g.clone());
            let g = t.linear(xv, w)?;
            Ok(t.silu(g))
        })
    };
    let times = |a: Tensor, b: Tensor| -> Result<Tensor> {
        let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    let plus = |a: Tensor, b: Tensor| -> Result<Tensor> {
        let data = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    let mismatch = || {
        Err(Error::config(format!(
            "layer {layer} ({:?}) has no {kind:?} address",
            block.ffn.kind()
        )))
    };
    match (&block.ffn, kind) {
        (FfnParams::Dense(p), AddressKind::UpOutput) => up(&p.w_u),
        (FfnParams::Dense(p), AddressKind::Gated) => times(gate(&p.w_g)?, up(&p.w_u)?),
        (FfnParams::Stem(p), AddressKind::StemRow) => rows(&p.table.u),
        (FfnParams::Stem(p), AddressKind::Gated) => times(gate(&p.w_g)?, rows(&p.table.u)?),
        (FfnParams::StemGate(p), AddressKind::UpOutput) => up(&p.w_u),
        (FfnParams::StemGate(p), AddressKind::StemRow) => rows(&p.table.u),
        (FfnParams::StemGate(p), AddressKind::Gated) => {
            let g = eval_rows(&p.table.u, |t, u| {
                let r = t.gather_rows(u, tokens)?;
                Ok(t.silu(r))
            })?;
            times(g, up(&p.w_u)?)
        }
        (FfnParams::StemDagger(p), AddressKind::UpOutput) => up(&p.ffn.w_u),
        (FfnParams::StemDagger(p), AddressKind::StemRow) => rows(&p.table.u),
        (FfnParams::StemDagger(p), AddressKind::Gated) => {
            times(gate(&p.ffn.w_g)?, plus(up(&p.ffn.w_u)?, rows(&p.table.u)?)?)
        }
        _ => mismatch(),
    }
}

/// Occurrences of each id in `0..vocab`.
pub fn token_counts(stream: &[usize], vocab: usize) -> Vec<usize> {
    let mut counts = vec![0; vocab];
    for &t in stream {
        if t < vocab {
            counts[t] += 1;
        }
    }
    counts
}

/// Rows `ids` of a matrix.
pub fn select_rows(m: &Tensor, ids: &[usize]) -> Result<Tensor> {
    eval_rows(m, |t, v| t.gather_rows(v, ids))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeapsFit {
    pub k: f64,
    pub beta: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Least-squares fit of `log uniq = log k + β log L`.
pub fn heaps_fit(lengths: &[f64], uniq_counts: &[f64]) -> Result<HeapsFit> {
    if lengths.len() != uniq_counts.len() {
        return Err(Error::shape(format!(
            "{} lengths vs {} counts",
            lengths.len(),
            uniq_counts.len()
        )));
    }
    if lengths.len() < 3 {
        return Err(Error::Degenerate(format!(
            "{} points; need at least 3",
            lengths.len()
        )));
    }
    if lengths
        .iter()
        .chain(uniq_counts)
        .any(|v| !(*v > 0.0 && v.is_finite()))
    {
        return Err(Error::Degenerate(
            "lengths and counts must be positive".into(),
        ));
    }
    let xs: Vec<f64> = lengths.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = uniq_counts.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-12 * n {
        return Err(Error::Degenerate("all lengths are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let beta = sxy / sxx;
    let log_k = my - beta * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - log_k - beta * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(HeapsFit {
        k: log_k.exp(),
        beta,
        residual,
    })
}

/// Distinct ids among the first `L` tokens, for each requested `L`.
pub fn unique_growth(stream: &[usize], lengths: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut pos = 0;
    let mut sorted: Vec<(usize, usize)> = lengths
        .iter()
        .copied()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    sorted.sort();
    let mut result = vec![0; lengths.len()];
    for (l, i) in sorted {
        while pos < l.min(stream.len()) {
            seen.insert(stream[pos]);
            pos += 1;
        }
        result[i] = seen.len();
    }
    result
}
