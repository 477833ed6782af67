//! Tape-free reference implementations shared by unit tests.

use crate::layers::*;
use crate::numerics::Tensor;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.shape()[0])
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn oracle_swiglu(x: &[f64], p: &SwiGluParams) -> Vec<f64> {
    let g = matvec(&p.w_g, x);
    let u = matvec(&p.w_u, x);
    let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
    matvec(&p.w_d, &h)
}

pub fn oracle_stem(x: &[f64], t: usize, p: &StemParams) -> Vec<f64> {
    let g = matvec(&p.w_g, x);
    let h: Vec<f64> = g
        .iter()
        .zip(p.table.row(t))
        .map(|(a, b)| silu(*a) * b)
        .collect();
    matvec(&p.w_d, &h)
}

pub fn oracle_stem_gate(x: &[f64], t: usize, p: &StemGateParams) -> Vec<f64> {
    let u = matvec(&p.w_u, x);
    let h: Vec<f64> = p
        .table
        .row(t)
        .iter()
        .zip(&u)
        .map(|(a, b)| silu(*a) * b)
        .collect();
    matvec(&p.w_d, &h)
}

pub fn oracle_stem_dagger(x: &[f64], t: usize, p: &StemDaggerParams) -> Vec<f64> {
    let g = matvec(&p.ffn.w_g, x);
    let u = matvec(&p.ffn.w_u, x);
    let h: Vec<f64> = (0..g.len())
        .map(|i| silu(g[i]) * (u[i] + p.table.row(t)[i]))
        .collect();
    matvec(&p.ffn.w_d, &h)
}

/// Evaluates every expert, then applies the selection rule.
pub fn oracle_moe(x: &[f64], p: &MoeParams) -> Vec<f64> {
    let logits = matvec(&p.router, x);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let chosen = &order[..p.top_r];
    let norm: f64 = chosen.iter().map(|&k| probs[k]).sum();
    let outs: Vec<Vec<f64>> = p.experts.iter().map(|e| oracle_swiglu(x, e)).collect();
    let mut y = vec![0.0; x.len()];
    for &k in chosen {
        for (yi, oi) in y.iter_mut().zip(&outs[k]) {
            *yi += probs[k] / norm * oi;
        }
    }
    y
}

/// Plain-loop multi-head causal attention with its own rotary rotation.
pub fn oracle_attention(x: &Tensor, p: &AttentionParams) -> Vec<Vec<f64>> {
    let l = x.shape()[0];
    let d = p.d();
    let dh = p.head_dim();
    let rot = |v: &[f64], pos: usize| -> Vec<f64> {
        let mut out = v.to_vec();
        for h in 0..p.heads {
            for i in 0..dh / 2 {
                let theta = pos as f64 / ROPE_BASE.powf(2.0 * i as f64 / dh as f64);
                let (a, b) = (v[h * dh + 2 * i], v[h * dh + 2 * i + 1]);
                out[h * dh + 2 * i] = a * theta.cos() - b * theta.sin();
                out[h * dh + 2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
        out
    };
    let q: Vec<Vec<f64>> = (0..l).map(|i| rot(&matvec(&p.w_q, x.row(i)), i)).collect();
    let k: Vec<Vec<f64>> = (0..l).map(|i| rot(&matvec(&p.w_k, x.row(i)), i)).collect();
    let v: Vec<Vec<f64>> = (0..l).map(|i| matvec(&p.w_v, x.row(i))).collect();
    let mut out = Vec::new();
    for i in 0..l {
        let mut o = vec![0.0; d];
        for h in 0..p.heads {
            let r = h * dh..(h + 1) * dh;
            let s: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i][r.clone()]
                        .iter()
                        .zip(&k[j][r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for j in 0..=i {
                let w = (s[j] - m).exp() / z;
                for c in r.clone() {
                    o[c] += w * v[j][c];
                }
            }
        }
        out.push(matvec(&p.w_o, &o));
    }
    out
}

pub fn oracle_rmsnorm(x: &[f64], scale: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

pub fn oracle_ffn(x: &[f64], t: usize, p: &FfnParams) -> Vec<f64> {
    match p {
        FfnParams::Dense(q) => oracle_swiglu(x, q),
        FfnParams::Stem(q) => oracle_stem(x, t, q),
        FfnParams::StemGate(q) => oracle_stem_gate(x, t, q),
        FfnParams::StemDagger(q) => oracle_stem_dagger(x, t, q),
        FfnParams::Moe(q) => oracle_moe(x, q),
        FfnParams::HashMoe(q) => oracle_swiglu(x, &q.experts[q.router.route(t).unwrap()]),
    }
}

/// Layer-by-layer composition of the decoder for one sequence.
pub fn oracle_model(model: &crate::model::Model, tokens: &[usize]) -> Vec<Vec<f64>> {
    let eps = model.config().norm_eps;
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| model.embed.row(t).to_vec())
        .collect();
    for b in &model.blocks {
        let normed: Vec<Vec<f64>> = h
            .iter()
            .map(|r| oracle_rmsnorm(r, b.attn_norm.data(), eps))
            .collect();
        let a = oracle_attention(&Tensor::from_rows(&normed).unwrap(), &b.attn);
        for (hr, ar) in h.iter_mut().zip(&a) {
            hr.iter_mut().zip(ar).for_each(|(x, y)| *x += y);
        }
        for (i, hr) in h.iter_mut().enumerate() {
            let f = oracle_ffn(
                &oracle_rmsnorm(hr, b.ffn_norm.data(), eps),
                tokens[i],
                &b.ffn,
            );
            hr.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
        }
    }
    h.iter()
        .map(|r| {
            matvec(
                model.head(),
                &oracle_rmsnorm(r, model.final_norm.data(), eps),
            )
        })
        .collect()
}
