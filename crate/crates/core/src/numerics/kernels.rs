//! Raw buffer kernels behind the tape operations.
//!
//! Matrix products go through `matrixmultiply`; every output element is
//! accumulated in a fixed order that does not depend on the other rows in the
//! operand, so a row computed inside a large batch is bit-identical to the same
//! row computed alone.

/// `c = A·B` (or `c += A·B` when `accumulate`), with optional transposed storage.
///
/// `a` holds an m×k matrix (stored k×m when `a_t`), `b` a k×n matrix (stored
/// n×k when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Shape of a packed multi-head attention problem: rows are `batch·seq`
/// positions, columns are `heads·head_dim` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn prob_index(&self, b: usize, h: usize, i: usize, j: usize) -> usize {
        ((b * self.heads + h) * self.seq + i) * self.seq + j
    }
}

/// Causal softmax attention; returns the output and the probability tensor
/// (upper triangle left at zero).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>) {
    let w = dims.width();
    let dh = dims.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; dims.batch * dims.seq * w];
    let mut probs = vec![0.0; dims.batch * dims.heads * dims.seq * dims.seq];
    let mut scores = vec![0.0; dims.seq];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let col = h * dh;
            for i in 0..dims.seq {
                let qi = &q[(b * dims.seq + i) * w + col..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(b * dims.seq + j) * w + col..][..dh];
                    let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let oi = (b * dims.seq + i) * w + col;
                for j in 0..=i {
                    let p = scores[j] / denom;
                    probs[dims.prob_index(b, h, i, j)] = p;
                    let vj = &v[(b * dims.seq + j) * w + col..][..dh];
                    for (o, x) in out[oi..oi + dh].iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g_out: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = dims.width();
    let dh = dims.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = dims.batch * dims.seq * w;
    let (mut gq, mut gk, mut gv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut dp = vec![0.0; dims.seq];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let col = h * dh;
            for i in 0..dims.seq {
                let gi = (b * dims.seq + i) * w + col;
                let go = &g_out[gi..gi + dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = (b * dims.seq + j) * w + col;
                    let p = probs[dims.prob_index(b, h, i, j)];
                    let d: f64 = go.iter().zip(&v[vj..vj + dh]).map(|(x, y)| x * y).sum();
                    dp[j] = d;
                    dot += p * d;
                    for (g, x) in gv[vj..vj + dh].iter_mut().zip(go) {
                        *g += p * x;
                    }
                }
                for j in 0..=i {
                    let p = probs[dims.prob_index(b, h, i, j)];
                    let ds = p * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * dims.seq + j) * w + col;
                    for c in 0..dh {
                        gq[gi + c] += ds * k[kj + c];
                        gk[kj + c] += ds * q[gi + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Cos/sin table for rotary embeddings: `seq × head_dim/2` pairs.
pub(crate) fn rope_table(seq: usize, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    (cos, sin)
}

/// Rotates feature pairs of every head; `inverse` applies the transpose
/// rotation (used by the backward pass).
pub(crate) fn rope_apply(
    x: &[f64],
    width: usize,
    seq: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) -> Vec<f64> {
    let half = head_dim / 2;
    let heads = width / head_dim;
    let (cos, sin) = rope_table(seq, head_dim, base);
    let mut out = vec![0.0; x.len()];
    for (r, (src, dst)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let pos = r % seq;
        for h in 0..heads {
            for i in 0..half {
                let c = cos[pos * half + i];
                let s = if inverse {
                    -sin[pos * half + i]
                } else {
                    sin[pos * half + i]
                };
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (src[a], src[a + 1]);
                dst[a] = x0 * c - x1 * s;
                dst[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}
