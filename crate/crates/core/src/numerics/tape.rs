//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! needs for the backward rule. [`Tape::backward`] walks the list once in
//! reverse and leaves the accumulated gradient in each node's `grad` buffer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::kernels::{self, AttnDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation counts per scope, in multiply-accumulate units for matrix
/// products and one unit per element for gate products.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub matmul_macs: u64,
    pub attention_macs: u64,
    pub gate_elementwise: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.matmul_macs + self.attention_macs + self.gate_elementwise
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        row_broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        row_broadcast: bool,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    MulCol {
        a: Var,
        w: Var,
    },
    Silu {
        a: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    IndexAdd {
        parts: Vec<(Var, Vec<usize>)>,
    },
    SelectCol {
        a: Var,
        col: usize,
    },
    Softmax {
        a: Var,
    },
    RmsNorm {
        x: Var,
        scale: Var,
        inv_rms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Rope {
        a: Var,
        seq: usize,
        head_dim: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    track_grads: bool,
    scope: Option<String>,
    flops: BTreeMap<String, FlopTally>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
}

impl Tape {
    /// A tape whose [`Tape::param`] leaves are trainable.
    pub fn new() -> Self {
        Tape {
            track_grads: true,
            ..Default::default()
        }
    }

    /// A tape for pure evaluation: parameters enter as constants.
    pub fn inference() -> Self {
        Tape {
            track_grads: false,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter tensor, interning it by address so repeated uses
    /// share one leaf. The tensor must stay alive and unmoved while the tape is
    /// in use.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t.clone(), self.track_grads);
        self.params.insert(key, v);
        v
    }

    /// Leaf previously created for `t` by [`Tape::param`], if any.
    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.params.get(&(t as *const Tensor as usize)).copied()
    }

    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.param_var(t).and_then(|v| self.grad(v))
    }

    /// Attributes subsequent operation counts to `scope`.
    pub fn set_scope(&mut self, scope: Option<String>) {
        self.scope = scope;
    }

    pub fn flops(&self) -> &BTreeMap<String, FlopTally> {
        &self.flops
    }

    pub fn flops_in(&self, scope: &str) -> FlopTally {
        self.flops.get(scope).copied().unwrap_or_default()
    }

    fn tally(&mut self) -> &mut FlopTally {
        let key = self.scope.clone().unwrap_or_default();
        self.flops.entry(key).or_default()
    }

    /// Distinct rows of `table` read by gather operations so far.
    pub fn gathered_rows(&self, table: Var) -> BTreeSet<usize> {
        let mut rows = BTreeSet::new();
        for node in &self.nodes {
            if let Op::GatherRows { table: t, ids } = &node.op {
                if *t == table {
                    rows.extend(ids.iter().copied());
                }
            }
        }
        rows
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a · b` for a: m×k, b: k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for a: m×k, b: n×k, i.e. applying a linear map stored output-major.
    pub fn linear(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if transpose_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            transpose_b,
            &mut out,
            false,
        );
        self.tally().matmul_macs += (m * n * k) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, transpose_b },
            rg,
        ))
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(false);
        }
        let row_like = match tb.shape() {
            [n] => *n == ta.cols(),
            [1, n] => *n == ta.cols(),
            _ => false,
        };
        if ta.rank() == 2 && row_like {
            Ok(true)
        } else {
            Err(Error::shape(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let row_broadcast = self.broadcast_kind(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if row_broadcast {
            let n = ta.cols();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % n]))
                .collect()
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, row_broadcast))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, row_broadcast) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Add {
                a,
                b,
                row_broadcast,
            },
            rg,
        ))
    }

    /// Elementwise product; `b` may also be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, row_broadcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.tally().gate_elementwise += value.numel() as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Mul {
                a,
                b,
                row_broadcast,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Scales row `i` of `a` (n×d) by `w[i]` (w: n×1).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(a, "mul_col")?;
        let (wn, wc) = self.matrix_dims(w, "mul_col weights")?;
        if wn != n || wc != 1 {
            return Err(Error::shape(format!(
                "mul_col: weights {:?} do not match {:?}",
                self.value(w).shape(),
                self.value(a).shape()
            )));
        }
        let (ta, tw) = (self.value(a), self.value(w));
        let data = (0..n * d)
            .map(|i| ta.data()[i] * tw.data()[i / d])
            .collect();
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::MulCol { a, w }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kernels::silu(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Silu { a }, rg)
    }

    /// Row `i` of the result is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather_rows")?;
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `rows`×d zeros with each part's row `i` added into row `idx[i]`.
    pub fn index_add(
        &mut self,
        rows: usize,
        cols: usize,
        parts: Vec<(Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        let mut rg = false;
        for (part, idx) in &parts {
            let (pn, pc) = self.matrix_dims(*part, "index_add part")?;
            if pn != idx.len() || pc != cols {
                return Err(Error::shape(format!(
                    "index_add: part {:?} with {} indices into {}×{}",
                    self.value(*part).shape(),
                    idx.len(),
                    rows,
                    cols
                )));
            }
            let t = self.value(*part);
            for (i, &r) in idx.iter().enumerate() {
                if r >= rows {
                    return Err(Error::Index {
                        index: r,
                        bound: rows,
                    });
                }
                for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            rg |= self.rg(*part);
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::IndexAdd { parts },
            rg,
        ))
    }

    /// Column `col` of a matrix as an n×1 matrix.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims(a, "select_col")?;
        if col >= c {
            return Err(Error::Index {
                index: col,
                bound: c,
            });
        }
        let t = self.value(a);
        let data = (0..n).map(|i| t.at(i, col)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, 1], data)?, Op::SelectCol { a, col }, rg))
    }

    /// Row-wise softmax stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("softmax of an empty tensor"));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    /// Per row: keep the `r` largest entries (lower column wins ties), softmax
    /// over them, zero elsewhere.
    pub fn top_k_softmax(&mut self, a: Var, r: usize) -> Result<Var> {
        let (_, c) = self.matrix_dims(a, "top_k_softmax")?;
        if r == 0 || r > c {
            return Err(Error::config(format!("top-r of {r} over {c} columns")));
        }
        let t = self.value(a);
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(data.chunks_mut(c)) {
            let selected = top_indices(src, r);
            let max = selected
                .iter()
                .map(|&j| src[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &j in &selected {
                dst[j] = (src[j] - max).exp();
                denom += dst[j];
            }
            for &j in &selected {
                dst[j] /= denom;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        // the backward rule is the softmax rule restricted to non-zero outputs
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    /// Row-wise RMS normalisation with a learned per-column scale.
    pub fn rmsnorm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "rmsnorm")?;
        if n * d == 0 {
            return Err(Error::shape("rmsnorm of an empty tensor"));
        }
        if self.value(scale).numel() != d {
            return Err(Error::shape(format!(
                "rmsnorm scale {:?} for width {d}",
                self.value(scale).shape()
            )));
        }
        let (tx, ts) = (self.value(x), self.value(scale));
        let mut inv_rms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for row in tx.data().chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(ts.data()).map(|(v, s)| v * inv * s));
        }
        let value = Tensor::new(vec![n, d], data)?;
        check_finite(&value, "rmsnorm")?;
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(value, Op::RmsNorm { x, scale, inv_rms }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if n == 0 || v == 0 {
            return Err(Error::shape("cross_entropy of an empty batch"));
        }
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::Index { index: t, bound: v });
            }
            softmax_in_place(row);
            loss -= row[t].ln();
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross_entropy is not finite".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean { a }, rg))
    }

    /// Rotary position embedding over heads of width `head_dim`; row `r` sits at
    /// position `r % seq`.
    pub fn rope(&mut self, a: Var, seq: usize, head_dim: usize, base: f64) -> Result<Var> {
        let (_, w) = self.matrix_dims(a, "rope")?;
        if head_dim == 0 || head_dim % 2 != 0 || w % head_dim != 0 {
            return Err(Error::shape(format!(
                "rope: head_dim {head_dim} incompatible with width {w}"
            )));
        }
        let t = self.value(a);
        let data = kernels::rope_apply(t.data(), w, seq, head_dim, base, false);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Rope {
                a,
                seq,
                head_dim,
                base,
            },
            rg,
        ))
    }

    /// Causal multi-head softmax attention over packed `batch·seq` rows.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, w) = self.matrix_dims(q, "attention q")?;
        if heads == 0 || w % heads != 0 {
            return Err(Error::config(format!(
                "{heads} heads do not divide width {w}"
            )));
        }
        if n != batch * seq || self.value(k).shape() != [n, w] || self.value(v).shape() != [n, w] {
            return Err(Error::shape(format!(
                "attention: q {:?}, k {:?}, v {:?} for batch {batch} × seq {seq}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        let dims = AttnDims {
            batch,
            seq,
            heads,
            head_dim: w / heads,
        };
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        self.tally().attention_macs += (2 * batch * seq * seq * w) as u64;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![n, w], out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`, leaving gradients in every node
    /// that depends on a trainable leaf. Returns the number of operations
    /// visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match g {
                Some(g) if node.requires_grad => node.value.set_grad(g)?,
                _ => node.value.zero_grad(),
            }
        }
        Ok(visited)
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = out.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    // g: m×n; b: k×n (or n×k when transposed)
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g,
                        false,
                        val(*b).data(),
                        !transpose_b,
                        &mut ga,
                        false,
                    );
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *transpose_b {
                        kernels::gemm(n, m, k, g, true, val(*a).data(), false, &mut gb, false);
                    } else {
                        kernels::gemm(k, m, n, val(*a).data(), true, g, false, &mut gb, false);
                    }
                    acc(*b, gb);
                }
            }
            Op::Add {
                a,
                b,
                row_broadcast,
            } => {
                acc(*a, g.to_vec());
                if *row_broadcast {
                    acc(*b, column_sums(g, out.cols()));
                } else {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul {
                a,
                b,
                row_broadcast,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let n = out.cols();
                if *row_broadcast {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * tb.data()[i % n])
                        .collect();
                    acc(*a, ga);
                    let prod: Vec<f64> = g.iter().zip(ta.data()).map(|(gi, x)| gi * x).collect();
                    acc(*b, column_sums(&prod, n));
                } else {
                    acc(*a, g.iter().zip(tb.data()).map(|(gi, y)| gi * y).collect());
                    acc(*b, g.iter().zip(ta.data()).map(|(gi, x)| gi * x).collect());
                }
            }
            Op::Scale { a, factor } => acc(*a, g.iter().map(|gi| gi * factor).collect()),
            Op::MulCol { a, w } => {
                let (ta, tw) = (val(*a), val(*w));
                let d = ta.cols();
                acc(
                    *a,
                    g.iter()
                        .enumerate()
                        .map(|(i, gi)| gi * tw.data()[i / d])
                        .collect(),
                );
                let gw = g
                    .chunks(d)
                    .zip(ta.data().chunks(d))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                acc(*w, gw);
            }
            Op::Silu { a } => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| gi * kernels::silu_grad(x))
                    .collect();
                acc(*a, ga);
            }
            Op::GatherRows { table, ids } => {
                let t = val(*table);
                let d = t.cols();
                let mut gt = vec![0.0; t.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, x) in gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                    {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
            Op::IndexAdd { parts } => {
                let d = out.cols();
                for (part, idx) in parts {
                    let gp = idx
                        .iter()
                        .flat_map(|&r| g[r * d..(r + 1) * d].iter().copied())
                        .collect();
                    acc(*part, gp);
                }
            }
            Op::SelectCol { a, col } => {
                let t = val(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.numel()];
                for (i, gi) in g.iter().enumerate() {
                    ga[i * c + col] = *gi;
                }
                acc(*a, ga);
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let mut ga = vec![0.0; out.numel()];
                for ((y, gr), dst) in out.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (tx, ts) = (val(*x), val(*scale));
                let d = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                let mut gs = vec![0.0; d];
                for (r, inv) in inv_rms.iter().enumerate() {
                    let xr = tx.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        gs[j] += gr[j] * xhat;
                        dot += gr[j] * ts.data()[j] * xhat;
                    }
                    dot /= d as f64;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        gx[r * d + j] = inv * (gr[j] * ts.data()[j] - xhat * dot);
                    }
                }
                acc(*x, gx);
                acc(*scale, gs);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = val(*logits).cols();
                let n = targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * v + t] -= g[0] / n;
                }
                acc(*logits, gl);
            }
            Op::Sum { a } => acc(*a, vec![g[0]; val(*a).numel()]),
            Op::Mean { a } => {
                let n = val(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Rope {
                a,
                seq,
                head_dim,
                base,
            } => {
                let w = out.cols();
                acc(*a, kernels::rope_apply(g, w, *seq, *head_dim, *base, true));
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let (gq, gk, gv) = kernels::attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                    *dims,
                );
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
        }
    }
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for row in g.chunks(n) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

/// Indices of the `r` largest values, ties resolved towards the lower index.
pub(crate) fn top_indices(values: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(r);
    idx
}
