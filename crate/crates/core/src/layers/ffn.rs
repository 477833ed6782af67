//! The six feed-forward variants, each mapping `n×d` hidden rows to `n×d`
//! output rows given the token id at every row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hash::HashRouter;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Which feed-forward variant fills a layer slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Stem,
    StemGate,
    StemDagger,
    Moe,
    HashMoe,
}

impl FfnKind {
    /// Variants that read a token-indexed table.
    pub fn is_token_indexed(self) -> bool {
        matches!(
            self,
            FfnKind::Stem | FfnKind::StemGate | FfnKind::StemDagger
        )
    }
}

/// Gate, up and down projections stored output-major: `w_g`, `w_u` are
/// d_ff×d and `w_d` is d×d_ff.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluParams {
    pub w_g: Tensor,
    pub w_u: Tensor,
    pub w_d: Tensor,
}

impl SwiGluParams {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        SwiGluParams {
            w_g: Tensor::randn_truncated(&[d_ff, d], INIT_STD, rng),
            w_u: Tensor::randn_truncated(&[d_ff, d], INIT_STD, rng),
            w_d: Tensor::randn_truncated(&[d, d_ff], INIT_STD, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.w_g.shape()[1]
    }

    pub fn d_ff(&self) -> usize {
        self.w_g.shape()[0]
    }
}

/// Per-layer token-indexed table of shape V×d_ff.
#[derive(Debug, Clone, PartialEq)]
pub struct StemTable {
    pub u: Tensor,
    pub layer_index: usize,
}

impl StemTable {
    pub fn init<R: Rng + ?Sized>(
        vocab: usize,
        d_ff: usize,
        layer_index: usize,
        rng: &mut R,
    ) -> Self {
        StemTable {
            u: Tensor::randn_truncated(&[vocab, d_ff], INIT_STD, rng),
            layer_index,
        }
    }

    pub fn vocab(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        self.u.row(token)
    }
}

/// `y = W_d(SiLU(W_g x) ⊙ U[t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct StemParams {
    pub w_g: Tensor,
    pub w_d: Tensor,
    pub table: StemTable,
}

/// `y = W_d(SiLU(U[t]) ⊙ W_u x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StemGateParams {
    pub w_u: Tensor,
    pub w_d: Tensor,
    pub table: StemTable,
}

/// `y = W_d(SiLU(W_g x) ⊙ (W_u x + U[t]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct StemDaggerParams {
    pub ffn: SwiGluParams,
    pub table: StemTable,
}

/// Learned top-r routing over K SwiGLU experts; `router` is K×d.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<SwiGluParams>,
    pub router: Tensor,
    pub top_r: usize,
}

impl MoeParams {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        d_ff_e: usize,
        experts: usize,
        top_r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if top_r == 0 || top_r > experts {
            return Err(Error::config(format!(
                "top_r {top_r} with {experts} experts"
            )));
        }
        let router = Tensor::randn_truncated(&[experts, d], INIT_STD, rng);
        let experts = (0..experts)
            .map(|_| SwiGluParams::init(d, d_ff_e, rng))
            .collect();
        Ok(MoeParams {
            experts,
            router,
            top_r,
        })
    }
}

/// Weightless top-1 expert chosen by a fixed token-id mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct HashMoeParams {
    pub experts: Vec<SwiGluParams>,
    pub router: HashRouter,
}

/// Where a token-indexed variant reads its address rows from: `rows[i]` is the
/// row of `table` used at position `i`.
#[derive(Debug, Clone, Copy)]
pub struct Lookup<'a> {
    pub table: &'a Tensor,
    pub rows: &'a [usize],
}

fn check_width(tape: &Tape, x: Var, d: usize) -> Result<usize> {
    let t = tape.value(x);
    if t.rank() != 2 || t.cols() != d {
        return Err(Error::shape(format!(
            "ffn input {:?} does not have width {d}",
            t.shape()
        )));
    }
    Ok(t.shape()[0])
}

fn lookup_rows(tape: &mut Tape, lookup: Lookup<'_>, n: usize, d_ff: usize) -> Result<Var> {
    if lookup.rows.len() != n {
        return Err(Error::shape(format!(
            "{} lookup rows for {n} positions",
            lookup.rows.len()
        )));
    }
    if lookup.table.cols() != d_ff {
        return Err(Error::shape(format!(
            "table width {} differs from d_ff {d_ff}",
            lookup.table.cols()
        )));
    }
    let table = tape.param(lookup.table);
    tape.gather_rows(table, lookup.rows)
}

/// `W_d(SiLU(W_g x) ⊙ W_u x)`.
pub fn swiglu_forward(tape: &mut Tape, x: Var, p: &SwiGluParams) -> Result<Var> {
    check_width(tape, x, p.d())?;
    let (wg, wu, wd) = (tape.param(&p.w_g), tape.param(&p.w_u), tape.param(&p.w_d));
    let g = tape.linear(x, wg)?;
    let g = tape.silu(g);
    let u = tape.linear(x, wu)?;
    let h = tape.mul(g, u)?;
    tape.linear(h, wd)
}

pub fn stem_forward(tape: &mut Tape, x: Var, p: &StemParams, lookup: Lookup<'_>) -> Result<Var> {
    let n = check_width(tape, x, p.w_g.shape()[1])?;
    let (wg, wd) = (tape.param(&p.w_g), tape.param(&p.w_d));
    let g = tape.linear(x, wg)?;
    let g = tape.silu(g);
    let e = lookup_rows(tape, lookup, n, p.w_g.shape()[0])?;
    let h = tape.mul(g, e)?;
    tape.linear(h, wd)
}

pub fn stem_gate_forward(
    tape: &mut Tape,
    x: Var,
    p: &StemGateParams,
    lookup: Lookup<'_>,
) -> Result<Var> {
    let n = check_width(tape, x, p.w_u.shape()[1])?;
    let (wu, wd) = (tape.param(&p.w_u), tape.param(&p.w_d));
    let e = lookup_rows(tape, lookup, n, p.w_u.shape()[0])?;
    let g = tape.silu(e);
    let u = tape.linear(x, wu)?;
    let h = tape.mul(g, u)?;
    tape.linear(h, wd)
}

pub fn stem_dagger_forward(
    tape: &mut Tape,
    x: Var,
    p: &StemDaggerParams,
    lookup: Lookup<'_>,
) -> Result<Var> {
    let n = check_width(tape, x, p.ffn.d())?;
    let (wg, wu, wd) = (
        tape.param(&p.ffn.w_g),
        tape.param(&p.ffn.w_u),
        tape.param(&p.ffn.w_d),
    );
    let g = tape.linear(x, wg)?;
    let g = tape.silu(g);
    let u = tape.linear(x, wu)?;
    let e = lookup_rows(tape, lookup, n, p.ffn.d_ff())?;
    let a = tape.add(u, e)?;
    let h = tape.mul(g, a)?;
    tape.linear(h, wd)
}

/// Runs every expert on the rows assigned to it and scatters the (optionally
/// weighted) outputs back.
fn dispatch(
    tape: &mut Tape,
    x: Var,
    experts: &[SwiGluParams],
    assignment: &[Vec<usize>],
    weights: Option<Var>,
) -> Result<Var> {
    let (n, d) = (tape.value(x).shape()[0], tape.value(x).cols());
    let mut parts = Vec::new();
    for (k, rows) in assignment.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xs = tape.gather_rows(x, rows)?;
        let mut y = swiglu_forward(tape, xs, &experts[k])?;
        if let Some(w) = weights {
            let col = tape.select_col(w, k)?;
            let wk = tape.gather_rows(col, rows)?;
            y = tape.mul_col(y, wk)?;
        }
        parts.push((y, rows.clone()));
    }
    tape.index_add(n, d, parts)
}

/// Softmax router, top-r selection (lower index wins ties), weights
/// renormalised over the selected experts.
pub fn moe_forward(tape: &mut Tape, x: Var, p: &MoeParams) -> Result<Var> {
    let experts = p.experts.len();
    if experts == 0 || p.top_r == 0 || p.top_r > experts {
        return Err(Error::config(format!(
            "top_r {} with {} experts",
            p.top_r, experts
        )));
    }
    let n = check_width(tape, x, p.router.cols())?;
    let router = tape.param(&p.router);
    let logits = tape.linear(x, router)?;
    let weights = tape.top_k_softmax(logits, p.top_r)?;
    let mut assignment = vec![Vec::new(); experts];
    let lv = tape.value(logits);
    for i in 0..n {
        for k in crate::numerics::top_indices(lv.row(i), p.top_r) {
            assignment[k].push(i);
        }
    }
    dispatch(tape, x, &p.experts, &assignment, Some(weights))
}

pub fn hash_moe_forward(
    tape: &mut Tape,
    x: Var,
    tokens: &[usize],
    p: &HashMoeParams,
) -> Result<Var> {
    let d = p.experts.first().map(SwiGluParams::d).unwrap_or(0);
    let n = check_width(tape, x, d)?;
    if tokens.len() != n {
        return Err(Error::shape(format!(
            "{} tokens for {n} positions",
            tokens.len()
        )));
    }
    if p.experts.len() != p.router.experts() {
        return Err(Error::config("expert count differs from router"));
    }
    let mut assignment = vec![Vec::new(); p.experts.len()];
    for (i, &t) in tokens.iter().enumerate() {
        assignment[p.router.route(t)?].push(i);
    }
    dispatch(tape, x, &p.experts, &assignment, None)
}

/// Parameters of one FFN slot.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams {
    Dense(SwiGluParams),
    Stem(StemParams),
    StemGate(StemGateParams),
    StemDagger(StemDaggerParams),
    Moe(MoeParams),
    HashMoe(HashMoeParams),
}

impl FfnParams {
    pub fn kind(&self) -> FfnKind {
        match self {
            FfnParams::Dense(_) => FfnKind::Dense,
            FfnParams::Stem(_) => FfnKind::Stem,
            FfnParams::StemGate(_) => FfnKind::StemGate,
            FfnParams::StemDagger(_) => FfnKind::StemDagger,
            FfnParams::Moe(_) => FfnKind::Moe,
            FfnParams::HashMoe(_) => FfnKind::HashMoe,
        }
    }

    pub fn table(&self) -> Option<&StemTable> {
        match self {
            FfnParams::Stem(p) => Some(&p.table),
            FfnParams::StemGate(p) => Some(&p.table),
            FfnParams::StemDagger(p) => Some(&p.table),
            _ => None,
        }
    }

    pub fn table_mut(&mut self) -> Option<&mut StemTable> {
        match self {
            FfnParams::Stem(p) => Some(&mut p.table),
            FfnParams::StemGate(p) => Some(&mut p.table),
            FfnParams::StemDagger(p) => Some(&mut p.table),
            _ => None,
        }
    }

    /// Forward over `n` rows; `tokens[i]` is the input id at row `i`.
    /// Token-indexed variants read `lookup` when given, else their own table
    /// at the token ids.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        tokens: &[usize],
        lookup: Option<Lookup<'_>>,
    ) -> Result<Var> {
        let own = |table: &'_ StemTable| -> Result<()> {
            if let Some(&bad) = tokens.iter().find(|&&t| t >= table.vocab()) {
                return Err(Error::Index {
                    index: bad,
                    bound: table.vocab(),
                });
            }
            Ok(())
        };
        match self {
            FfnParams::Dense(p) => swiglu_forward(tape, x, p),
            FfnParams::Stem(p) => {
                own(&p.table)?;
                let lk = lookup.unwrap_or(Lookup {
                    table: &p.table.u,
                    rows: tokens,
                });
                stem_forward(tape, x, p, lk)
            }
            FfnParams::StemGate(p) => {
                own(&p.table)?;
                let lk = lookup.unwrap_or(Lookup {
                    table: &p.table.u,
                    rows: tokens,
                });
                stem_gate_forward(tape, x, p, lk)
            }
            FfnParams::StemDagger(p) => {
                own(&p.table)?;
                let lk = lookup.unwrap_or(Lookup {
                    table: &p.table.u,
                    rows: tokens,
                });
                stem_dagger_forward(tape, x, p, lk)
            }
            FfnParams::Moe(p) => moe_forward(tape, x, p),
            FfnParams::HashMoe(p) => hash_moe_forward(tape, x, tokens, p),
        }
    }
}

impl ParamSet for FfnParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        fn swiglu<'a>(prefix: &str, p: &'a SwiGluParams, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{prefix}w_g"), &p.w_g));
            out.push((format!("{prefix}w_u"), &p.w_u));
            out.push((format!("{prefix}w_d"), &p.w_d));
        }
        let mut out = Vec::new();
        match self {
            FfnParams::Dense(p) => swiglu("", p, &mut out),
            FfnParams::Stem(p) => {
                out.push(("w_g".into(), &p.w_g));
                out.push(("w_d".into(), &p.w_d));
                out.push(("table".into(), &p.table.u));
            }
            FfnParams::StemGate(p) => {
                out.push(("w_u".into(), &p.w_u));
                out.push(("w_d".into(), &p.w_d));
                out.push(("table".into(), &p.table.u));
            }
            FfnParams::StemDagger(p) => {
                swiglu("", &p.ffn, &mut out);
                out.push(("table".into(), &p.table.u));
            }
            FfnParams::Moe(p) => {
                out.push(("router".into(), &p.router));
                for (k, e) in p.experts.iter().enumerate() {
                    swiglu(&format!("experts.{k}."), e, &mut out);
                }
            }
            FfnParams::HashMoe(p) => {
                for (k, e) in p.experts.iter().enumerate() {
                    swiglu(&format!("experts.{k}."), e, &mut out);
                }
            }
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn swiglu<'a>(
            prefix: &str,
            p: &'a mut SwiGluParams,
            out: &mut Vec<(String, &'a mut Tensor)>,
        ) {
            out.push((format!("{prefix}w_g"), &mut p.w_g));
            out.push((format!("{prefix}w_u"), &mut p.w_u));
            out.push((format!("{prefix}w_d"), &mut p.w_d));
        }
        let mut out = Vec::new();
        match self {
            FfnParams::Dense(p) => swiglu("", p, &mut out),
            FfnParams::Stem(p) => {
                out.push(("w_g".into(), &mut p.w_g));
                out.push(("w_d".into(), &mut p.w_d));
                out.push(("table".into(), &mut p.table.u));
            }
            FfnParams::StemGate(p) => {
                out.push(("w_u".into(), &mut p.w_u));
                out.push(("w_d".into(), &mut p.w_d));
                out.push(("table".into(), &mut p.table.u));
            }
            FfnParams::StemDagger(p) => {
                swiglu("", &mut p.ffn, &mut out);
                out.push(("table".into(), &mut p.table.u));
            }
            FfnParams::Moe(p) => {
                out.push(("router".into(), &mut p.router));
                for (k, e) in p.experts.iter_mut().enumerate() {
                    swiglu(&format!("experts.{k}."), e, &mut out);
                }
            }
            FfnParams::HashMoe(p) => {
                for (k, e) in p.experts.iter_mut().enumerate() {
                    swiglu(&format!("experts.{k}."), e, &mut out);
                }
            }
        }
        out
    }
}

/// Evaluates a tape function on a plain input matrix without recording
/// gradients.
pub fn eval_rows(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Expert width that makes `experts` SwiGLU experts hold about
/// `target_params` weights (each expert has `3·d·d_ff_e`), at least 1.
pub fn moe_expert_width(target_params: usize, d: usize, experts: usize) -> usize {
    let per = 3.0 * d as f64 * experts as f64;
    ((target_params as f64 / per).round() as usize).max(1)
}
