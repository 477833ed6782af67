//! Knowledge editing on STEM tables: position-level replacement of the rows a
//! prompt looks up, realised as a per-prompt row override that leaves the
//! model untouched, plus an index-remap executor that must agree with it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::layers::Lookup;
use crate::model::{ForwardHooks, Model};
use crate::numerics::{softmax, Tensor};

/// How `n_s` source tokens are mapped onto `n_t` target tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `n_s = n_t`; position i takes target i.
    EqualSwap,
    /// `n_s > n_t`; pad rows first, then the targets.
    PadLeft,
    /// `n_s > n_t`; the targets, then pad rows.
    PadRight,
    /// `n_s > n_t`; each target repeated `⌊n_s/n_t⌋` times, the last one
    /// extended to fill.
    Copy,
    /// `n_s < n_t`; the chosen target indices in target order. `None` keeps
    /// the last `n_s` targets.
    Subset(Option<Vec<usize>>),
    /// Every position takes the mean of all target rows.
    Average,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::EqualSwap => "equal_swap",
            Scheme::PadLeft => "pad_left",
            Scheme::PadRight => "pad_right",
            Scheme::Copy => "copy",
            Scheme::Subset(_) => "subset",
            Scheme::Average => "average",
        }
    }
}

/// What one source position looks up instead of its own row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    /// The row of another token, in every edited layer.
    UseRowOf(usize),
    /// The mean of several tokens' rows, per layer.
    MeanOf(Vec<usize>),
    /// Explicit vectors, one per edited layer in ascending layer order.
    UseVectors(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub scheme: String,
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// One per source token, in order.
    pub directives: Vec<Directive>,
}

impl EditPlan {
    /// A plan with no directives.
    pub fn empty() -> Self {
        EditPlan {
            scheme: "empty".into(),
            source_ids: Vec::new(),
            target_ids: Vec::new(),
            directives: Vec::new(),
        }
    }
}

/// Builds the per-position directives for replacing `source_ids` by
/// `target_ids`.
pub fn plan_edit(source_ids: &[usize], target_ids: &[usize], scheme: &Scheme) -> Result<EditPlan> {
    let (ns, nt) = (source_ids.len(), target_ids.len());
    let mismatch = |why: &str| {
        Err(Error::Scheme(format!(
            "{}: {why} (n_s={ns}, n_t={nt})",
            scheme.label()
        )))
    };
    if nt == 0 {
        return mismatch("no target tokens");
    }
    let rows = |ids: Vec<usize>| ids.into_iter().map(Directive::UseRowOf).collect::<Vec<_>>();
    let directives = match scheme {
        Scheme::EqualSwap => {
            if ns != nt {
                return mismatch("needs n_s = n_t");
            }
            rows(target_ids.to_vec())
        }
        Scheme::PadLeft | Scheme::PadRight => {
            if ns <= nt {
                return mismatch("needs n_s > n_t");
            }
            let pads = vec![PAD_ID; ns - nt];
            rows(if *scheme == Scheme::PadLeft {
                [pads, target_ids.to_vec()].concat()
            } else {
                [target_ids.to_vec(), pads].concat()
            })
        }
        Scheme::Copy => {
            if ns <= nt {
                return mismatch("needs n_s > n_t");
            }
            let q = ns / nt;
            let mut ids: Vec<usize> = target_ids
                .iter()
                .flat_map(|&t| std::iter::repeat_n(t, q))
                .collect();
            ids.resize(ns, target_ids[nt - 1]);
            rows(ids)
        }
        Scheme::Subset(chosen) => {
            if ns >= nt {
                return mismatch("needs n_s < n_t");
            }
            let mut idx = chosen.clone().unwrap_or_else(|| (nt - ns..nt).collect());
            idx.sort_unstable();
            let distinct = idx.windows(2).all(|w| w[0] != w[1]);
            if idx.len() != ns || !distinct || idx.iter().any(|&i| i >= nt) {
                return mismatch(&format!(
                    "subset {idx:?} must be {ns} distinct indices below {nt}"
                ));
            }
            rows(idx.into_iter().map(|i| target_ids[i]).collect())
        }
        Scheme::Average => vec![Directive::MeanOf(target_ids.to_vec()); ns],
    };
    Ok(EditPlan {
        scheme: scheme.label().into(),
        source_ids: source_ids.to_vec(),
        target_ids: target_ids.to_vec(),
        directives,
    })
}

/// A prompt-bound view of a model whose table lookups at some positions are
/// overridden. The base model is borrowed and never modified.
#[derive(Debug, Clone)]
pub struct EditedModel<'m> {
    base: &'m Model,
    prompt: Vec<usize>,
    /// Per layer: one row per prompt position, or `None` when not edited.
    overrides: Vec<Option<Tensor>>,
    /// (position, directive) applied.
    edits: Vec<(usize, Directive)>,
    positions: Vec<usize>,
}

impl<'m> EditedModel<'m> {
    pub fn base(&self) -> &'m Model {
        self.base
    }

    pub fn prompt(&self) -> &[usize] {
        &self.prompt
    }

    /// Logits over the bound prompt.
    pub fn forward(&self) -> Result<Tensor> {
        let rows = self.positions.as_slice();
        let hooks = ForwardHooks {
            lookups: self
                .overrides
                .iter()
                .map(|o| o.as_ref().map(|table| Lookup { table, rows }))
                .collect(),
        };
        self.base.forward_with(&self.prompt, &hooks)
    }

    /// A standalone model with the edits written into the source tokens'
    /// rows. Every edited token must receive a single consistent row.
    pub fn materialize(&self) -> Result<Model> {
        let mut model = self.base.clone();
        for (l, o) in self.overrides.iter().enumerate() {
            let Some(rows) = o else { continue };
            let mut written: BTreeMap<usize, &[f64]> = BTreeMap::new();
            for (p, _) in &self.edits {
                let token = self.prompt[*p];
                let row = rows.row(*p);
                if let Some(prev) = written.insert(token, row) {
                    if prev != row {
                        return Err(Error::Scheme(format!(
                            "token {token} receives different rows at layer {l}"
                        )));
                    }
                }
            }
            let table = model.table_mut(l).expect("edited layer holds a table");
            for (token, row) in written {
                table.u.row_mut(token).copy_from_slice(row);
            }
        }
        Ok(model)
    }
}

/// Applies `plan` to `prompt` at `positions` (one per directive) in every
/// STEM layer.
pub fn apply_edit<'m>(
    model: &'m Model,
    prompt: &[usize],
    positions: &[usize],
    plan: &EditPlan,
) -> Result<EditedModel<'m>> {
    apply_edit_layers(model, prompt, positions, plan, &model.stem_layers())
}

/// [`apply_edit`] restricted to `layers`, each of which must hold a table.
pub fn apply_edit_layers<'m>(
    model: &'m Model,
    prompt: &[usize],
    positions: &[usize],
    plan: &EditPlan,
    layers: &BTreeSet<usize>,
) -> Result<EditedModel<'m>> {
    let stem = model.stem_layers();
    if stem.is_empty() {
        return Err(Error::config("model has no token-indexed layer to edit"));
    }
    if let Some(&bad) = layers.iter().find(|l| !stem.contains(l)) {
        return Err(Error::config(format!("layer {bad} holds no table")));
    }
    if positions.len() != plan.directives.len() {
        return Err(Error::Scheme(format!(
            "{} positions for {} directives",
            positions.len(),
            plan.directives.len()
        )));
    }
    let vocab = model.config().vocab;
    for &p in positions {
        if p >= prompt.len() {
            return Err(Error::Index {
                index: p,
                bound: prompt.len(),
            });
        }
    }
    for &t in prompt {
        if t >= vocab {
            return Err(Error::Index {
                index: t,
                bound: vocab,
            });
        }
    }
    let check_id = |t: usize| {
        if t >= vocab {
            Err(Error::Index {
                index: t,
                bound: vocab,
            })
        } else {
            Ok(())
        }
    };
    for d in &plan.directives {
        match d {
            Directive::UseRowOf(t) => check_id(*t)?,
            Directive::MeanOf(ids) => {
                if ids.is_empty() {
                    return Err(Error::Scheme("mean of no rows".into()));
                }
                ids.iter().try_for_each(|&t| check_id(t))?
            }
            Directive::UseVectors(v) => {
                let d_ff = model.config().d_ff;
                if v.len() != layers.len() || v.iter().any(|r| r.len() != d_ff) {
                    return Err(Error::shape(format!(
                        "explicit vectors must be {} rows of {d_ff}",
                        layers.len()
                    )));
                }
            }
        }
    }
    let mut overrides = vec![None; model.blocks.len()];
    for (k, &l) in layers.iter().enumerate() {
        let table = &model.table(l).expect("checked above").u;
        let mut rows = Vec::with_capacity(prompt.len());
        for &t in prompt {
            rows.push(table.row(t).to_vec());
        }
        for (&p, d) in positions.iter().zip(&plan.directives) {
            rows[p] = match d {
                Directive::UseRowOf(t) => table.row(*t).to_vec(),
                Directive::MeanOf(ids) => {
                    let mut acc = vec![0.0; table.cols()];
                    for &t in ids {
                        acc.iter_mut().zip(table.row(t)).for_each(|(a, v)| *a += v);
                    }
                    let n = ids.len() as f64;
                    acc.iter_mut().for_each(|a| *a /= n);
                    acc
                }
                Directive::UseVectors(v) => v[k].clone(),
            };
        }
        overrides[l] = Some(Tensor::from_rows(&rows)?);
    }
    Ok(EditedModel {
        base: model,
        prompt: prompt.to_vec(),
        overrides,
        edits: positions
            .iter()
            .copied()
            .zip(plan.directives.iter().cloned())
            .collect(),
        positions: (0..prompt.len()).collect(),
    })
}

/// Forward pass where table lookups at mapped positions use the mapped id;
/// embeddings and attention see the original prompt.
pub fn remap_execute(
    model: &Model,
    prompt: &[usize],
    map: &BTreeMap<usize, usize>,
) -> Result<Tensor> {
    let vocab = model.config().vocab;
    let mut rows = prompt.to_vec();
    for (&p, &t) in map {
        if p >= prompt.len() {
            return Err(Error::Index {
                index: p,
                bound: prompt.len(),
            });
        }
        if t >= vocab {
            return Err(Error::Index {
                index: t,
                bound: vocab,
            });
        }
        rows[p] = t;
    }
    let hooks = ForwardHooks {
        lookups: (0..model.blocks.len())
            .map(|l| {
                model.table(l).map(|t| Lookup {
                    table: &t.u,
                    rows: rows.as_slice(),
                })
            })
            .collect(),
    };
    model.forward_with(prompt, &hooks)
}

/// The `k` most probable tokens of one logit row, ties by lower id.
pub fn topk_next(logits: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > logits.len() {
        return Err(Error::config(format!(
            "top-k {k} outside 1..={}",
            logits.len()
        )));
    }
    let p = softmax(logits);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|i| (i, p[i])).collect())
}
