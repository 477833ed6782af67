use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// Scalar settings of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected AdamW update with decoupled decay; `t` is the 1-based
/// update count.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut Moments,
    hp: &AdamHyper,
    t: usize,
    decay: bool,
) {
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let shrink = if decay {
        1.0 - hp.lr * hp.weight_decay
    } else {
        1.0
    };
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * shrink - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// AdamW over a [`ParamSet`]. Weight decay applies to every tensor of rank
/// two or more (projections, embeddings, token tables) and not to norm
/// scales.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    pub state: Vec<(String, Moments)>,
}

impl AdamW {
    pub fn new<P: ParamSet>(
        params: &P,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            state: params
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, Moments::zeros(t.numel())))
                .collect(),
        }
    }

    /// Applies one update; `grads[i]` belongs to the i-th named parameter,
    /// `None` meaning an all-zero gradient.
    pub fn step<P: ParamSet>(
        &mut self,
        params: &mut P,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        let mut named = params.named_params_mut();
        if named.len() != grads.len() || named.len() != self.state.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                named.len(),
                grads.len(),
                self.state.len()
            )));
        }
        for ((name, t), g) in named.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != t.numel() {
                    return Err(Error::shape(format!(
                        "gradient for {name} has wrong length"
                    )));
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in {name} at element {i}"
                    )));
                }
            }
        }
        self.t += 1;
        let hp = AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        };
        let mut zeros = Vec::new();
        for (((name, t), g), (sname, st)) in named.iter_mut().zip(grads).zip(self.state.iter_mut())
        {
            debug_assert_eq!(name, sname);
            let g = match g {
                Some(g) => g.as_slice(),
                None => {
                    zeros.resize(t.numel(), 0.0);
                    &zeros[..t.numel()]
                }
            };
            let decay = t.rank() >= 2;
            adamw_step(t.data_mut(), g, st, &hp, self.t, decay);
        }
        Ok(())
    }

    /// Moments as named tensors `adam.m.<name>` / `adam.v.<name>`.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.state.len());
        for (name, st) in &self.state {
            let n = st.m.len();
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(vec![n], st.m.clone()).expect("rank 1"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(vec![n], st.v.clone()).expect("rank 1"),
            ));
        }
        out
    }

    /// Restores moments exported by [`AdamW::export`].
    pub fn import(&mut self, tensors: &[(String, Tensor)], t: usize) -> Result<()> {
        for (name, st) in &mut self.state {
            for (prefix, buf) in [("adam.m.", &mut st.m), ("adam.v.", &mut st.v)] {
                let key = format!("{prefix}{name}");
                let src = tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Format(format!("missing optimizer tensor {key}")))?;
                if src.numel() != buf.len() {
                    return Err(Error::Format(format!(
                        "optimizer tensor {key} has wrong size"
                    )));
                }
                buf.copy_from_slice(src.data());
            }
        }
        self.t = t;
        Ok(())
    }
}
