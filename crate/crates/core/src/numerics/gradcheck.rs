//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is at finite-difference noise level compare absolutely.
    pub floor: f64,
    /// Check at most this many entries (seeded sample); `None` checks all.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

impl GradCheckReport {
    /// Combines reports, e.g. one per parameter tensor.
    pub fn merge(reports: &[GradCheckReport]) -> GradCheckReport {
        let mut out = GradCheckReport {
            checked: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_index: None,
            passed: true,
        };
        for r in reports {
            out.checked += r.checked;
            out.max_abs_err = out.max_abs_err.max(r.max_abs_err);
            if r.max_rel_err >= out.max_rel_err {
                out.max_rel_err = r.max_rel_err;
                out.worst_index = r.worst_index;
            }
            out.passed &= r.passed;
        }
        out
    }
}

fn probe_indices(n: usize, cfg: &GradCheckConfig) -> Vec<usize> {
    match cfg.max_probes {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compares `analytic` against central differences of `eval` around `theta`.
pub fn finite_difference_check(
    theta: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if theta.len() != analytic.len() {
        return Err(Error::shape(
            "gradient length differs from parameter length",
        ));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: None,
        passed: true,
    };
    for i in probe_indices(theta.len(), cfg) {
        let orig = probe[i];
        probe[i] = orig + cfg.eps;
        let plus = eval(&probe)?;
        probe[i] = orig - cfg.eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite probe at index {i}")));
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(cfg.floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}

/// Gradient check of a scalar-valued tape computation with respect to `theta`.
///
/// `f` receives a fresh tape and the leaf holding `theta` and returns the
/// scalar output.
pub fn grad_check<F>(f: F, theta: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone(), true);
    let out = f(&mut tape, x)?;
    let value = tape.value(out).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric("objective is not finite at theta".into()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; theta.numel()]);
    finite_difference_check(theta.data(), &analytic, cfg, |probe| {
        let mut t = Tape::inference();
        let x = t.leaf(Tensor::new(theta.shape().to_vec(), probe.to_vec())?, false);
        let out = f(&mut t, x)?;
        Ok(t.value(out).data()[0])
    })
}

/// Gradient check of every tensor of a [`ParamSet`]: the analytic gradient
/// comes from one backward pass of `loss`, the numeric one from re-running
/// `loss` on perturbed copies.
pub fn check_parameters<P, F>(
    params: &P,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<Vec<(String, GradCheckReport)>>
where
    P: ParamSet + Clone,
    F: Fn(&mut Tape, &P) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = params
        .named_params()
        .iter()
        .map(|(_, t)| {
            tape.param_grad(t)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);
    let names: Vec<String> = params.named_params().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (j, name) in names.into_iter().enumerate() {
        let theta = params.named_params()[j].1.data().to_vec();
        let report = finite_difference_check(&theta, &analytic[j], cfg, |probe| {
            let mut copy = params.clone();
            copy.named_params_mut()[j]
                .1
                .data_mut()
                .copy_from_slice(probe);
            let mut t = Tape::inference();
            let out = loss(&mut t, &copy)?;
            Ok(t.value(out).data()[0])
        })?;
        reports.push((name, report));
    }
    Ok(reports)
}
