use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::adamw::AdamW;
use super::schedule::{lr_at, Schedule};
use super::trace::LossTrace;
use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, Model};
use crate::numerics::{ParamSet, Tape};

fn default_eps() -> f64 {
    1e-8
}

/// Optimizer, schedule and batching settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub min_lr_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (when a directory is given).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-3,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.01,
            min_lr_factor: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: default_eps(),
            batch_size: 8,
            seq_len: 128,
            steps: 1000,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail("peak_lr", format!("{} is not positive", self.peak_lr));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail(
                "warmup_ratio",
                format!("{} outside (0, 1)", self.warmup_ratio),
            );
        }
        if !(self.min_lr_factor > 0.0 && self.min_lr_factor <= 1.0) {
            return fail(
                "min_lr_factor",
                format!("{} outside (0, 1]", self.min_lr_factor),
            );
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", format!("{} is negative", self.weight_decay));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(field, format!("{b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return fail("eps", format!("{} is not positive", self.eps));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if self.seq_len == 0 {
            return fail("seq_len", "must be positive".into());
        }
        if self.steps == 0 {
            return fail("steps", "must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every", "must be positive".into());
        }
        Ok(())
    }
}

/// Where to write periodic checkpoints and what to resume from.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// A checkpoint written by [`train`]; the run continues from its step.
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    /// Final parameters with optimizer state and the trace in its metadata.
    pub checkpoint: Checkpoint,
}

/// Metadata stored in the checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    train: TrainConfig,
    adam_t: usize,
    trace: LossTrace,
}

fn snapshot(
    model: &Model,
    opt: &AdamW,
    cfg: &TrainConfig,
    trace: &LossTrace,
    step: usize,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::from_model(model, step);
    ckpt.tensors.extend(opt.export());
    ckpt.extra = serde_json::to_value(TrainState {
        train: cfg.clone(),
        adam_t: opt.t,
        trace: trace.clone(),
    })?;
    Ok(ckpt)
}

/// Next-token loss of one batch and the gradient of every named parameter.
pub fn loss_and_grads(
    model: &Model,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, inputs, targets, batch, seq)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = model
        .named_params()
        .into_iter()
        .map(|(_, t)| tape.param_grad(t).map(<[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Trains `model` on windows of `corpus`. Update `i` (0-based) uses
/// `lr_at(i + 1)`; the batch of each step depends only on the seed and the
/// step index, so a resumed run reproduces an uninterrupted one.
pub fn train(
    model: &mut Model,
    corpus: &[usize],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.seq_len > model.config().max_len {
        return Err(Error::config(format!(
            "train.seq_len: {} exceeds model max_len {}",
            cfg.seq_len,
            model.config().max_len
        )));
    }
    let sampler = BatchSampler::new(cfg.seed, cfg.batch_size, cfg.seq_len)?;
    let mut opt = AdamW::new(model, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut trace = LossTrace::default();
    let mut start = 0;
    if let Some(ckpt) = &opts.resume {
        if &ckpt.config != model.config() {
            return Err(Error::config(
                "resume checkpoint has a different model configuration",
            ));
        }
        let state: TrainState = serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Format(format!("checkpoint lacks training state: {e}")))?;
        model.load_params(ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        opt.import(&ckpt.tensors, state.adam_t)?;
        trace = state.trace;
        start = ckpt.step;
        if trace.len() != start {
            return Err(Error::Format(format!(
                "checkpoint trace has {} steps, header says {start}",
                trace.len()
            )));
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for step in start..cfg.steps {
        let batch = sampler.batch_at(step, corpus)?;
        let lr = lr_at(step + 1, cfg);
        let outcome = loss_and_grads(model, &batch.inputs, &batch.targets, batch.batch, batch.seq)
            .and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss is {loss}")));
                }
                opt.step(model, &grads, lr).map(|()| loss)
            });
        let loss = match outcome {
            Ok(loss) => loss,
            Err(Error::Numeric(reason)) => {
                return Err(Error::Diverged {
                    step,
                    reason,
                    trace: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        trace.push(loss, lr);
        if let (Some(dir), Some(every)) = (&opts.checkpoint_dir, cfg.checkpoint_every) {
            let done = step + 1;
            if done % every == 0 && done < cfg.steps {
                let ckpt = snapshot(model, &opt, cfg, &trace, done)?;
                save_checkpoint(dir.join(format!("step_{done:07}.ckpt")), &ckpt)?;
            }
        }
    }
    let checkpoint = snapshot(model, &opt, cfg, &trace, cfg.steps.max(start))?;
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(dir.join("final.ckpt"), &checkpoint)?;
    }
    Ok(TrainOutcome { trace, checkpoint })
}

/// Mean next-token loss over consecutive `seq`-length windows of `stream`
/// (at most `max_windows`), evaluated `batch` windows at a time.
pub fn eval_loss(
    model: &Model,
    stream: &[usize],
    seq: usize,
    batch: usize,
    max_windows: usize,
) -> Result<f64> {
    let windows = crate::data::pack_sequences(stream, seq);
    let windows = &windows[..windows.len().min(max_windows)];
    if windows.is_empty() {
        return Err(Error::Degenerate(format!(
            "stream of {} tokens has no window of {seq}",
            stream.len()
        )));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch.max(1)) {
        let inputs: Vec<usize> = chunk.iter().flat_map(|(i, _)| i.iter().copied()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let mut tape = Tape::inference();
        let loss = model.loss(&mut tape, &inputs, &targets, chunk.len(), seq)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}
