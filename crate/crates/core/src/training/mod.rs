//! AdamW training with warmup and cosine or linear decay, checkpointing and
//! loss-spike counting.

mod adamw;
mod schedule;
mod spikes;
mod trace;
mod trainer;

pub use adamw::{adamw_step, AdamHyper, AdamW, Moments};
pub use schedule::{lr_at, warmup_steps, Schedule};
pub use spikes::{spike_count, spike_steps};
pub use trace::LossTrace;
pub use trainer::{eval_loss, loss_and_grads, train, TrainConfig, TrainOptions, TrainOutcome};
