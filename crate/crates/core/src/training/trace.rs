use std::io::Write;

use serde::{Deserialize, Serialize};

/// Per-step loss and learning rate of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

impl LossTrace {
    pub fn push(&mut self, loss: f64, lr: f64) {
        self.losses.push(loss);
        self.lrs.push(lr);
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Mean of the last `window` losses (all of them if fewer).
    pub fn smoothed_final(&self, window: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let tail = &self.losses[self.losses.len().saturating_sub(window.max(1))..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Mean of the first `window` losses.
    pub fn smoothed_initial(&self, window: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let head = &self.losses[..window.max(1).min(self.losses.len())];
        Some(head.iter().sum::<f64>() / head.len() as f64)
    }

    /// `step,loss,lr` rows with a header line; steps are 1-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,lr")?;
        for (i, (l, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            writeln!(w, "{},{:?},{:?}", i + 1, l, lr)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}
