//! Shared training-loop plumbing: settings, per-step randomness and loss
//! logging.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    /// Number of optimiser steps (the training budget).
    pub steps: u64,
    pub batch_size: usize,
    /// Base learning rate reached after warmup.
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Write a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 1e-4,
            warmup_steps: 100,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: 1.0,
            log_every: 50,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Independent random stream for one optimiser step; resuming at step `k`
/// replays exactly the draws an uninterrupted run would make.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Writes `step,loss,lr` rows.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "step,loss,lr")?;
        for r in history {
            writeln!(f, "{},{:.9},{:.6e}", r.step, r.loss, r.lr)?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Factor bringing a gradient of global norm `norm` down to `max_norm`.
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
