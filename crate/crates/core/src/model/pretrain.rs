//! Masked-language-model pretraining loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{EncoderCheckpoint, TrainingMeta};
use super::params::{init_model, ModelConfig, ParamSet};
use super::{compute_gradients, Mode};
use crate::mlm::{apply_masking, InputSequence, MaskingPolicy};
use crate::rng::{child_rng, derive_seed, streams};
use crate::{Error, Result};

/// Window of the trailing mean used to report smoothed loss.
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Emit a log record every `log_every` steps (and on the last step).
    pub log_every: usize,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            log_every: 10,
        }
    }
}

impl PretrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }
}

/// Learning rate for 1-based `step`: linear warmup to the peak, then linear
/// decay to zero at the final step.
pub fn learning_rate(schedule: &PretrainSchedule, step: usize) -> f64 {
    let warmup = schedule.warmup_steps();
    if step <= warmup {
        schedule.lr * step as f64 / warmup as f64
    } else {
        let remaining = schedule.steps - warmup;
        schedule.lr * (schedule.steps - step) as f64 / remaining as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: EncoderCheckpoint,
    /// Loss of every step that had labeled positions, in order.
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
    pub skipped_batches: usize,
}

impl PretrainOutcome {
    pub fn initial_smoothed_loss(&self) -> Option<f64> {
        smoothed(&self.losses, SMOOTHING_WINDOW).first().copied()
    }

    pub fn final_smoothed_loss(&self) -> Option<f64> {
        smoothed(&self.losses, SMOOTHING_WINDOW).last().copied()
    }
}

/// Means of every full window of `window` consecutive values (all values if
/// fewer than `window`).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if values.is_empty() || window == 0 {
        return Vec::new();
    }
    let w = window.min(values.len());
    values
        .windows(w)
        .map(|c| c.iter().sum::<f64>() / w as f64)
        .collect()
}

/// Fixed-order batches: sequences are reshuffled at the start of every pass.
struct BatchStream<'a> {
    seqs: &'a [InputSequence],
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    fn new(seqs: &'a [InputSequence], seed: u64) -> Self {
        let mut s = Self {
            seqs,
            seed,
            epoch: 0,
            order: (0..seqs.len()).collect(),
            cursor: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = child_rng(self.seed, streams::BATCHES, self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next(&mut self, size: usize) -> Vec<InputSequence> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.seqs.len()) {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.seqs[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

/// Train a freshly initialized encoder with the MLM objective.
///
/// Every random choice (initialization, batch order, masking, dropout) is
/// drawn from a stream derived from `seed`, so a rerun reproduces the
/// checkpoint byte for byte. A non-finite loss or parameter aborts with
/// [`Error::Diverged`] carrying the last finite checkpoint.
pub fn pretrain(
    sequences: &[InputSequence],
    cfg: &ModelConfig,
    policy: &MaskingPolicy,
    schedule: &PretrainSchedule,
    seed: u64,
    vocab_fingerprint: &str,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    schedule.validate()?;
    let params = init_model(cfg, seed)?;
    pretrain_from(
        params,
        sequences,
        cfg,
        policy,
        schedule,
        seed,
        vocab_fingerprint,
    )
}

/// Continue MLM training from existing parameters.
pub fn pretrain_from(
    mut params: ParamSet,
    sequences: &[InputSequence],
    cfg: &ModelConfig,
    policy: &MaskingPolicy,
    schedule: &PretrainSchedule,
    seed: u64,
    vocab_fingerprint: &str,
) -> Result<PretrainOutcome> {
    schedule.validate()?;
    if schedule.steps > 0 && sequences.is_empty() {
        return Err(Error::Config(
            "pretraining needs at least one sequence".into(),
        ));
    }
    let checkpoint = |params: &ParamSet, steps: usize, losses: &[f64]| {
        EncoderCheckpoint::new(
            cfg.clone(),
            params.clone(),
            vocab_fingerprint.to_string(),
            TrainingMeta {
                steps,
                seed,
                initial_loss: losses.first().copied(),
                final_loss: losses.last().copied(),
            },
        )
    };
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: schedule.lr,
            weight_decay: schedule.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut batches = BatchStream::new(sequences, seed);
    let mut losses = Vec::with_capacity(schedule.steps);
    let mut log = Vec::new();
    let mut skipped = 0;
    for step in 1..=schedule.steps {
        let batch_seqs = batches.next(schedule.batch_size);
        let step_policy = MaskingPolicy {
            seed: derive_seed(policy.seed, streams::MASKING, step as u64),
            ..policy.clone()
        };
        let batch = apply_masking(&batch_seqs, &step_policy, cfg.vocab_size)?;
        let mode = Mode::Train {
            seed: derive_seed(seed, streams::DROPOUT, step as u64),
        };
        let diverged = |params: &ParamSet, losses: &[f64]| -> Error {
            match checkpoint(params, step - 1, losses) {
                Ok(c) => Error::Diverged {
                    step,
                    last_good: Box::new(c),
                },
                Err(e) => e,
            }
        };
        let out = match compute_gradients(cfg, &params, &batch, mode) {
            Ok(Some(out)) => out,
            Ok(None) => {
                skipped += 1;
                log::debug!("step {step}: batch has no masked positions, skipped");
                continue;
            }
            Err(Error::NonFinite { .. }) => return Err(diverged(&params, &losses)),
            Err(e) => return Err(e),
        };
        let lr = learning_rate(schedule, step);
        let before = params.clone();
        adam.config.lr = lr;
        adam_step(&mut params, &out.gradients, &mut adam)?;
        if params.check_finite().is_err() {
            return Err(diverged(&before, &losses));
        }
        losses.push(out.loss);
        if step % schedule.log_every == 0 || step == schedule.steps {
            log.push(LogRecord {
                step,
                loss: out.loss,
                lr,
            });
        }
    }
    Ok(PretrainOutcome {
        checkpoint: checkpoint(&params, schedule.steps, &losses)?,
        losses,
        log,
        skipped_batches: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = PretrainSchedule {
            steps: 10,
            lr: 1.0,
            warmup_frac: 0.2,
            ..PretrainSchedule::default()
        };
        let lrs: Vec<f64> = (1..=10).map(|t| learning_rate(&s, t)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert_eq!(lrs[9], 0.0);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] <= w[0]));
        let flat = PretrainSchedule {
            steps: 4,
            lr: 1.0,
            warmup_frac: 0.0,
            ..PretrainSchedule::default()
        };
        assert_eq!(learning_rate(&flat, 1), 0.75);
    }

    #[test]
    fn smoothing_uses_trailing_windows() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5]);
        assert_eq!(smoothed(&[1.0, 3.0], 10), [2.0]);
        assert!(smoothed(&[], 10).is_empty());
    }
}
