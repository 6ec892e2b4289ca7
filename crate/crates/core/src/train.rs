//! Optimization loop plumbing: learning-rate schedule, gradient handling,
//! and divergence detection. The two training stages differ only in the
//! token streams fed in (motion-only first, all groups afterwards).

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::map_codec::MapSegment;
use crate::math;
use crate::model::{LossStats, Model};
use crate::nn::{clip_global_norm, AdamW, Matrix};
use crate::sequence::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            warmup_steps: 2000,
            total_steps: 10_000,
            grad_clip: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(CoreError::Config("base_lr must be positive".to_string()));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(CoreError::Config(
                "total_steps must exceed warmup_steps".to_string(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(CoreError::Config("grad_clip must be positive".to_string()));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
/// `step` is 1-based (the step about to be applied).
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if step <= cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let span = (cfg.total_steps - cfg.warmup_steps) as f64;
        let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
        cfg.base_lr * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress))
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub stats: LossStats,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Completed optimization steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, CoreError> {
        cfg.validate()?;
        let opt = AdamW::new(&model.param_shapes(), cfg.weight_decay);
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: 0,
        })
    }

    /// One optimization step over a batch of sequences; gradients are
    /// accumulated across the batch before the update. Aborts with a numeric
    /// error when the loss or any gradient stops being finite.
    pub fn train_step(
        &mut self,
        batch: &[(&TokenSequence, &[MapSegment])],
    ) -> Result<StepReport, CoreError> {
        if batch.is_empty() {
            return Err(CoreError::Validation("empty training batch".to_string()));
        }
        let mut acc: Option<Vec<Matrix>> = None;
        let mut stats = LossStats::default();
        for (seq, segments) in batch {
            let mut out = self.model.forward(seq, segments, true)?;
            let s = out.stats.unwrap();
            if !s.total.is_finite() {
                return Err(CoreError::Numeric(alloc::format!(
                    "non-finite loss at step {}",
                    self.step + 1
                )));
            }
            accumulate_stats(&mut stats, &s);
            let grads = self.model.grads(&mut out)?;
            match &mut acc {
                None => acc = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for i in 0..a.data.len() {
                            a.data[i] += g.data[i];
                        }
                    }
                }
            }
        }
        let mut grads = acc.unwrap();
        for g in &grads {
            if g.data.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::Numeric(alloc::format!(
                    "non-finite gradient at step {}",
                    self.step + 1
                )));
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        let lr = lr_at(&self.cfg, self.step + 1);
        self.opt.apply(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            lr,
            grad_norm,
            stats,
        })
    }
}

fn accumulate_stats(into: &mut LossStats, s: &LossStats) {
    into.total += s.total;
    into.targets += s.targets;
    for (a, b) in [
        (&mut into.tl, &s.tl),
        (&mut into.kind, &s.kind),
        (&mut into.map, &s.map),
        (&mut into.rs, &s.rs),
        (&mut into.motion, &s.motion),
    ] {
        a.loss += b.loss;
        a.correct += b.correct;
        a.total += b.total;
    }
}
