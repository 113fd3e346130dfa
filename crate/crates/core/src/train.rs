//! Deterministic single-threaded training loop.
//!
//! Batches are drawn from a per-epoch shuffle seeded by `(train.seed,
//! epoch)`; everything else a step needs is derived from the global step
//! counter, so resuming from a saved step reproduces an uninterrupted run
//! exactly.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::LossReport;
use crate::model::{Mode, Model};
use crate::nn;
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::real::Real;
use crate::scene::{hflip, SurroundFrame};
use crate::tensor::Tensor;

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: LossReport,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Frame order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n_frames: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_frames).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<StepRecord>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = Model::new(cfg)?;
        let t = &cfg.train;
        let opt = AdamW::new(
            AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            &model.store,
        );
        Ok(Self {
            model,
            opt,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &Config {
        &self.model.cfg
    }

    /// Step at which training stops for a dataset of `n_frames`.
    pub fn final_step(&self, n_frames: usize) -> usize {
        let total = self.cfg().schedule_steps(n_frames);
        match self.cfg().train.max_steps {
            0 => total,
            m => m.min(total),
        }
    }

    /// Frame indices of global step `step`.
    pub fn batch_indices(&self, step: usize, n_frames: usize) -> Vec<usize> {
        let spe = self.cfg().steps_per_epoch(n_frames);
        let bs = self.cfg().train.batch_size;
        let (epoch, pos) = (step / spe, step % spe);
        let order = epoch_order(self.cfg().train.seed, epoch, n_frames);
        order[pos * bs..((pos + 1) * bs).min(n_frames)].to_vec()
    }

    /// Forward and backward over one batch without updating parameters.
    /// Returns the batch-mean loss report and gradients in store order.
    pub fn loss_and_grads(&self, batch: &[&SurroundFrame]) -> Result<(LossReport, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let model = &self.model;
        let mut g = Graph::new();
        let p = nn::bind(&mut g, &model.store);
        let mut totals = Vec::with_capacity(batch.len());
        let mut reports = Vec::with_capacity(batch.len());
        for frame in batch {
            let gts = model.gt_targets(frame)?;
            let out = model.forward(&mut g, &p, frame, Mode::Train)?;
            let fl = model.frame_loss(&mut g, frame, &out, &gts)?;
            reports.push(fl.report(&g)?);
            totals.push(fl.total);
        }
        let report = LossReport::mean(&reports)?;
        let cat = g.concat_rows(&totals)?;
        let root = g.mean(cat);
        let mut grads = g.backward(root);
        let gs = p
            .iter()
            .zip(model.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((report, gs))
    }

    /// Runs global step `self.step` on `frames` and advances the counter.
    pub fn train_step(&mut self, frames: &[SurroundFrame]) -> Result<StepRecord> {
        let n = frames.len();
        let step = self.step;
        let idx = self.batch_indices(step, n);
        let flipped: Vec<SurroundFrame>;
        let batch: Vec<&SurroundFrame> = if self.cfg().train.hflip {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg().train.seed, 2, step as u64));
            flipped = idx
                .iter()
                .map(|&i| if rng.gen::<bool>() { hflip(&frames[i]) } else { Ok(frames[i].clone()) })
                .collect::<Result<_>>()?;
            flipped.iter().collect()
        } else {
            idx.iter().map(|&i| &frames[i]).collect()
        };
        let (loss, mut grads) = self.loss_and_grads(&batch)?;
        let t = self.cfg().train;
        let grad_norm = clip_grad_norm(&mut grads, t.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { term: "gradient" });
        }
        let lr = cosine_lr(step, self.cfg().schedule_steps(n), t.lr0, t.lr_min);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        let rec = StepRecord {
            epoch: step / self.cfg().steps_per_epoch(n),
            step,
            lr,
            grad_norm,
            loss,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `stop` completed steps (capped at [`Trainer::final_step`]),
    /// calling `on_step` after every step.
    pub fn run_until(&mut self, frames: &[SurroundFrame], stop: usize, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Config("training needs at least one frame".into()));
        }
        let stop = stop.min(self.final_step(frames.len()));
        while self.step < stop {
            let rec = self.train_step(frames)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}
