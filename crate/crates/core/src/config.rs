//! Complete run configuration. Every section and field has a default and
//! unknown keys are rejected when deserializing.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::BACKBONE_STRIDE;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::guidance::QuerySource;
use crate::loss::{ClsLoss, DiceForm, LossWeights, MapLossConfig, SegLossConfig};
use crate::matching::MatchWeights;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the three backbone stages.
    pub backbone_widths: [usize; 3],
    pub d_model: usize,
    /// Heads of the BEV encoder's self-attention.
    pub heads: usize,
    /// Hidden width of the BEV encoder's feed-forward block.
    pub ffn: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_widths: [32, 48, 64],
            d_model: 64,
            heads: 4,
            ffn: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggle {
    pub enabled: bool,
}

impl Default for Toggle {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgmConfig {
    pub enabled: bool,
    pub query_source: QuerySource,
    pub d_k: usize,
}

impl Default for SgmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            query_source: QuerySource::Features,
            d_k: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_instances: usize,
    pub n_points: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_instances: 25,
            n_points: 10,
            n_layers: 6,
            heads: 4,
            ffn: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub dice_eps: f64,
    pub dice_form: DiceForm,
    pub w_cls: f64,
    pub w_pts: f64,
    pub cls_loss: ClsLoss,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let s = SegLossConfig::default();
        let m = MapLossConfig::default();
        Self {
            lambda1: s.weights.lambda1,
            lambda2: s.weights.lambda2,
            dice_eps: s.dice_eps,
            dice_form: s.dice_form,
            w_cls: m.weights.w_cls,
            w_pts: m.weights.w_pts,
            cls_loss: m.cls_loss,
            focal_gamma: m.focal_gamma,
        }
    }
}

impl LossConfig {
    pub fn seg(&self) -> SegLossConfig {
        SegLossConfig {
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            dice_eps: self.dice_eps,
            dice_form: self.dice_form,
        }
    }

    pub fn map(&self) -> MapLossConfig {
        MapLossConfig {
            weights: MatchWeights {
                w_cls: self.w_cls,
                w_pts: self.w_pts,
            },
            cls_loss: self.cls_loss,
            focal_gamma: self.focal_gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
    pub lr0: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay, applied to matrices and convolution kernels
    /// only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Random horizontal flips of whole frames.
    pub hflip: bool,
    /// Stop after this many optimizer steps (0: run every epoch). The
    /// learning-rate schedule still spans all epochs.
    pub max_steps: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 2,
            seed: 0,
            lr0: 3e-4,
            lr_min: 3e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 35.0,
            hflip: false,
            max_steps: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub usm: Toggle,
    pub bsm: Toggle,
    pub sgm: SgmConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl Config {
    /// Configuration with every auxiliary module switched off.
    pub fn baseline() -> Self {
        let mut c = Self::default();
        c.set_modules(false, false, false);
        c
    }

    pub fn set_modules(&mut self, usm: bool, bsm: bool, sgm: bool) {
        self.usm.enabled = usm;
        self.bsm.enabled = bsm;
        self.sgm.enabled = sgm;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.eval.validate()?;
        let m = &self.model;
        for (i, w) in m.backbone_widths.iter().enumerate() {
            positive(&format!("model.backbone_widths[{i}]"), *w)?;
        }
        positive("model.d_model", m.d_model)?;
        positive("model.heads", m.heads)?;
        positive("model.ffn", m.ffn)?;
        if !m.d_model.is_multiple_of(m.heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                m.d_model, m.heads
            )));
        }
        let d = &self.decoder;
        positive("decoder.n_instances", d.n_instances)?;
        positive("decoder.n_points", d.n_points)?;
        positive("decoder.n_layers", d.n_layers)?;
        positive("decoder.heads", d.heads)?;
        positive("decoder.ffn", d.ffn)?;
        if d.n_points < 2 {
            return Err(Error::Config("decoder.n_points must be at least 2".into()));
        }
        if !m.d_model.is_multiple_of(d.heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by decoder.heads ({})",
                m.d_model, d.heads
            )));
        }
        positive("sgm.d_k", self.sgm.d_k)?;
        if self.sgm.enabled && !self.bsm.enabled {
            return Err(Error::Config("sgm.enabled requires bsm.enabled".into()));
        }
        let s = &self.scene;
        if !s.image_h.is_multiple_of(BACKBONE_STRIDE) || !s.image_w.is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Config(format!(
                "scene image size {}x{} must be divisible by {BACKBONE_STRIDE}",
                s.image_h, s.image_w
            )));
        }
        let t = &self.train;
        if !(t.lr0 > 0.0) {
            return Err(Error::Config("train.lr0 must be positive".into()));
        }
        if !(t.lr_min >= 0.0 && t.lr_min <= t.lr0) {
            return Err(Error::Config("train.lr_min must lie in [0, train.lr0]".into()));
        }
        positive("train.epochs", t.epochs)?;
        positive("train.batch_size", t.batch_size)?;
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if !(t.adam_eps > 0.0) || !(t.weight_decay >= 0.0) || !(t.grad_clip_norm >= 0.0) {
            return Err(Error::Config(
                "train.adam_eps must be positive; weight_decay and grad_clip_norm non-negative".into(),
            ));
        }
        let l = &self.loss;
        for (name, v) in [
            ("loss.lambda1", l.lambda1),
            ("loss.lambda2", l.lambda2),
            ("loss.w_cls", l.w_cls),
            ("loss.w_pts", l.w_pts),
            ("loss.focal_gamma", l.focal_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(l.dice_eps > 0.0) {
            return Err(Error::Config("loss.dice_eps must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer steps per epoch for a dataset of `n_frames`.
    pub fn steps_per_epoch(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.train.batch_size)
    }

    /// Length of the learning-rate schedule.
    pub fn schedule_steps(&self, n_frames: usize) -> usize {
        self.train.epochs * self.steps_per_epoch(n_frames)
    }

    /// Names of the enabled auxiliary modules, e.g. `"USM + BSM + SGM"`.
    pub fn module_label(&self) -> alloc::string::String {
        let mut parts = Vec::new();
        if self.usm.enabled {
            parts.push("USM");
        }
        if self.bsm.enabled {
            parts.push("BSM");
        }
        if self.sgm.enabled {
            parts.push("SGM");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join(" + ")
        }
    }
}
