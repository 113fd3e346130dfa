//! Training, evaluation and ablation runs with their file outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use segmap_core::eval::{detections, evaluate, AblationRow, Detection, EvalConfig, EvalReport};
use segmap_core::model::Model;
use segmap_core::scene::{generate_dataset, SurroundFrame};
use segmap_core::train::{StepRecord, Trainer};
use segmap_core::Config;

use crate::checkpoint::Checkpoint;
use crate::config_file::apply_override;
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;

pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";
pub const METRICS: &str = "metrics.jsonl";

/// Trains on `frames` until `stop` completed steps (default: the configured
/// budget), starting fresh or from a checkpoint to resume. See
/// [`train_with`] for the files written under `out_dir`.
pub fn train(
    cfg: &Config,
    frames: &[SurroundFrame],
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
    stop: Option<usize>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<Trainer<f32>> {
    let trainer = match resume {
        Some(ck) => ck.into_trainer()?,
        None => Trainer::new(cfg)?,
    };
    train_with(trainer, frames, out_dir, stop, progress)
}

/// Continues `trainer` until `stop` completed steps (default: the
/// configured budget). With `out_dir`, appends every step to
/// `metrics.jsonl`, writes a checkpoint every `train.checkpoint_every`
/// epochs and a final `checkpoint.safetensors`.
pub fn train_with(
    mut trainer: Trainer<f32>,
    frames: &[SurroundFrame],
    out_dir: Option<&Path>,
    stop: Option<usize>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<Trainer<f32>> {
    let n = frames.len();
    let stop = stop.unwrap_or_else(|| trainer.final_step(n));
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(MetricsLog::append_to(&d.join(METRICS))?)
        }
        None => None,
    };
    let spe = trainer.cfg().steps_per_epoch(n.max(1));
    let every = trainer.cfg().train.checkpoint_every;
    let mut io_err: Option<Error> = None;
    let res = trainer.run_until(frames, stop, |t, rec| {
        progress(rec);
        if let Some(l) = log.as_mut() {
            if let Err(e) = l.write(rec) {
                io_err = Some(e);
                return Err(segmap_core::Error::Config("metrics log write failed".into()));
            }
        }
        if let (Some(d), true) = (out_dir, every > 0 && t.step % (spe * every) == 0) {
            let epoch = t.step / spe;
            let path = d.join(format!("checkpoint_epoch{epoch:04}.safetensors"));
            if let Err(e) = Checkpoint::from_trainer(t, epoch).save(&path) {
                io_err = Some(e);
                return Err(segmap_core::Error::Config("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    res?;
    if let Some(d) = out_dir {
        Checkpoint::from_trainer(&trainer, trainer.step / spe).save(&d.join(FINAL_CHECKPOINT))?;
    }
    Ok(trainer)
}

/// Inference results over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Foreground IoU of the BEV segmentation head pooled over all frames;
    /// `None` when the head is disabled.
    pub bev_iou: Option<f64>,
    #[serde(skip)]
    pub detections: Vec<Vec<Detection>>,
    #[serde(skip)]
    pub seg: Vec<Option<Vec<f64>>>,
}

pub fn evaluate_model(model: &Model<f32>, frames: &[SurroundFrame], cfg: &EvalConfig) -> Result<Evaluation> {
    let mut dets = Vec::with_capacity(frames.len());
    let mut segs = Vec::with_capacity(frames.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for f in frames {
        let (pred, seg) = model.predict(f)?;
        dets.push(detections(&pred, cfg.score_min));
        if let Some(s) = &seg {
            for (&p, &m) in s.iter().zip(&f.bev_mask.data) {
                let (a, b) = (p > 0.5, m != 0);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
        }
        segs.push(seg);
    }
    let gts: Vec<_> = frames.iter().map(|f| f.elements.clone()).collect();
    let report = evaluate(&dets, &gts, cfg)?;
    let bev_iou = model.net.bsm.as_ref().map(|_| if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    Ok(Evaluation {
        report,
        bev_iou,
        detections: dets,
        seg: segs,
    })
}

/// One ablation configuration: a row label and config overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<String>,
}

fn variant(label: &str, overrides: &[String]) -> Variant {
    Variant {
        label: label.into(),
        overrides: overrides.to_vec(),
    }
}

fn toggles(usm: bool, bsm: bool, sgm: bool) -> Vec<String> {
    vec![
        format!("usm.enabled={usm}"),
        format!("bsm.enabled={bsm}"),
        format!("sgm.enabled={sgm}"),
    ]
}

/// The module ablation: baseline, each segmentation head alone, both, and
/// both with guidance.
pub fn module_variants() -> Vec<Variant> {
    vec![
        variant("baseline", &toggles(false, false, false)),
        variant("USM", &toggles(true, false, false)),
        variant("BSM", &toggles(false, true, false)),
        variant("USM + BSM", &toggles(true, true, false)),
        variant("USM + BSM + SGM", &toggles(true, true, true)),
    ]
}

/// The resolution and backbone study at desk scale: the full model with the
/// configured backbone at half and full input resolution, then a backbone
/// twice as wide at full resolution. Every row trains from scratch.
pub fn resolution_variants(base: &Config) -> Vec<Variant> {
    let (h, w) = (base.scene.image_h, base.scene.image_w);
    let bw = base.model.backbone_widths;
    let size = |h: usize, w: usize| vec![format!("scene.image_h={h}"), format!("scene.image_w={w}")];
    let mut wide = size(h, w);
    wide.push(format!("model.backbone_widths=[{}, {}, {}]", 2 * bw[0], 2 * bw[1], 2 * bw[2]));
    let full = toggles(true, true, true);
    let with = |mut a: Vec<String>| {
        a.extend(full.iter().cloned());
        a
    };
    vec![
        variant("base", &with(size(h / 2, w / 2))),
        variant("base", &with(size(h, w))),
        variant("wide", &with(wide)),
    ]
}

pub const RESOLUTION_NOTE: &str =
    "rows train from scratch; use `train --init` to warm-start one configuration from another's checkpoint";

/// Trains every variant from the same seed and budget on the first 75% of
/// the frames and evaluates on the rest. A variant whose configuration or
/// training fails yields a failed row; the others still run.
pub fn run_ablation(
    base: &Config,
    frames: &[SurroundFrame],
    variants: &[Variant],
    progress: &mut dyn FnMut(&str, &StepRecord),
) -> Result<Vec<AblationRow>> {
    if frames.len() < 2 {
        return Err(Error::Usage("ablation needs at least two frames".into()));
    }
    let n_eval = (frames.len() / 4).max(1);
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let row = (|| -> Result<AblationRow> {
            let mut cfg = base.clone();
            for o in &v.overrides {
                cfg = apply_override(&cfg, o)?;
            }
            cfg.validate()?;
            let size = (cfg.scene.image_h, cfg.scene.image_w);
            let regenerated;
            let data: &[SurroundFrame] = if cfg.scene == base.scene {
                frames
            } else {
                let mut sc = cfg.scene.clone();
                sc.n_frames = frames.len();
                regenerated = generate_dataset(&sc)?;
                &regenerated
            };
            let (train_set, eval_set) = data.split_at(data.len() - n_eval);
            let trainer = train(&cfg, train_set, None, None, None, &mut |r| progress(&v.label, r))?;
            let ev = evaluate_model(&trainer.model, eval_set, &cfg.eval)?;
            Ok(AblationRow::from_report(&v.label, size, &ev.report))
        })();
        rows.push(match row {
            Ok(r) => r,
            Err(e) => {
                let size = (base.scene.image_h, base.scene.image_w);
                AblationRow::failed(&v.label, size, e.to_string())
            }
        });
    }
    Ok(rows)
}
