//! Segmentation losses (soft Dice, two-class cross-entropy), the set-matching
//! map loss, and the additive loss report.
//!
//! ```text
//! seg_term(I, I_gt) = lambda1 * Dice(I, I_gt) + lambda2 * CE(I, I_gt)
//! L_seg   = L_usm + L_bsm
//! L_total = L_map + L_seg
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{LayerOutput, N_LOGITS};
use crate::error::{Error, Result};
use crate::feature::SegLogits;
use crate::graph::{Graph, Var};
use crate::matching::{hungarian_match, GtTarget, MatchResult, MatchWeights, Point, PredView};
use crate::real::Real;
use crate::scene::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Dice weight.
    pub lambda1: f64,
    /// Cross-entropy weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 15.0,
            lambda2: 0.5,
        }
    }
}

/// Denominator of the overlap ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceForm {
    /// `sum(p) + sum(g)`: standard soft Dice, in `[0, 1)`.
    #[default]
    Dice,
    /// `sum(p) + sum(g) - sum(p*g)`: the soft union. With the factor 2 in
    /// the numerator this can go negative on good overlap.
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossConfig {
    pub weights: LossWeights,
    pub dice_eps: f64,
    pub dice_form: DiceForm,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            dice_eps: 1.0,
            dice_form: DiceForm::Dice,
        }
    }
}

/// `1 - (2 * sum(p*g) + eps) / (denominator + eps)` over all elements.
pub fn dice_graph<T: Real>(g: &mut Graph<T>, probs: Var, gt: Var, eps: f64, form: DiceForm) -> Result<Var> {
    let pg = g.mul(probs, gt)?;
    let inter = g.sum(pg);
    let sp = g.sum(probs);
    let sg = g.sum(gt);
    let num = g.scale(inter, T::of(2.0));
    let num = g.add_scalar(num, T::of(eps));
    let mut den = g.add(sp, sg)?;
    if form == DiceForm::Union {
        den = g.sub(den, inter)?;
    }
    let den = g.add_scalar(den, T::of(eps));
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

fn onehot<T: Real>(gt: &[u8]) -> Tensor<T> {
    let mut d = vec![T::zero(); gt.len() * 2];
    for (i, &v) in gt.iter().enumerate() {
        d[i * 2 + usize::from(v != 0)] = T::one();
    }
    Tensor::new(&[gt.len(), 2], d).expect("sized")
}

/// Mean per-cell two-class cross-entropy of `[cells, 2]` logits.
pub fn seg_ce_graph<T: Real>(g: &mut Graph<T>, logits: Var, gt: &[u8]) -> Result<Var> {
    if g.shape(logits) != [gt.len(), 2] {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} target cells",
            g.shape(logits),
            gt.len()
        )));
    }
    let ls = g.log_softmax(logits);
    let oh = g.constant(onehot(gt));
    let picked = g.mul(ls, oh)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one() / T::of(gt.len() as f64)))
}

#[derive(Debug, Clone, Copy)]
pub struct SegTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// `lambda1 * Dice + lambda2 * CE` for one mask.
pub fn seg_loss_graph<T: Real>(g: &mut Graph<T>, logits: Var, gt: &[u8], cfg: &SegLossConfig) -> Result<SegTerms> {
    let ce = seg_ce_graph(g, logits, gt)?;
    let probs = g.softmax(logits);
    let fg = g.slice_cols(probs, 1, 2)?;
    let gt_t = g.constant(Tensor::new(&[gt.len(), 1], gt.iter().map(|&v| T::of(f64::from(v))).collect())?);
    let dice = dice_graph(g, fg, gt_t, cfg.dice_eps, cfg.dice_form)?;
    let a = g.scale(dice, T::of(cfg.weights.lambda1));
    let b = g.scale(ce, T::of(cfg.weights.lambda2));
    let total = g.add(a, b)?;
    Ok(SegTerms { total, dice, ce })
}

/// Segmentation loss averaged over the maps of a logits batch (one mask per
/// camera for the image-space head, a single mask for the BEV head).
pub fn batched_seg_loss<T: Real>(g: &mut Graph<T>, logits: &SegLogits, masks: &[&Mask], cfg: &SegLossConfig) -> Result<Var> {
    let per = logits.sp.h * logits.sp.w;
    if masks.len() != logits.sp.n {
        return Err(Error::Shape(format!(
            "{} masks for {} logit maps",
            masks.len(),
            logits.sp.n
        )));
    }
    let mut terms = Vec::with_capacity(masks.len());
    for (b, m) in masks.iter().enumerate() {
        if m.h * m.w != per || m.h != logits.sp.h {
            return Err(Error::Shape(format!(
                "mask {}x{} vs logits {}x{}",
                m.h, m.w, logits.sp.h, logits.sp.w
            )));
        }
        let l = if masks.len() == 1 {
            logits.var
        } else {
            g.slice_rows(logits.var, b * per, (b + 1) * per)?
        };
        terms.push(seg_loss_graph(g, l, &m.data, cfg)?.total);
    }
    let cat = g.concat_rows(&terms)?;
    Ok(g.mean(cat))
}

/// Soft Dice loss of foreground probabilities against a binary target.
pub fn dice_loss(pred_probs: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    if pred_probs.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} cells, target {}",
            pred_probs.len(),
            gt.len()
        )));
    }
    if let Some(v) = pred_probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
    }
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[pred_probs.len()], pred_probs.to_vec())?);
    let t = g.constant(Tensor::new(&[gt.len()], gt.to_vec())?);
    let d = dice_graph(&mut g, p, t, eps, DiceForm::Dice)?;
    Ok(g.scalar_value(d))
}

/// Mean cross-entropy of `[cells, 2]` logits (row-major pairs).
pub fn seg_ce_loss(logits: &[f64], gt: &[u8]) -> Result<f64> {
    if logits.len() != 2 * gt.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} target cells",
            logits.len(),
            gt.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::new(&[gt.len(), 2], logits.to_vec())?);
    let ce = seg_ce_graph(&mut g, l, gt)?;
    Ok(g.scalar_value(ce))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLoss {
    #[default]
    Ce,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapLossConfig {
    pub weights: MatchWeights,
    pub cls_loss: ClsLoss,
    pub focal_gamma: f64,
}

impl Default for MapLossConfig {
    fn default() -> Self {
        Self {
            weights: MatchWeights::default(),
            cls_loss: ClsLoss::Ce,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapLossTerms {
    /// Weighted classification term summed over decoder layers.
    pub cls: Var,
    /// Weighted point term summed over decoder layers.
    pub pts: Var,
    /// Matching of every layer, in layer order.
    pub matches: Vec<MatchResult>,
}

/// Reads a decoder layer's current probabilities and normalized points.
pub fn layer_view<T: Real>(g: &Graph<T>, out: &LayerOutput, n_points: usize) -> (Vec<f64>, Vec<Vec<Point>>) {
    let mut probs = g.value(out.scores).to_f64_vec();
    for row in probs.chunks_mut(N_LOGITS) {
        crate::kernels::softmax_in_place(row);
    }
    let raw = g.value(out.points).to_f64_vec();
    let points = raw
        .chunks(2 * n_points)
        .map(|inst| inst.chunks(2).map(|c| [c[0], c[1]]).collect())
        .collect();
    (probs, points)
}

/// Matching-based loss of one decoder layer. Returns
/// `(w_cls * classification, w_pts * points, matching)`.
pub fn map_layer_loss<T: Real>(
    g: &mut Graph<T>,
    out: &LayerOutput,
    gts: &[GtTarget],
    n_points: usize,
    cfg: &MapLossConfig,
) -> Result<(Var, Var, MatchResult)> {
    let (probs, points) = layer_view(g, out, n_points);
    let n_inst = points.len();
    let view = PredView {
        probs: &probs,
        n_classes_bg: N_LOGITS,
        points: &points,
    };
    let m = hungarian_match(&view, gts, &cfg.weights)?;

    let mut labels = vec![N_LOGITS - 1; n_inst];
    for &(p, gi) in &m.pairs {
        labels[p] = gts[gi].cls.index();
    }
    let mut oh = vec![T::zero(); n_inst * N_LOGITS];
    for (i, &l) in labels.iter().enumerate() {
        oh[i * N_LOGITS + l] = T::one();
    }
    let oh = g.constant(Tensor::new(&[n_inst, N_LOGITS], oh)?);
    let ls = g.log_softmax(out.scores);
    let per_class = match cfg.cls_loss {
        ClsLoss::Ce => g.mul(ls, oh)?,
        ClsLoss::Focal => {
            let p = g.exp(ls);
            let q = g.scale(p, -T::one());
            let q = g.add_scalar(q, T::one());
            let mod_ = g.powf(q, T::of(cfg.focal_gamma));
            let t = g.mul(mod_, ls)?;
            g.mul(t, oh)?
        }
    };
    let s = g.sum(per_class);
    let cls = g.scale(s, T::of(-cfg.weights.w_cls / n_inst as f64));

    let pts = if m.pairs.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let mut target = vec![T::zero(); n_inst * n_points * 2];
        let mut mask = vec![T::zero(); n_inst * n_points * 2];
        for &(p, gi) in &m.pairs {
            let (_, oi) = gts[gi].best_ordering(&points[p]);
            for (j, q) in gts[gi].orderings[oi].iter().enumerate() {
                let k = (p * n_points + j) * 2;
                target[k] = T::of(q[0]);
                target[k + 1] = T::of(q[1]);
                mask[k] = T::one();
                mask[k + 1] = T::one();
            }
        }
        let shape = [n_inst * n_points, 2];
        let t = g.constant(Tensor::new(&shape, target)?);
        let mk = g.constant(Tensor::new(&shape, mask)?);
        let d = g.sub(out.points, t)?;
        let d = g.abs(d);
        let d = g.mul(d, mk)?;
        let s = g.sum(d);
        let denom = (m.pairs.len() * n_points * 2) as f64;
        g.scale(s, T::of(cfg.weights.w_pts / denom))
    };
    Ok((cls, pts, m))
}

/// Map loss with deep supervision: the per-layer losses of every decoder
/// layer, summed.
pub fn map_loss<T: Real>(
    g: &mut Graph<T>,
    outs: &[LayerOutput],
    gts: &[GtTarget],
    n_points: usize,
    cfg: &MapLossConfig,
) -> Result<MapLossTerms> {
    let mut cls_terms = Vec::with_capacity(outs.len());
    let mut pts_terms = Vec::with_capacity(outs.len());
    let mut matches = Vec::with_capacity(outs.len());
    for out in outs {
        let (c, p, m) = map_layer_loss(g, out, gts, n_points, cfg)?;
        cls_terms.push(c);
        pts_terms.push(p);
        matches.push(m);
    }
    let c = g.concat_rows(&cls_terms)?;
    let p = g.concat_rows(&pts_terms)?;
    Ok(MapLossTerms {
        cls: g.sum(c),
        pts: g.sum(p),
        matches,
    })
}

/// Named scalar losses with `seg = usm + bsm`, `maptr = maptr_cls +
/// maptr_pts` and `total = maptr + seg` holding exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub usm: f64,
    pub bsm: f64,
    pub seg: f64,
    pub maptr_cls: f64,
    pub maptr_pts: f64,
    pub maptr: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapTerms {
    pub cls: f64,
    pub pts: f64,
}

impl MapTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.pts
    }
}

pub fn total_loss(usm: f64, bsm: f64, maptr: MapTerms) -> Result<LossReport> {
    for (term, v) in [
        ("usm", usm),
        ("bsm", bsm),
        ("maptr_cls", maptr.cls),
        ("maptr_pts", maptr.pts),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term });
        }
    }
    let seg = usm + bsm;
    let m = maptr.total();
    let total = m + seg;
    if !total.is_finite() {
        return Err(Error::NonFinite { term: "total" });
    }
    Ok(LossReport {
        usm,
        bsm,
        seg,
        maptr_cls: maptr.cls,
        maptr_pts: maptr.pts,
        maptr: m,
        total,
    })
}

impl LossReport {
    /// Checks the additive identities bit-exactly.
    pub fn identities_hold(&self) -> bool {
        self.seg == self.usm + self.bsm
            && self.maptr == self.maptr_cls + self.maptr_pts
            && self.total == self.maptr + self.seg
    }

    /// Component-wise mean of several reports, re-deriving the sums.
    pub fn mean(reports: &[LossReport]) -> Result<LossReport> {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        total_loss(
            avg(|r| r.usm),
            avg(|r| r.bsm),
            MapTerms {
                cls: avg(|r| r.maptr_cls),
                pts: avg(|r| r.maptr_pts),
            },
        )
    }
}
