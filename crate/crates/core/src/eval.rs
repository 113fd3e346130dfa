//! Chamfer-distance average precision per map class, and the ablation
//! report rows and tables.
//!
//! Per class and threshold, detections from all frames are ranked by score
//! (ties broken by frame, then by detection index). Each detection is
//! compared against the nearest ground-truth element of its class in the
//! same frame: a true positive if that element is within the threshold and
//! not yet claimed, otherwise a false positive. AP integrates the
//! precision envelope over recall. Classes without any ground truth are
//! skipped and reported as `None`; `map` is the mean over the remaining
//! classes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::MapPrediction;
use crate::error::{Error, Result};
use crate::matching::{resample_polyline, Point};
use crate::scene::{MapClass, MapElement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Chamfer thresholds in meters, strictly increasing.
    pub thresholds: Vec<f64>,
    /// Detections scoring below this are dropped.
    pub score_min: f64,
    /// Points each element is resampled to before computing chamfer.
    pub n_sample_points: usize,
    pub interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 1.5],
            score_min: 0.0,
            n_sample_points: 100,
            interpolation: ApInterpolation::AllPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("eval.thresholds must not be empty".into()));
        }
        if self.thresholds[0] <= 0.0 || self.thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(format!(
                "eval.thresholds must be positive and strictly increasing, got {:?}",
                self.thresholds
            )));
        }
        if self.n_sample_points < 2 {
            return Err(Error::Config("eval.n_sample_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// Symmetric mean nearest-neighbour distance.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("chamfer distance of an empty point set".into()));
    }
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

fn directed(a: &[Point], b: &[Point]) -> f64 {
    let mut s = 0.0;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
            if d < best {
                best = d;
            }
        }
        s += libm::sqrt(best);
    }
    s / a.len() as f64
}

/// One scored vector element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cls: MapClass,
    pub score: f64,
    /// Points in BEV meters; pedestrian crossings are read as closed rings.
    pub points: Vec<Point>,
}

impl Detection {
    pub fn closed(&self) -> bool {
        self.cls == MapClass::PedCrossing
    }
}

impl From<&MapElement> for Detection {
    fn from(e: &MapElement) -> Self {
        Self {
            cls: e.cls,
            score: 1.0,
            points: e.points.clone(),
        }
    }
}

/// Each instance becomes one detection of its most probable map class
/// (background excluded), scored by that class probability.
pub fn detections(pred: &MapPrediction, score_min: f64) -> Vec<Detection> {
    let probs = pred.probs();
    let k = probs.len() / pred.n_instances.max(1);
    let mut out = Vec::new();
    for (i, pts) in pred.points.iter().enumerate() {
        let row = &probs[i * k..i * k + MapClass::ALL.len()];
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if row[best] >= score_min {
            out.push(Detection {
                cls: MapClass::from_index(best).expect("class index"),
                score: row[best],
                points: pts.clone(),
            });
        }
    }
    out
}

/// Resamples for chamfer computation; a zero-length element collapses to its
/// first point.
fn sample(points: &[Point], closed: bool, n: usize) -> Vec<Point> {
    match resample_polyline(points, closed, n) {
        Ok(p) => p,
        Err(_) => points.first().map(|&p| vec![p]).unwrap_or_default(),
    }
}

/// Per-class AP averaged over thresholds, and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In class order; `None` when a class has no ground truth.
    pub per_class_ap: [Option<f64>; 3],
    /// `[class][threshold]`.
    pub per_threshold_ap: [Vec<Option<f64>>; 3],
    pub map: f64,
}

/// AP for one class at one threshold. `dists[f][d][g]` is the chamfer
/// distance of detection `d` to ground-truth element `g` in frame `f`.
fn class_ap(
    scores: &[Vec<f64>],
    dists: &[Vec<Vec<f64>>],
    n_gt: &[usize],
    thr: f64,
    interp: ApInterpolation,
) -> Option<f64> {
    let total_gt: usize = n_gt.iter().sum();
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (f, s) in scores.iter().enumerate() {
        order.extend((0..s.len()).map(|d| (f, d)));
    }
    order.sort_by(|&(fa, da), &(fb, db)| {
        scores[fb][db]
            .partial_cmp(&scores[fa][da])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then((fa, da).cmp(&(fb, db)))
    });
    let mut used: Vec<Vec<bool>> = n_gt.iter().map(|&n| vec![false; n]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &(f, d) in &order {
        let row = &dists[f][d];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &dist) in row.iter().enumerate() {
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((gi, dist));
            }
        }
        let tp = match best {
            Some((gi, dist)) if dist <= thr && !used[f][gi] => {
                used[f][gi] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(tp);
    }
    Some(average_precision(&tp_flags, total_gt, interp))
}

/// AP of a ranked list of true/false positive flags against `n_gt`
/// ground-truth elements.
pub fn average_precision(tp_flags: &[bool], n_gt: usize, interp: ApInterpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut tps = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += usize::from(f);
        prec.push(tp as f64 / (i + 1) as f64);
        tps.push(tp);
    }
    // Precision envelope: running max from the end.
    for i in (0..prec.len().saturating_sub(1)).rev() {
        if prec[i + 1] > prec[i] {
            prec[i] = prec[i + 1];
        }
    }
    match interp {
        ApInterpolation::AllPoint => {
            let s: f64 = tp_flags
                .iter()
                .zip(&prec)
                .filter(|(f, _)| **f)
                .fold(0.0, |acc, (_, p)| acc + p);
            s / n_gt as f64
        }
        ApInterpolation::ElevenPoint => {
            let mut s = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let p = tps
                    .iter()
                    .zip(&prec)
                    .filter(|(t, _)| **t as f64 / n_gt as f64 >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                s += p;
            }
            s / 11.0
        }
    }
}

/// Evaluates per-frame detections against per-frame ground truth.
pub fn evaluate(preds: &[Vec<Detection>], gts: &[Vec<MapElement>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let n = cfg.n_sample_points;
    let mut per_class_ap = [None; 3];
    let mut per_threshold_ap: [Vec<Option<f64>>; 3] = Default::default();
    for cls in MapClass::ALL {
        let closed = cls == MapClass::PedCrossing;
        let mut scores = Vec::with_capacity(preds.len());
        let mut dists = Vec::with_capacity(preds.len());
        let mut n_gt = Vec::with_capacity(preds.len());
        for (fp, fg) in preds.iter().zip(gts) {
            let g: Vec<Vec<Point>> = fg
                .iter()
                .filter(|e| e.cls == cls)
                .map(|e| sample(&e.points, e.closed, n))
                .collect();
            let dets: Vec<&Detection> = fp
                .iter()
                .filter(|d| d.cls == cls && d.score >= cfg.score_min)
                .collect();
            let mut fd = Vec::with_capacity(dets.len());
            for d in &dets {
                let s = sample(&d.points, closed, n);
                let row = g
                    .iter()
                    .map(|gp| chamfer_distance(&s, gp))
                    .collect::<Result<Vec<f64>>>()?;
                fd.push(row);
            }
            scores.push(dets.iter().map(|d| d.score).collect::<Vec<_>>());
            dists.push(fd);
            n_gt.push(g.len());
        }
        let aps: Vec<Option<f64>> = cfg
            .thresholds
            .iter()
            .map(|&t| class_ap(&scores, &dists, &n_gt, t, cfg.interpolation))
            .collect();
        let c = cls.index();
        per_class_ap[c] = if aps.iter().all(Option::is_some) {
            Some(aps.iter().flatten().sum::<f64>() / aps.len() as f64)
        } else {
            None
        };
        per_threshold_ap[c] = aps;
    }
    let map = class_mean(&per_class_ap);
    Ok(EvalReport {
        per_class_ap,
        per_threshold_ap,
        map,
    })
}

/// AP at a single threshold, averaged over the classes that have ground
/// truth.
impl EvalReport {
    pub fn map_at(&self, threshold_index: usize) -> f64 {
        let v: [Option<f64>; 3] = core::array::from_fn(|c| self.per_threshold_ap[c].get(threshold_index).copied().flatten());
        class_mean(&v)
    }
}

/// Mean over the classes that are present; 0 when none are.
pub fn class_mean(aps: &[Option<f64>; 3]) -> f64 {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum RowStatus {
    Ok,
    Failed(String),
}

/// One line of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Input image size `(H, W)` in pixels.
    pub size: (usize, usize),
    pub per_class_ap: [Option<f64>; 3],
    pub map: f64,
    pub status: RowStatus,
}

impl AblationRow {
    pub fn from_report(label: &str, size: (usize, usize), r: &EvalReport) -> Self {
        Self {
            label: label.into(),
            size,
            per_class_ap: r.per_class_ap,
            map: r.map,
            status: RowStatus::Ok,
        }
    }

    pub fn failed(label: &str, size: (usize, usize), reason: String) -> Self {
        Self {
            label: label.into(),
            size,
            per_class_ap: [None; 3],
            map: 0.0,
            status: RowStatus::Failed(reason),
        }
    }

    /// `|map - mean(present class APs)|`.
    pub fn mean_gap(&self) -> f64 {
        (self.map - class_mean(&self.per_class_ap)).abs()
    }
}

pub const TABLE_COLUMNS: [&str; 4] = ["ped crossing", "divider", "boundary", "map"];

/// Plain-text table: a header naming the first column (e.g. `Module` or
/// `backbone`), then `size` and the four metric columns.
pub fn render_table(first_column: &str, rows: &[AblationRow]) -> String {
    let mut header: Vec<String> = vec![first_column.into(), "size".into()];
    header.extend(TABLE_COLUMNS.iter().map(|s| String::from(*s)));
    let mut body: Vec<Vec<String>> = Vec::new();
    for r in rows {
        let mut line = vec![r.label.clone(), format!("{}x{}", r.size.0, r.size.1)];
        match &r.status {
            RowStatus::Ok => {
                for ap in r.per_class_ap {
                    line.push(ap.map_or_else(|| "-".into(), |v| format!("{v:.4}")));
                }
                line.push(format!("{:.4}", r.map));
            }
            RowStatus::Failed(reason) => {
                for _ in 0..3 {
                    line.push("-".into());
                }
                line.push(format!("failed: {reason}"));
            }
        }
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|l| l[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let fmt_line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "| {} |", parts.join(" | "));
    };
    fmt_line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    fmt_line(&mut out, &rule);
    for l in &body {
        fmt_line(&mut out, l);
    }
    out
}
