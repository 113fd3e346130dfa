//! Fixed-length resampling of map elements, permutation-equivalent point
//! orderings, and optimal prediction-to-ground-truth assignment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BevRange;
use crate::scene::{MapClass, MapElement};

pub type Point = [f64; 2];

fn seg_len(a: Point, b: Point) -> f64 {
    libm::hypot(b[0] - a[0], b[1] - a[1])
}

/// Arc-length-uniform resampling. Open polylines keep both endpoints;
/// closed rings start at the first vertex and space `n` points over the full
/// perimeter (the start is not repeated).
pub fn resample_polyline(points: &[Point], closed: bool, n: usize) -> Result<Vec<Point>> {
    if points.len() < 2 {
        return Err(Error::DegenerateGeometry("need at least two points to resample".into()));
    }
    if n == 0 {
        return Err(Error::Domain("cannot resample to zero points".into()));
    }
    let mut verts = points.to_vec();
    if closed {
        verts.push(points[0]);
    }
    let mut cum = Vec::with_capacity(verts.len());
    cum.push(0.0);
    for w in verts.windows(2) {
        let last = *cum.last().expect("non-empty");
        cum.push(last + seg_len(w[0], w[1]));
    }
    let total = *cum.last().expect("non-empty");
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry("element has zero length".into()));
    }
    let step = if closed {
        total / n as f64
    } else if n == 1 {
        0.0
    } else {
        total / (n - 1) as f64
    };
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        if !closed && i == n - 1 && n > 1 {
            out.push(*verts.last().expect("non-empty"));
            break;
        }
        let s = step * i as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let (a, b) = (verts[seg], verts[seg + 1]);
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

pub fn resample_element(element: &MapElement, n_points: usize) -> Result<Vec<Point>> {
    resample_polyline(&element.points, element.closed, n_points)
}

/// Orderings of a fixed-length point sequence that describe the same
/// element: forward and reversed for polylines; every cyclic shift in both
/// directions for closed rings.
pub fn equivalent_orderings(points: &[Point], closed: bool) -> Vec<Vec<Point>> {
    let rev: Vec<Point> = points.iter().rev().copied().collect();
    if !closed {
        return vec![points.to_vec(), rev];
    }
    let n = points.len();
    let mut out = Vec::with_capacity(2 * n);
    for base in [points, rev.as_slice()] {
        for shift in 0..n {
            out.push((0..n).map(|i| base[(i + shift) % n]).collect());
        }
    }
    out
}

/// Mean absolute coordinate difference between two equal-length sequences.
pub fn point_cost(pred: &[Point], target: &[Point]) -> f64 {
    let mut s = 0.0;
    for (a, b) in pred.iter().zip(target) {
        s += (a[0] - b[0]).abs();
        s += (a[1] - b[1]).abs();
    }
    s / (2 * pred.len()) as f64
}

/// Ground-truth element prepared for matching: its class and every
/// equivalent ordering of its resampled points, in normalized BEV
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTarget {
    pub cls: MapClass,
    pub orderings: Vec<Vec<Point>>,
}

impl GtTarget {
    /// From a sequence already resampled to the decoder's point count, in
    /// meters.
    pub fn from_resampled(cls: MapClass, points_m: &[Point], closed: bool, range: &BevRange) -> Self {
        let norm: Vec<Point> = points_m.iter().map(|&p| range.normalize(p)).collect();
        Self {
            cls,
            orderings: equivalent_orderings(&norm, closed),
        }
    }

    pub fn from_element(e: &MapElement, n_points: usize, range: &BevRange) -> Result<Self> {
        let pts = resample_element(e, n_points)?;
        Ok(Self::from_resampled(e.cls, &pts, e.closed, range))
    }

    /// Lowest cost over orderings and the first ordering achieving it.
    pub fn best_ordering(&self, pred: &[Point]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, o) in self.orderings.iter().enumerate() {
            let c = point_cost(pred, o);
            if c < best.0 {
                best = (c, i);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_pts: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { w_cls: 2.0, w_pts: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(pred_index, gt_index)`, ordered by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub total_cost: f64,
}

/// Per-instance class probabilities and normalized points, read off a
/// decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredView<'a> {
    /// `[n_instances, n_classes + 1]` probabilities (background last).
    pub probs: &'a [f64],
    pub n_classes_bg: usize,
    /// `[n_instances][n_points]` normalized points.
    pub points: &'a [Vec<Point>],
}

/// `cost[g][p] = -w_cls * prob(p, class of g) + w_pts * min-ordering cost`.
pub fn cost_matrix(pred: &PredView<'_>, gt: &[GtTarget], w: &MatchWeights) -> Vec<f64> {
    let np = pred.points.len();
    let mut cost = vec![0.0; gt.len() * np];
    for (gi, t) in gt.iter().enumerate() {
        for pi in 0..np {
            let prob = pred.probs[pi * pred.n_classes_bg + t.cls.index()];
            let (pc, _) = t.best_ordering(&pred.points[pi]);
            cost[gi * np + pi] = -w.w_cls * prob + w.w_pts * pc;
        }
    }
    cost
}

/// Minimum-cost assignment of every row to a distinct column, `rows <= cols`.
///
/// Shortest augmenting paths with row/column potentials, O(rows^2 * cols).
/// Columns are scanned in increasing order and only strictly better
/// candidates replace the current one, so ties go to the lowest column.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "hungarian needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Sum of `cost[row][assign[row]]` in row order.
pub fn assignment_cost(cost: &[f64], cols: usize, assign: &[usize]) -> f64 {
    let mut s = 0.0;
    for (r, &c) in assign.iter().enumerate() {
        s += cost[r * cols + c];
    }
    s
}

/// Optimal one-to-one matching of predictions to ground truth.
pub fn hungarian_match(pred: &PredView<'_>, gt: &[GtTarget], w: &MatchWeights) -> Result<MatchResult> {
    let np = pred.points.len();
    if pred.probs.len() != np * pred.n_classes_bg {
        return Err(Error::Shape(format!(
            "{} probabilities for {np} predictions",
            pred.probs.len()
        )));
    }
    let cost = cost_matrix(pred, gt, w);
    let ng = gt.len();
    let mut pairs: Vec<(usize, usize)> = if ng <= np {
        let a = hungarian(&cost, ng, np);
        a.iter().enumerate().map(|(g, &p)| (p, g)).collect()
    } else {
        let mut t = vec![0.0; np * ng];
        for g in 0..ng {
            for p in 0..np {
                t[p * ng + g] = cost[g * np + p];
            }
        }
        let a = hungarian(&t, np, ng);
        a.iter().enumerate().map(|(p, &g)| (p, g)).collect()
    };
    pairs.sort_by_key(|&(_, g)| g);
    let total_cost = pairs.iter().map(|&(p, g)| cost[g * np + p]).fold(0.0, |a, c| a + c);
    let mut matched = vec![false; np];
    pairs.iter().for_each(|&(p, _)| matched[p] = true);
    Ok(MatchResult {
        unmatched_preds: (0..np).filter(|&p| !matched[p]).collect(),
        pairs,
        total_cost,
    })
}
