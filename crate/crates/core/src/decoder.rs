//! Query-based vector map decoder.
//!
//! Each of `n_instances * n_points` queries is the sum of an instance
//! embedding and a point embedding. Every decoder layer runs self-attention
//! among queries, cross-attention into the BEV map and a feed-forward block
//! (post-norm). Shared heads read class logits (mean over an instance's point
//! queries) and one point per query after every layer.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Frame};
use crate::geometry::BevRange;
use crate::graph::{Graph, Var};
use crate::kernels::SparseMap;
use crate::matching::Point;
use crate::nn::{Linear, Norm, ParamId, ParamStore};
use crate::real::Real;

pub const N_CLASSES: usize = 3;
/// Class logits per instance: three map classes plus background (last).
pub const N_LOGITS: usize = N_CLASSES + 1;

#[derive(Debug, Clone)]
pub struct MapQuerySet {
    pub n_instances: usize,
    pub n_points: usize,
    pub instance: ParamId,
    pub point: ParamId,
}

impl MapQuerySet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, n_instances: usize, n_points: usize, d_model: usize) -> Self {
        Self {
            n_instances,
            n_points,
            instance: store.add_uniform("decoder.query.instance", &[n_instances, d_model], 1.0),
            point: store.add_uniform("decoder.query.point", &[n_points, d_model], 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.n_instances * self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[n_instances * n_points, d_model]` with row `i * n_points + j`
    /// equal to `instance[i] + point[j]`.
    pub fn embeddings<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let table = g.concat_rows(&[p[self.instance.index()], p[self.point.index()]])?;
        let rows: Vec<Vec<(usize, f64)>> = (0..self.len())
            .map(|q| {
                let (i, j) = (q / self.n_points, q % self.n_points);
                vec![(i, 1.0), (self.n_instances + j, 1.0)]
            })
            .collect();
        let map = Arc::new(SparseMap::from_rows(self.n_instances + self.n_points, &rows));
        g.sparse(table, map)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm_self: Norm,
    cross_attn: MultiHeadAttention,
    norm_cross: Norm,
    ff_in: Linear,
    ff_out: Linear,
    norm_ff: Norm,
}

impl DecoderLayer {
    fn new<T: Real>(store: &mut ParamStore<T>, i: usize, d: usize, heads: usize, ffn: usize) -> Self {
        let n = |s: &str| format!("decoder.layer{i}.{s}");
        Self {
            self_attn: MultiHeadAttention::new(store, &n("self_attn"), d, heads),
            norm_self: Norm::new(store, &n("norm_self"), d, true),
            cross_attn: MultiHeadAttention::new(store, &n("cross_attn"), d, heads),
            norm_cross: Norm::new(store, &n("norm_cross"), d, true),
            ff_in: Linear::new(store, &n("ff_in"), d, ffn, true),
            ff_out: Linear::new(store, &n("ff_out"), ffn, d, true),
            norm_ff: Norm::new(store, &n("norm_ff"), d, true),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], h: Var, qpos: Var, mem_key: Var, mem: Var) -> Result<Var> {
        let qk = g.add(h, qpos)?;
        let a = self.self_attn.forward(g, p, qk, qk, h)?;
        let h = g.add(h, a)?;
        let h = self.norm_self.forward(g, p, h)?;
        let q = g.add(h, qpos)?;
        let a = self.cross_attn.forward(g, p, q, mem_key, mem)?;
        let h = g.add(h, a)?;
        let h = self.norm_cross.forward(g, p, h)?;
        let f = self.ff_in.forward(g, p, h)?;
        let f = g.relu(f);
        let f = self.ff_out.forward(g, p, f)?;
        let h = g.add(h, f)?;
        self.norm_ff.forward(g, p, h)
    }
}

/// Graph outputs of one decoder layer's heads.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `[n_instances, N_LOGITS]`.
    pub scores: Var,
    /// `[n_instances * n_points, 2]`, normalized to `[0, 1]` over the range.
    pub points: Var,
}

#[derive(Debug, Clone)]
pub struct MapDecoder {
    pub queries: MapQuerySet,
    layers: Vec<DecoderLayer>,
    cls_head: Linear,
    pt_hidden: Linear,
    pt_out: Linear,
    pub d_model: usize,
}

impl MapDecoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        d_model: usize,
        n_instances: usize,
        n_points: usize,
        n_layers: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        let queries = MapQuerySet::new(store, n_instances, n_points, d_model);
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(store, i, d_model, heads, ffn))
            .collect();
        Self {
            queries,
            layers,
            cls_head: Linear::new(store, "decoder.cls_head", d_model, N_LOGITS, true),
            pt_hidden: Linear::new(store, "decoder.pt_hidden", d_model, d_model, true),
            pt_out: Linear::new(store, "decoder.pt_out", d_model, 2, true),
            d_model,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn heads<T: Real>(&self, g: &mut Graph<T>, p: &[Var], h: Var) -> Result<LayerOutput> {
        let q = &self.queries;
        let rows: Vec<Vec<(usize, f64)>> = (0..q.n_instances)
            .map(|i| {
                (0..q.n_points)
                    .map(|j| (i * q.n_points + j, 1.0 / q.n_points as f64))
                    .collect()
            })
            .collect();
        let pooled = g.sparse(h, Arc::new(SparseMap::from_rows(q.len(), &rows)))?;
        let scores = self.cls_head.forward(g, p, pooled)?;
        let t = self.pt_hidden.forward(g, p, h)?;
        let t = g.relu(t);
        let t = self.pt_out.forward(g, p, t)?;
        let points = g.sigmoid(t);
        Ok(LayerOutput { scores, points })
    }

    /// Runs every layer; returns one head output per layer (last = final).
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &[Var], y_bev: &FeatureMap, bev_pos: Var) -> Result<Vec<LayerOutput>> {
        y_bev.frame.expect(Frame::Bev)?;
        if y_bev.c != self.d_model {
            return Err(Error::Shape(format!(
                "decoder expects {} BEV channels, got {}",
                self.d_model, y_bev.c
            )));
        }
        let qpos = self.queries.embeddings(g, p)?;
        let mem_key = g.add(y_bev.var, bev_pos)?;
        let mut h = qpos;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(g, p, h, qpos, mem_key, y_bev.var)?;
            outs.push(self.heads(g, p, h)?);
        }
        Ok(outs)
    }
}

/// Decoder output read back from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPrediction {
    pub n_instances: usize,
    pub n_points: usize,
    /// `[n_instances, N_LOGITS]` logits, background last.
    pub scores: Vec<f64>,
    /// `[n_instances][n_points]` points in BEV meters.
    pub points: Vec<Vec<Point>>,
}

impl MapPrediction {
    pub fn from_layer<T: Real>(g: &Graph<T>, out: &LayerOutput, n_points: usize, range: &BevRange) -> Self {
        let scores: Vec<f64> = g.value(out.scores).to_f64_vec();
        let n_instances = scores.len() / N_LOGITS;
        let pts = g.value(out.points).to_f64_vec();
        let points = (0..n_instances)
            .map(|i| {
                (0..n_points)
                    .map(|j| {
                        let k = (i * n_points + j) * 2;
                        range.denormalize([pts[k], pts[k + 1]])
                    })
                    .collect()
            })
            .collect();
        Self {
            n_instances,
            n_points,
            scores,
            points,
        }
    }

    /// Softmax over each instance's logits.
    pub fn probs(&self) -> Vec<f64> {
        let mut out = self.scores.clone();
        for row in out.chunks_mut(N_LOGITS) {
            crate::kernels::softmax_in_place(row);
        }
        out
    }

    pub fn normalized_points(&self, range: &BevRange) -> Vec<Vec<Point>> {
        self.points
            .iter()
            .map(|ps| ps.iter().map(|&p| range.normalize(p)).collect())
            .collect()
    }
}
