//! BEV segmentation head and the semantic guidance block.
//!
//! The guidance block lets segmentation features choose which BEV cells to
//! read: queries come from the segmentation branch, keys and values from the
//! encoded BEV features,
//!
//! ```text
//! G = softmax(f_Q(O) f_K(X)^T / sqrt(d_k)) f_V(X)
//! Y = [G, X]            (channel concatenation, G first)
//! ```
//!
//! and `Y` is projected back to `d_model` channels for the decoder.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::AsppHead;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Frame, SegLogits};
use crate::graph::{Graph, Var};
use crate::kernels::{self, AttnGeom};
use crate::nn::{Linear, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Penultimate BEV segmentation features (`d_model` channels).
    #[default]
    Features,
    /// The two segmentation logits.
    Logits,
}

#[derive(Debug, Clone)]
pub struct BsmHead {
    head: AsppHead,
}

impl BsmHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d_model: usize) -> Self {
        Self {
            head: AsppHead::new(store, "bsm", d_model, true),
        }
    }

    /// Logits at BEV resolution and the penultimate feature map.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x_bev: &FeatureMap) -> Result<(SegLogits, FeatureMap)> {
        x_bev.frame.expect(Frame::Bev)?;
        let (logits, feat) = self.head.forward(g, p, x_bev.var, x_bev.sp)?;
        Ok((
            SegLogits {
                var: logits,
                sp: x_bev.sp,
                frame: Frame::Bev,
            },
            FeatureMap {
                var: feat,
                c: self.head.c,
                ..*x_bev
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Sgm {
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub fuse: Linear,
    pub d_k: usize,
    pub d_model: usize,
    pub source: QuerySource,
}

/// Guidance outputs for one frame.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceOutput {
    pub o_bev: SegLogits,
    pub o_feat: FeatureMap,
    /// Attention output, `d_model` channels.
    pub g_bev: FeatureMap,
    /// `[G, X]` before projection, `2 * d_model` channels.
    pub y_concat: FeatureMap,
    /// Projected back to `d_model` channels; what the decoder reads.
    pub y_bev: FeatureMap,
}

impl Sgm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d_model: usize, d_k: usize, source: QuerySource) -> Self {
        let q_in = match source {
            QuerySource::Features => d_model,
            QuerySource::Logits => 2,
        };
        Self {
            f_q: Linear::new(store, "sgm.f_q", q_in, d_k, true),
            f_k: Linear::new(store, "sgm.f_k", d_model, d_k, true),
            f_v: Linear::new(store, "sgm.f_v", d_model, d_model, true),
            fuse: Linear::new(store, "sgm.fuse", 2 * d_model, d_model, true),
            d_k,
            d_model,
            source,
        }
    }

    fn check_pair(o_source: &FeatureMap, x_bev: &FeatureMap) -> Result<()> {
        x_bev.frame.expect(Frame::Bev)?;
        o_source.frame.expect(Frame::Bev)?;
        if o_source.sp != x_bev.sp {
            return Err(Error::Shape(format!(
                "guidance inputs differ spatially: {:?} vs {:?}",
                o_source.sp, x_bev.sp
            )));
        }
        Ok(())
    }

    fn scale<T: Real>(&self) -> T {
        T::one() / T::of(self.d_k as f64).sqrt()
    }

    /// Single-head cross-attention over BEV cells. No positional code is
    /// involved, so permuting the cells of both inputs permutes the output.
    pub fn attend<T: Real>(&self, g: &mut Graph<T>, p: &[Var], o_source: &FeatureMap, x_bev: &FeatureMap) -> Result<FeatureMap> {
        Self::check_pair(o_source, x_bev)?;
        let q = self.f_q.forward(g, p, o_source.var)?;
        let k = self.f_k.forward(g, p, x_bev.var)?;
        let v = self.f_v.forward(g, p, x_bev.var)?;
        let out = g.attention(q, k, v, 1, self.scale())?;
        Ok(FeatureMap {
            var: out,
            c: self.d_model,
            ..*x_bev
        })
    }

    /// Attention weights `[cells, cells]` that [`Sgm::attend`] applies, for
    /// inspection.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, p: &[Var], o_source: &FeatureMap, x_bev: &FeatureMap) -> Result<Vec<T>> {
        Self::check_pair(o_source, x_bev)?;
        let q = self.f_q.forward(g, p, o_source.var)?;
        let k = self.f_k.forward(g, p, x_bev.var)?;
        let cells = x_bev.sp.cells();
        let geom = AttnGeom {
            n_query: cells,
            n_key: cells,
            heads: 1,
            d_k: self.d_k,
            d_v: self.d_k,
        };
        Ok(kernels::attention_weights(
            g.value(q).data(),
            g.value(k).data(),
            &geom,
            self.scale(),
        ))
    }

    /// Returns `([G, X], projection of [G, X])`.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, p: &[Var], g_bev: &FeatureMap, x_bev: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        if g_bev.sp != x_bev.sp {
            return Err(Error::Shape(format!(
                "cannot concatenate maps of size {:?} and {:?}",
                g_bev.sp, x_bev.sp
            )));
        }
        let cat = g.concat_cols(&[g_bev.var, x_bev.var])?;
        let y = self.fuse.forward(g, p, cat)?;
        Ok((
            FeatureMap {
                var: cat,
                c: g_bev.c + x_bev.c,
                ..*x_bev
            },
            FeatureMap {
                var: y,
                c: self.d_model,
                ..*x_bev
            },
        ))
    }

    /// Query source map for this block's configuration.
    pub fn source_map(&self, o_bev: &SegLogits, o_feat: &FeatureMap) -> FeatureMap {
        match self.source {
            QuerySource::Features => *o_feat,
            QuerySource::Logits => FeatureMap {
                var: o_bev.var,
                c: 2,
                ..*o_feat
            },
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        o_bev: SegLogits,
        o_feat: FeatureMap,
        x_bev: &FeatureMap,
    ) -> Result<GuidanceOutput> {
        let src = self.source_map(&o_bev, &o_feat);
        let g_bev = self.attend(g, p, &src, x_bev)?;
        let (y_concat, y_bev) = self.fuse(g, p, &g_bev, x_bev)?;
        Ok(GuidanceOutput {
            o_bev,
            o_feat,
            g_bev,
            y_concat,
            y_bev,
        })
    }
}
