//! Shared image backbone with a two-level feature pyramid, and the ASPP-lite
//! segmentation head used for both the image-space (USM) and BEV-space (BSM)
//! auxiliaries.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Frame, SegLogits};
use crate::graph::{Graph, Var};
use crate::nn::{self, Conv2d, Linear, Norm, ParamStore, Spatial};
use crate::real::Real;

/// Total downsampling of [`Backbone::forward`].
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: Norm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, stride, dilation, bias),
            norm: Norm::new(store, &format!("{name}.norm"), c_out, bias),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, sp: Spatial) -> Result<(Var, Spatial)> {
        let (y, sp) = self.conv.forward(g, p, x, sp)?;
        let y = self.norm.forward(g, p, y)?;
        Ok((g.relu(y), sp))
    }
}

/// Three stages of two 3x3 conv blocks (the first strided), followed by a
/// fusion of the last two stages at stride 8.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<[ConvBlock; 2]>,
    lateral_mid: Linear,
    lateral_top: Linear,
    smooth: ConvBlock,
    pub d_model: usize,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, widths: [usize; 3], d_model: usize, bias: bool) -> Self {
        let mut stages = Vec::with_capacity(3);
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            stages.push([
                ConvBlock::new(store, &format!("backbone.s{i}.b0"), c_in, w, 2, 1, bias),
                ConvBlock::new(store, &format!("backbone.s{i}.b1"), w, w, 1, 1, bias),
            ]);
            c_in = w;
        }
        Self {
            stages,
            lateral_mid: Linear::new(store, "fpn.lateral_mid", widths[1], d_model, bias),
            lateral_top: Linear::new(store, "fpn.lateral_top", widths[2], d_model, bias),
            smooth: ConvBlock::new(store, "fpn.smooth", d_model, d_model, 1, 1, bias),
            d_model,
        }
    }

    /// `images`: `[n*h*w, 3]` channel-last pixels in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], images: Var, sp: Spatial) -> Result<FeatureMap> {
        if !sp.h.is_multiple_of(BACKBONE_STRIDE) || !sp.w.is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Shape(format!(
                "image size {}x{} must be divisible by {BACKBONE_STRIDE}",
                sp.h, sp.w
            )));
        }
        let (mut x, mut s) = (images, sp);
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                (x, s) = block.forward(g, p, x, s)?;
            }
            outs.push((x, s));
        }
        let (mid, mid_sp) = outs[1];
        let (top, top_sp) = outs[2];
        let (pool, pooled_sp) = nn::avg_pool2::<T>(mid_sp);
        debug_assert_eq!(pooled_sp, top_sp);
        let mid = g.sparse(mid, pool)?;
        let a = self.lateral_mid.forward(g, p, mid)?;
        let b = self.lateral_top.forward(g, p, top)?;
        let fused = g.add(a, b)?;
        let (y, ysp) = self.smooth.forward(g, p, fused, top_sp)?;
        Ok(FeatureMap {
            var: y,
            sp: ysp,
            c: self.d_model,
            frame: Frame::Uv,
            stride: BACKBONE_STRIDE,
        })
    }
}

/// Parallel dilated 3x3 convs (rates 1, 2, 4) plus a global-pooling branch,
/// fused by a 1x1 projection; a final 1x1 maps to two logits.
#[derive(Debug, Clone)]
pub struct AsppHead {
    branches: Vec<ConvBlock>,
    pool: Linear,
    fuse: Linear,
    fuse_norm: Norm,
    classify: Linear,
    pub c: usize,
}

pub const ASPP_RATES: [usize; 3] = [1, 2, 4];

impl AsppHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, bias: bool) -> Self {
        Self {
            branches: ASPP_RATES
                .iter()
                .map(|&r| ConvBlock::new(store, &format!("{name}.aspp{r}"), c, c, 1, r, bias))
                .collect(),
            pool: Linear::new(store, &format!("{name}.pool"), c, c, bias),
            fuse: Linear::new(store, &format!("{name}.fuse"), 4 * c, c, bias),
            fuse_norm: Norm::new(store, &format!("{name}.fuse_norm"), c, bias),
            classify: Linear::new(store, &format!("{name}.classify"), c, 2, true),
            c,
        }
    }

    /// Returns `(logits [cells, 2], penultimate features [cells, c])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, sp: Spatial) -> Result<(Var, Var)> {
        let mut parts = Vec::with_capacity(4);
        for b in &self.branches {
            parts.push(b.forward(g, p, x, sp)?.0);
        }
        let pooled = g.sparse(x, nn::global_mean::<T>(sp))?;
        let pooled = self.pool.forward(g, p, pooled)?;
        let pooled = g.relu(pooled);
        parts.push(g.sparse(pooled, nn::broadcast::<T>(sp))?);
        let cat = g.concat_cols(&parts)?;
        let f = self.fuse.forward(g, p, cat)?;
        let f = self.fuse_norm.forward(g, p, f)?;
        let feat = g.relu(f);
        let logits = self.classify.forward(g, p, feat)?;
        Ok((logits, feat))
    }
}

/// Image-space segmentation auxiliary. Its outputs only feed the training
/// loss; nothing downstream of the backbone reads them.
#[derive(Debug, Clone)]
pub struct UsmHead {
    head: AsppHead,
}

impl UsmHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d_model: usize, bias: bool) -> Self {
        Self {
            head: AsppHead::new(store, "usm", d_model, bias),
        }
    }

    /// Logits bilinearly upsampled to image resolution, plus the
    /// penultimate feature map at feature resolution.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], feat: &FeatureMap) -> Result<(SegLogits, FeatureMap)> {
        feat.frame.expect(Frame::Uv)?;
        let (logits, pen) = self.head.forward(g, p, feat.var, feat.sp)?;
        let (up, up_sp) = nn::bilinear_resize::<T>(feat.sp, feat.sp.h * feat.stride, feat.sp.w * feat.stride);
        let logits = g.sparse(logits, up)?;
        Ok((
            SegLogits {
                var: logits,
                sp: up_sp,
                frame: Frame::Uv,
            },
            FeatureMap {
                var: pen,
                c: feat.c,
                ..*feat
            },
        ))
    }
}
