//! Lifting camera features onto the BEV grid by inverse perspective mapping,
//! and the single-layer BEV self-attention encoder.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Frame};
use crate::geometry::{BevGrid, CameraRig};
use crate::graph::{Graph, Var};
use crate::kernels::SparseMap;
use crate::nn::{self, Linear, Norm, ParamStore, Spatial};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sampling plan for [`ipm_lift`]: one sparse row per BEV cell holding the
/// bilinear taps of every camera that sees the cell center, each scaled by
/// `1 / visible_count`.
#[derive(Debug, Clone)]
pub struct IpmPlan<T> {
    pub map: Arc<SparseMap<T>>,
    /// Number of cameras seeing each cell.
    pub visible: Vec<u8>,
}

pub fn ipm_plan<T: Real>(rig: &CameraRig, grid: &BevGrid, feat_sp: Spatial, stride: usize) -> Result<IpmPlan<T>> {
    if feat_sp.n != rig.cameras.len() {
        return Err(Error::Config(format!(
            "{} feature maps for a rig of {} cameras",
            feat_sp.n,
            rig.cameras.len()
        )));
    }
    let mut rows = Vec::with_capacity(grid.cells());
    let mut visible = Vec::with_capacity(grid.cells());
    for r in 0..grid.h {
        for c in 0..grid.w {
            let p = grid.cell_center(r, c);
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut seen = 0u8;
            for (k, cam) in rig.cameras.iter().enumerate() {
                if cam.image_size != (feat_sp.h * stride, feat_sp.w * stride) {
                    return Err(Error::Config(format!(
                        "camera {k} image {:?} does not match features {}x{} at stride {stride}",
                        cam.image_size, feat_sp.h, feat_sp.w
                    )));
                }
                let Some(uv) = cam.project([p[0], p[1], 0.0]) else {
                    continue;
                };
                if !cam.in_image(uv) {
                    continue;
                }
                seen += 1;
                let fx = uv[0] / stride as f64 - 0.5;
                let fy = uv[1] / stride as f64 - 0.5;
                for (iy, wy) in nn::linear_taps(fy, feat_sp.h) {
                    for (ix, wx) in nn::linear_taps(fx, feat_sp.w) {
                        taps.push(((k * feat_sp.h + iy) * feat_sp.w + ix, wy * wx));
                    }
                }
            }
            if seen > 0 {
                let inv = 1.0 / seen as f64;
                taps.iter_mut().for_each(|t| t.1 *= inv);
            }
            rows.push(taps);
            visible.push(seen);
        }
    }
    Ok(IpmPlan {
        map: Arc::new(SparseMap::from_rows(feat_sp.cells(), &rows)),
        visible,
    })
}

/// Samples camera features at every BEV cell center; cells no camera sees
/// are exactly zero.
pub fn ipm_lift<T: Real>(g: &mut Graph<T>, uv: &FeatureMap, rig: &CameraRig, grid: &BevGrid) -> Result<FeatureMap> {
    uv.frame.expect(Frame::Uv)?;
    let plan = ipm_plan::<T>(rig, grid, uv.sp, uv.stride)?;
    lift_with(g, uv, &plan, grid)
}

pub fn lift_with<T: Real>(g: &mut Graph<T>, uv: &FeatureMap, plan: &IpmPlan<T>, grid: &BevGrid) -> Result<FeatureMap> {
    uv.frame.expect(Frame::Uv)?;
    let var = g.sparse(uv.var, plan.map.clone())?;
    Ok(FeatureMap {
        var,
        sp: Spatial {
            n: 1,
            h: grid.h,
            w: grid.w,
        },
        c: uv.c,
        frame: Frame::Bev,
        stride: 1,
    })
}

/// Pre-norm transformer block over flattened BEV cells. Positional codes are
/// added to queries and keys only, so zeroing both residual output
/// projections makes the block the identity.
#[derive(Debug, Clone)]
pub struct BevEncoder {
    norm_attn: Norm,
    attn: MultiHeadAttention,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
    pub d_model: usize,
}

impl BevEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d_model: usize, heads: usize, ffn: usize) -> Self {
        Self {
            norm_attn: Norm::new(store, "bev_encoder.norm_attn", d_model, true),
            attn: MultiHeadAttention::new(store, "bev_encoder.attn", d_model, heads),
            norm_ff: Norm::new(store, "bev_encoder.norm_ff", d_model, true),
            ff_in: Linear::new(store, "bev_encoder.ff_in", d_model, ffn, true),
            ff_out: Linear::new(store, "bev_encoder.ff_out", ffn, d_model, true),
            d_model,
        }
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: &FeatureMap, pos: Var) -> Result<FeatureMap> {
        x.frame.expect(Frame::Bev)?;
        if x.c != self.d_model {
            return Err(Error::Shape(format!(
                "bev encoder expects {} channels, got {}",
                self.d_model, x.c
            )));
        }
        let h = self.norm_attn.forward(g, p, x.var)?;
        let qk = g.add(h, pos)?;
        let a = self.attn.forward(g, p, qk, qk, h)?;
        let x1 = g.add(x.var, a)?;
        let h = self.norm_ff.forward(g, p, x1)?;
        let h = self.ff_in.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.ff_out.forward(g, p, h)?;
        let y = g.add(x1, h)?;
        Ok(FeatureMap { var: y, ..*x })
    }
}

/// Fixed sine position code for a BEV grid, `[h*w, d]`.
pub fn bev_position_code<T: Real>(grid: &BevGrid, d: usize) -> Tensor<T> {
    Tensor::from_f64(&[grid.cells(), d], &nn::sine_position_code(grid.h, grid.w, d)).expect("sized")
}
