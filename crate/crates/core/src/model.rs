//! Full network assembly:
//!
//! ```text
//! images -> backbone+FPN -> (USM, training only)
//!        -> IPM lift -> BEV encoder = X
//!        -> (BSM on X -> O) -> (guidance: Y = proj[attend(O, X), X])
//!        -> decoder(Y if guidance else X)
//! ```

use alloc::format;
use alloc::vec::Vec;

use crate::attention::MultiHeadAttention;
use crate::backbone::{Backbone, UsmHead, BACKBONE_STRIDE};
use crate::bev::{bev_position_code, ipm_plan, lift_with, BevEncoder, IpmPlan};
use crate::config::Config;
use crate::decoder::{LayerOutput, MapDecoder, MapPrediction};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, SegLogits};
use crate::geometry::{BevGrid, BevRange, CameraRig};
use crate::graph::{Graph, Var};
use crate::guidance::{BsmHead, GuidanceOutput, Sgm};
use crate::loss::{batched_seg_loss, map_loss, total_loss, LossReport, MapLossTerms, MapTerms};
use crate::matching::GtTarget;
use crate::nn::{self, ParamStore, Spatial};
use crate::real::Real;
use crate::scene::SurroundFrame;
use crate::tensor::Tensor;

/// Module layout; holds parameter handles only.
#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Backbone,
    pub usm: Option<UsmHead>,
    pub bev_encoder: BevEncoder,
    pub bsm: Option<BsmHead>,
    pub sgm: Option<Sgm>,
    pub decoder: MapDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Runs every enabled head.
    Train,
    /// Skips the image-space segmentation head.
    Infer,
}

/// Everything a forward pass produces for one frame.
#[derive(Debug, Clone)]
pub struct FrameOutputs {
    pub uv_feat: FeatureMap,
    pub x_bev: FeatureMap,
    pub usm: Option<SegLogits>,
    pub bsm: Option<(SegLogits, FeatureMap)>,
    pub guidance: Option<GuidanceOutput>,
    /// The map the decoder read.
    pub decoder_in: FeatureMap,
    /// One head output per decoder layer.
    pub layers: Vec<LayerOutput>,
}

/// Graph handles of one frame's loss terms; disabled heads contribute
/// nothing.
#[derive(Debug, Clone)]
pub struct FrameLoss {
    pub total: Var,
    pub usm: Option<Var>,
    pub bsm: Option<Var>,
    pub map: MapLossTerms,
}

impl FrameLoss {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> Result<LossReport> {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar_value(x).f64());
        total_loss(
            v(self.usm),
            v(self.bsm),
            MapTerms {
                cls: g.scalar_value(self.map.cls).f64(),
                pts: g.scalar_value(self.map.pts).f64(),
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: Config,
    pub store: ParamStore<T>,
    pub net: Network,
    pub grid: BevGrid,
    pub rig: CameraRig,
    plan: IpmPlan<T>,
    bev_pos: Tensor<T>,
    feat_sp: Spatial,
}

impl<T: Real> Model<T> {
    /// Builds the network for a validated configuration with parameters
    /// initialized from `train.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let d = m.d_model;
        let mut store = ParamStore::new(cfg.train.seed);
        let net = Network {
            backbone: Backbone::new(&mut store, m.backbone_widths, d, true),
            usm: cfg.usm.enabled.then(|| UsmHead::new(&mut store, d, true)),
            bev_encoder: BevEncoder::new(&mut store, d, m.heads, m.ffn),
            bsm: cfg.bsm.enabled.then(|| BsmHead::new(&mut store, d)),
            sgm: cfg
                .sgm
                .enabled
                .then(|| Sgm::new(&mut store, d, cfg.sgm.d_k, cfg.sgm.query_source)),
            decoder: MapDecoder::new(
                &mut store,
                d,
                cfg.decoder.n_instances,
                cfg.decoder.n_points,
                cfg.decoder.n_layers,
                cfg.decoder.heads,
                cfg.decoder.ffn,
            ),
        };
        let grid = cfg.scene.grid()?;
        let rig = cfg.scene.rig()?;
        let feat_sp = Spatial {
            n: rig.cameras.len(),
            h: cfg.scene.image_h / BACKBONE_STRIDE,
            w: cfg.scene.image_w / BACKBONE_STRIDE,
        };
        let plan = ipm_plan(&rig, &grid, feat_sp, BACKBONE_STRIDE)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net,
            grid,
            bev_pos: bev_position_code(&grid, d),
            rig,
            plan,
            feat_sp,
        })
    }

    pub fn range(&self) -> BevRange {
        self.grid.range
    }

    /// The BEV encoder's attention block, for inspection.
    pub fn encoder_attention(&self) -> &MultiHeadAttention {
        self.net.bev_encoder.attention()
    }

    /// Camera images stacked channel-last, `[cams*h*w, 3]`, values in
    /// `[0, 1]`.
    pub fn image_tensor(&self, frame: &SurroundFrame) -> Result<(Tensor<T>, Spatial)> {
        let (h, w) = (self.cfg.scene.image_h, self.cfg.scene.image_w);
        if frame.images.len() != self.rig.cameras.len() {
            return Err(Error::Shape(format!(
                "frame has {} images for a rig of {} cameras",
                frame.images.len(),
                self.rig.cameras.len()
            )));
        }
        let mut data = Vec::with_capacity(frame.images.len() * h * w * 3);
        for im in &frame.images {
            if (im.h, im.w) != (h, w) {
                return Err(Error::Shape(format!(
                    "image is {}x{}, model expects {h}x{w}",
                    im.h, im.w
                )));
            }
            data.extend(im.to_hwc::<T>());
        }
        let sp = Spatial {
            n: frame.images.len(),
            h,
            w,
        };
        Ok((Tensor::new(&[sp.cells(), 3], data)?, sp))
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], frame: &SurroundFrame, mode: Mode) -> Result<FrameOutputs> {
        let (img, sp) = self.image_tensor(frame)?;
        let x = g.constant(img);
        let uv_feat = self.net.backbone.forward(g, p, x, sp)?;
        debug_assert_eq!(uv_feat.sp, self.feat_sp);
        let usm = match (&self.net.usm, mode) {
            (Some(h), Mode::Train) => Some(h.forward(g, p, &uv_feat)?.0),
            _ => None,
        };
        let lifted = lift_with(g, &uv_feat, &self.plan, &self.grid)?;
        let pos = g.constant(self.bev_pos.clone());
        let x_bev = self.net.bev_encoder.forward(g, p, &lifted, pos)?;
        let bsm = match &self.net.bsm {
            Some(h) => Some(h.forward(g, p, &x_bev)?),
            None => None,
        };
        let guidance = match (&self.net.sgm, bsm) {
            (Some(s), Some((o_bev, o_feat))) => Some(s.forward(g, p, o_bev, o_feat, &x_bev)?),
            (Some(_), None) => return Err(Error::Config("guidance requires the BEV segmentation head".into())),
            _ => None,
        };
        let decoder_in = guidance.map_or(x_bev, |o| o.y_bev);
        let layers = self.net.decoder.decode(g, p, &decoder_in, pos)?;
        Ok(FrameOutputs {
            uv_feat,
            x_bev,
            usm,
            bsm,
            guidance,
            decoder_in,
            layers,
        })
    }

    /// Matching targets for a frame's elements.
    pub fn gt_targets(&self, frame: &SurroundFrame) -> Result<Vec<GtTarget>> {
        frame
            .elements
            .iter()
            .map(|e| GtTarget::from_element(e, self.cfg.decoder.n_points, &self.grid.range))
            .collect()
    }

    pub fn frame_loss(&self, g: &mut Graph<T>, frame: &SurroundFrame, out: &FrameOutputs, gts: &[GtTarget]) -> Result<FrameLoss> {
        let seg_cfg = self.cfg.loss.seg();
        let usm = match &out.usm {
            Some(l) => {
                let masks: Vec<_> = frame.uv_masks.iter().collect();
                Some(batched_seg_loss(g, l, &masks, &seg_cfg)?)
            }
            None => None,
        };
        let bsm = match &out.bsm {
            Some((l, _)) => {
                let m = &frame.bev_mask;
                if (m.h, m.w) != (self.grid.h, self.grid.w) {
                    return Err(Error::Shape(format!(
                        "BEV mask is {}x{}, grid is {}x{}",
                        m.h, m.w, self.grid.h, self.grid.w
                    )));
                }
                Some(batched_seg_loss(g, l, &[m], &seg_cfg)?)
            }
            None => None,
        };
        let map = map_loss(g, &out.layers, gts, self.cfg.decoder.n_points, &self.cfg.loss.map())?;
        let mut parts = Vec::from([map.cls, map.pts]);
        parts.extend(usm);
        parts.extend(bsm);
        let cat = g.concat_rows(&parts)?;
        let total = g.sum(cat);
        Ok(FrameLoss { total, usm, bsm, map })
    }

    /// Inference on one frame: the final decoder layer's prediction and, when
    /// the BEV segmentation head exists, its foreground probabilities.
    pub fn predict(&self, frame: &SurroundFrame) -> Result<(MapPrediction, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = nn::bind(&mut g, &self.store);
        let out = self.forward(&mut g, &p, frame, Mode::Infer)?;
        let last = out.layers.last().expect("at least one decoder layer");
        let pred = MapPrediction::from_layer(&g, last, self.cfg.decoder.n_points, &self.grid.range);
        let seg = out.bsm.map(|(l, _)| l.foreground_probs(&g));
        Ok((pred, seg))
    }
}

/// Foreground IoU of thresholded probabilities (`> 0.5`) against a binary
/// mask; 1 when both are empty.
pub fn foreground_iou(probs: &[f64], mask: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &m) in probs.iter().zip(mask) {
        let a = p > 0.5;
        let b = m != 0;
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
