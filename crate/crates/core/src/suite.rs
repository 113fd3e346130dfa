//! The finite-difference gradient suite: one check per differentiable
//! operation on small random inputs, in double precision.
//!
//! Each check perturbs the operation's inputs and every parameter of the
//! module involved. Outputs are reduced with fixed random weights so that
//! normalized or softmax-like outputs still give a non-trivial scalar.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, UsmHead};
use crate::decoder::{LayerOutput, MapDecoder, N_LOGITS};
use crate::error::Result;
use crate::feature::{FeatureMap, Frame};
use crate::geometry::BevRange;
use crate::gradcheck::{check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::guidance::{BsmHead, QuerySource, Sgm};
use crate::loss::{dice_graph, map_layer_loss, seg_ce_graph, DiceForm, MapLossConfig};
use crate::matching::GtTarget;
use crate::nn::{ParamStore, Spatial};
use crate::scene::{MapClass, MapElement};
use crate::tensor::Tensor;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, d).expect("sized")
}

/// `sum(v * R)` for a fixed random `R` of the same shape.
fn weighted(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let r = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

fn with_params(mut inputs: Vec<Tensor<f64>>, store: &ParamStore<f64>) -> (Vec<Tensor<f64>>, usize) {
    let k = inputs.len();
    inputs.extend(store.tensors().iter().cloned());
    (inputs, k)
}

fn fmap(var: Var, n: usize, h: usize, w: usize, c: usize, frame: Frame, stride: usize) -> FeatureMap {
    FeatureMap {
        var,
        sp: Spatial { n, h, w },
        c,
        frame,
        stride,
    }
}

/// Names of the checked operations, in suite order.
pub const SUITE: [&str; 9] = [
    "backbone_fpn",
    "usm_head",
    "bsm_head",
    "sgm_attend",
    "sgm_fuse",
    "decode",
    "dice_loss",
    "seg_ce_loss",
    "maptr_loss",
];

/// Runs every check with a fixed seed.
pub fn gradient_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::with_capacity(SUITE.len());
    let c = 4;

    {
        let mut store = ParamStore::<f64>::new(1);
        let bb = Backbone::new(&mut store, [3, 4, 4], c, true);
        let (h, w) = (16, 16);
        let (inputs, k) = with_params(vec![uniform(&mut rng, &[h * w, 3], 0.0, 1.0)], &store);
        out.push(check("backbone_fpn", &inputs, opts, |g, v| {
            let f = bb.forward(g, &v[k..], v[0], Spatial { n: 1, h, w })?;
            weighted(g, f.var, 11)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new(2);
        let usm = UsmHead::new(&mut store, c, true);
        let (inputs, k) = with_params(vec![uniform(&mut rng, &[2 * 3, c], -1.0, 1.0)], &store);
        out.push(check("usm_head", &inputs, opts, |g, v| {
            let (logits, _) = usm.forward(g, &v[k..], &fmap(v[0], 1, 2, 3, c, Frame::Uv, 8))?;
            weighted(g, logits.var, 12)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new(3);
        let bsm = BsmHead::new(&mut store, c);
        let (inputs, k) = with_params(vec![uniform(&mut rng, &[4 * 3, c], -1.0, 1.0)], &store);
        out.push(check("bsm_head", &inputs, opts, |g, v| {
            let (logits, feat) = bsm.forward(g, &v[k..], &fmap(v[0], 1, 4, 3, c, Frame::Bev, 1))?;
            let a = weighted(g, logits.var, 13)?;
            let b = weighted(g, feat.var, 14)?;
            g.add(a, b)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new(4);
        let sgm = Sgm::new(&mut store, c, 3, QuerySource::Features);
        let (inputs, k) = with_params(
            vec![
                uniform(&mut rng, &[6, c], -1.0, 1.0),
                uniform(&mut rng, &[6, c], -1.0, 1.0),
            ],
            &store,
        );
        out.push(check("sgm_attend", &inputs, opts, |g, v| {
            let o = fmap(v[0], 1, 2, 3, c, Frame::Bev, 1);
            let x = fmap(v[1], 1, 2, 3, c, Frame::Bev, 1);
            let gb = sgm.attend(g, &v[k..], &o, &x)?;
            weighted(g, gb.var, 15)
        })?);
        out.push(check("sgm_fuse", &inputs, opts, |g, v| {
            let gb = fmap(v[0], 1, 2, 3, c, Frame::Bev, 1);
            let x = fmap(v[1], 1, 2, 3, c, Frame::Bev, 1);
            let (_, y) = sgm.fuse(g, &v[k..], &gb, &x)?;
            weighted(g, y.var, 16)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new(5);
        let dec = MapDecoder::new(&mut store, c, 3, 2, 2, 2, 8);
        let pos = uniform(&mut rng, &[6, c], -1.0, 1.0);
        let (inputs, k) = with_params(vec![uniform(&mut rng, &[6, c], -1.0, 1.0)], &store);
        out.push(check("decode", &inputs, opts, |g, v| {
            let y = fmap(v[0], 1, 2, 3, c, Frame::Bev, 1);
            let pv = g.constant(pos.clone());
            let layers = dec.decode(g, &v[k..], &y, pv)?;
            let mut parts = Vec::new();
            for (i, l) in layers.iter().enumerate() {
                parts.push(weighted(g, l.scores, 100 + i as u64)?);
                parts.push(weighted(g, l.points, 200 + i as u64)?);
            }
            let cat = g.concat_rows(&parts)?;
            Ok(g.sum(cat))
        })?);
    }
    {
        let probs = uniform(&mut rng, &[40], 0.05, 0.95);
        let gt: Vec<f64> = (0..40).map(|i| f64::from(i % 3 == 0)).collect();
        let gt = Tensor::new(&[40], gt)?;
        out.push(check("dice_loss", &[probs], opts, |g, v| {
            let t = g.constant(gt.clone());
            dice_graph(g, v[0], t, 1.0, DiceForm::Dice)
        })?);
    }
    {
        let logits = uniform(&mut rng, &[30, 2], -3.0, 3.0);
        let gt: Vec<u8> = (0..30).map(|i| u8::from(i % 4 == 1)).collect();
        out.push(check("seg_ce_loss", &[logits], opts, |g, v| seg_ce_graph(g, v[0], &gt))?);
    }
    {
        let (n_inst, n_pts) = (4, 5);
        let range = BevRange {
            x_min: -10.0,
            x_max: 10.0,
            y_min: -5.0,
            y_max: 5.0,
        };
        let gts = [
            MapElement {
                cls: MapClass::Divider,
                points: vec![[-8.0, -2.0], [0.0, -1.0], [8.0, -2.5]],
                closed: false,
            },
            MapElement {
                cls: MapClass::PedCrossing,
                points: vec![[2.0, 1.0], [5.0, 1.0], [5.0, 4.0], [2.0, 4.0]],
                closed: true,
            },
        ]
        .iter()
        .map(|e| GtTarget::from_element(e, n_pts, &range))
        .collect::<Result<Vec<_>>>()?;
        let scores = uniform(&mut rng, &[n_inst, N_LOGITS], -2.0, 2.0);
        let points = uniform(&mut rng, &[n_inst * n_pts, 2], 0.05, 0.95);
        let cfg = MapLossConfig::default();
        out.push(check("maptr_loss", &[scores, points], opts, |g, v| {
            let lo = LayerOutput {
                scores: v[0],
                points: v[1],
            };
            let (c, p, _) = map_layer_loss(g, &lo, &gts, n_pts, &cfg)?;
            g.add(c, p)
        })?);
    }
    Ok(out)
}
