use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segmap_core::bev::{bev_position_code, ipm_lift, ipm_plan, BevEncoder};
use segmap_core::feature::{FeatureMap, Frame};
use segmap_core::geometry::{project_to_uv, BevGrid, BevRange, Camera, CameraRig};
use segmap_core::graph::Graph;
use segmap_core::kernels::{attention_weights, AttnGeom};
use segmap_core::nn::{bind, ParamStore, Spatial};
use segmap_core::scene::SceneConfig;
use segmap_core::Tensor;

const STRIDE: usize = 8;

fn grid() -> BevGrid {
    let range = BevRange {
        x_min: -12.0,
        x_max: 12.0,
        y_min: -6.0,
        y_max: 6.0,
    };
    BevGrid::new(range, 24, 12).unwrap()
}

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let center = [rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.2..2.5)];
    let yaw = rng.gen_range(-3.0..3.0);
    let pitch = rng.gen_range(0.15..0.6);
    Camera::looking(center, yaw, pitch, rng.gen_range(20.0..40.0), (32, 48))
}

fn uv_map(g: &mut Graph<f64>, data: Tensor<f64>, cams: usize, c: usize) -> FeatureMap {
    FeatureMap {
        var: g.constant(data),
        sp: Spatial {
            n: cams,
            h: 32 / STRIDE,
            w: 48 / STRIDE,
        },
        c,
        frame: Frame::Uv,
        stride: STRIDE,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar bilinear interpolation of a `[h, w]` field at continuous cell
/// coordinates, clamped to the border.
fn bilinear(field: &[f64], h: usize, w: usize, fx: f64, fy: f64) -> f64 {
    let x = fx.clamp(0.0, (w - 1) as f64);
    let y = fy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| field[r * w + c];
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
}

#[test]
fn single_camera_lift_matches_scalar_bilinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grid = grid();
    let (fh, fw, c) = (4, 6, 3);
    let mut seen_any = 0;
    for _ in 0..10 {
        let cam = random_camera(&mut rng);
        let rig = CameraRig {
            cameras: vec![cam.clone()],
        };
        let feats = random(&mut rng, &[fh * fw, c]);
        let mut g = Graph::new();
        let uv = uv_map(&mut g, feats.clone(), 1, c);
        let out = ipm_lift(&mut g, &uv, &rig, &grid).unwrap();
        let got = g.value(out.var);
        for r in 0..grid.h {
            for col in 0..grid.w {
                let p = grid.cell_center(r, col);
                let cell = got.row(r * grid.w + col);
                match cam.project([p[0], p[1], 0.0]).filter(|&uv| cam.in_image(uv)) {
                    Some(uv) => {
                        seen_any += 1;
                        let (fx, fy) = (uv[0] / STRIDE as f64 - 0.5, uv[1] / STRIDE as f64 - 0.5);
                        for ch in 0..c {
                            let field: Vec<f64> = (0..fh * fw).map(|i| feats.row(i)[ch]).collect();
                            let want = bilinear(&field, fh, fw, fx, fy);
                            assert!((cell[ch] - want).abs() <= 1e-6, "{} vs {want}", cell[ch]);
                        }
                    }
                    None => assert!(cell.iter().all(|&v| v == 0.0)),
                }
            }
        }
    }
    assert!(seen_any > 100, "random rigs saw too few cells: {seen_any}");
}

#[test]
fn constant_features_lift_to_the_constant_and_blind_cells_stay_zero() {
    let scene = SceneConfig {
        image_h: 32,
        image_w: 48,
        bev_h: 24,
        bev_w: 12,
        x_min: -12.0,
        x_max: 12.0,
        y_min: -6.0,
        y_max: 6.0,
        ..SceneConfig::default()
    };
    // front camera alone leaves the area behind the vehicle unseen
    let mut rig = scene.rig().unwrap();
    rig.cameras.truncate(1);
    let grid = scene.grid().unwrap();
    let c = 4;
    let value = [0.25, -1.5, 3.0, 0.0];
    let data: Vec<f64> = (0..4 * 6).flat_map(|_| value).collect();
    let mut g = Graph::new();
    let uv = uv_map(&mut g, Tensor::new(&[24, c], data).unwrap(), 1, c);
    let plan = ipm_plan::<f64>(&rig, &grid, uv.sp, STRIDE).unwrap();
    let out = ipm_lift(&mut g, &uv, &rig, &grid).unwrap();
    let got = g.value(out.var);
    let (mut seen, mut blind) = (0, 0);
    for (i, &vis) in plan.visible.iter().enumerate() {
        if vis == 0 {
            blind += 1;
            assert!(got.row(i).iter().all(|&v| v == 0.0));
        } else {
            seen += 1;
            for (a, b) in got.row(i).iter().zip(value) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
    assert!(seen > 0 && blind > 0, "seen {seen} blind {blind}");
}

#[test]
fn camera_count_must_match_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rig = CameraRig {
        cameras: vec![random_camera(&mut rng), random_camera(&mut rng)],
    };
    let mut g = Graph::new();
    let uv = uv_map(&mut g, Tensor::zeros(&[24, 2]), 1, 2);
    assert!(ipm_lift(&mut g, &uv, &rig, &grid()).is_err());
}

#[test]
fn projection_matches_homogeneous_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let cam = random_camera(&mut rng);
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.0])
            .collect();
        let got = project_to_uv(&pts, &cam);
        for (p, uv) in pts.iter().zip(got) {
            // P = K [R | t] applied to (x, y, z, 1)
            let e = &cam.extrinsics;
            let cam_pt: Vec<f64> = (0..3).map(|i| e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3]).collect();
            let k = &cam.intrinsics;
            let h: Vec<f64> = (0..3).map(|i| (0..3).map(|j| k[i][j] * cam_pt[j]).sum()).collect();
            match uv {
                Some(uv) => {
                    assert!(cam_pt[2] > segmap_core::geometry::EPS_DEPTH);
                    assert!((uv[0] - h[0] / h[2]).abs() <= 1e-6);
                    assert!((uv[1] - h[1] / h[2]).abs() <= 1e-6);
                }
                None => assert!(cam_pt[2] <= segmap_core::geometry::EPS_DEPTH),
            }
        }
    }
}

#[test]
fn encoder_with_zeroed_output_projections_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let mut store = ParamStore::<f64>::new(6);
    let enc = BevEncoder::new(&mut store, d, 2, 16);
    for name in [
        "bev_encoder.attn.out.weight",
        "bev_encoder.attn.out.bias",
        "bev_encoder.ff_out.weight",
        "bev_encoder.ff_out.bias",
    ] {
        let t = store.by_name_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let grid = grid();
    let x = random(&mut rng, &[grid.cells(), d]);
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let xv = g.constant(x.clone());
    let pos = g.constant(bev_position_code(&grid, d));
    let fm = FeatureMap {
        var: xv,
        sp: Spatial {
            n: 1,
            h: grid.h,
            w: grid.w,
        },
        c: d,
        frame: Frame::Bev,
        stride: 1,
    };
    let out = enc.forward(&mut g, &p, &fm, pos).unwrap();
    assert_eq!(out.chw(), fm.chw());
    assert_eq!(g.value(out.var), &x);
}

#[test]
fn encoder_attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (cells, heads, d_k) = (40, 4, 3);
    let q = random(&mut rng, &[cells, heads * d_k]);
    let k = random(&mut rng, &[cells, heads * d_k]);
    let geom = AttnGeom {
        n_query: cells,
        n_key: cells,
        heads,
        d_k,
        d_v: d_k,
    };
    let w = attention_weights(q.data(), k.data(), &geom, 1.0 / (d_k as f64).sqrt());
    assert_eq!(w.len(), heads * cells * cells);
    for row in w.chunks(cells) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}
