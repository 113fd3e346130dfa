use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segmap_core::feature::{FeatureMap, Frame};
use segmap_core::gradcheck::{check, GradCheckOptions};
use segmap_core::graph::{Graph, Var};
use segmap_core::guidance::{BsmHead, QuerySource, Sgm};
use segmap_core::nn::{bind, ParamStore, Spatial};
use segmap_core::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bev(var: Var, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap {
        var,
        sp: Spatial { n: 1, h, w },
        c,
        frame: Frame::Bev,
        stride: 1,
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new(3);
    let sgm = Sgm::new(&mut store, 8, 6, QuerySource::Features);
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let o = g.constant(random(&mut rng, &[5 * 4, 8]));
    let x = g.constant(random(&mut rng, &[5 * 4, 8]));
    let w = sgm.weights(&mut g, &p, &bev(o, 5, 4, 8), &bev(x, 5, 4, 8)).unwrap();
    assert_eq!(w.len(), 20 * 20);
    for row in w.chunks(20) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn constant_values_are_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, cells) = (4, 6);
    let mut store = ParamStore::<f64>::new(4);
    let sgm = Sgm::new(&mut store, d, 3, QuerySource::Features);
    // non-zero biases so the check exercises the full projection
    let bv = sgm.f_v.b.unwrap();
    *store.get_mut(bv) = random(&mut rng, &[d]);
    let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x_data: Vec<f64> = (0..cells).flat_map(|_| c.iter().copied()).collect();

    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let o = g.constant(random(&mut rng, &[cells, d]));
    let x = g.constant(Tensor::new(&[cells, d], x_data).unwrap());
    let out = sgm.attend(&mut g, &p, &bev(o, 2, 3, d), &bev(x, 2, 3, d)).unwrap();

    let wv = store.get(sgm.f_v.w).data();
    let b = store.get(bv).data();
    let expect: Vec<f64> = (0..d).map(|j| b[j] + (0..d).map(|i| c[i] * wv[i * d + j]).sum::<f64>()).collect();
    for row in g.value(out.var).data().chunks(d) {
        for (a, e) in row.iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
        }
    }
}

#[test]
fn two_cell_attention_by_hand() {
    let mut store = ParamStore::<f64>::new(0);
    let sgm = Sgm::new(&mut store, 1, 1, QuerySource::Features);
    let set = |store: &mut ParamStore<f64>, id, v: f64| *store.get_mut(id) = Tensor::full(store.get(id).shape(), v);
    set(&mut store, sgm.f_q.w, 2.0);
    set(&mut store, sgm.f_q.b.unwrap(), 0.5);
    set(&mut store, sgm.f_k.w, -1.0);
    set(&mut store, sgm.f_k.b.unwrap(), 0.25);
    set(&mut store, sgm.f_v.w, 3.0);
    set(&mut store, sgm.f_v.b.unwrap(), -1.0);

    let (o, x) = ([0.3, -0.7], [1.2, -0.4]);
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let ov = g.constant(Tensor::from_f64(&[2, 1], &o).unwrap());
    let xv = g.constant(Tensor::from_f64(&[2, 1], &x).unwrap());
    let out = sgm.attend(&mut g, &p, &bev(ov, 1, 2, 1), &bev(xv, 1, 2, 1)).unwrap();

    // q = 2o + 0.5, k = -x + 0.25, v = 3x - 1, scale 1/sqrt(1)
    let k = [-1.2 + 0.25, 0.4 + 0.25];
    let v = [3.0 * 1.2 - 1.0, 3.0 * -0.4 - 1.0];
    for i in 0..2 {
        let q = 2.0 * o[i] + 0.5;
        let (e0, e1) = ((q * k[0]).exp(), (q * k[1]).exp());
        let want = (e0 * v[0] + e1 * v[1]) / (e0 + e1);
        let got = g.value(out.var).data()[i];
        assert!((got - want).abs() <= 1e-12, "cell {i}: {got} vs {want}");
    }
}

#[test]
fn concatenation_keeps_both_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let mut store = ParamStore::<f64>::new(6);
    let sgm = Sgm::new(&mut store, d, 4, QuerySource::Features);
    let bsm = BsmHead::new(&mut store, d);
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let x = bev(g.constant(random(&mut rng, &[4 * 3, d])), 4, 3, d);
    let (o_bev, o_feat) = bsm.forward(&mut g, &p, &x).unwrap();
    let out = sgm.forward(&mut g, &p, o_bev, o_feat, &x).unwrap();
    assert_eq!(out.y_concat.c, out.g_bev.c + x.c);
    assert_eq!(out.g_bev.sp, x.sp);
    assert_eq!(out.y_bev.c, d);

    let cat = g.value(out.y_concat.var).clone();
    let gb = g.value(out.g_bev.var).clone();
    let xb = g.value(x.var).clone();
    for r in 0..12 {
        assert_eq!(&cat.row(r)[..d], gb.row(r));
        assert_eq!(&cat.row(r)[d..], xb.row(r));
    }
}

#[test]
fn guidance_commutes_with_cell_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, cells) = (4, 6);
    let mut store = ParamStore::<f64>::new(9);
    let sgm = Sgm::new(&mut store, d, 4, QuerySource::Features);
    let o = random(&mut rng, &[cells, d]);
    let x = random(&mut rng, &[cells, d]);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let data: Vec<f64> = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        Tensor::new(&[cells, d], data).unwrap()
    };
    let run = |o: Tensor<f64>, x: Tensor<f64>| {
        let mut g = Graph::new();
        let p = bind(&mut g, &store);
        let (ov, xv) = (g.constant(o), g.constant(x));
        let out = sgm.attend(&mut g, &p, &bev(ov, 2, 3, d), &bev(xv, 2, 3, d)).unwrap();
        g.value(out.var).clone()
    };
    let base = run(o.clone(), x.clone());
    let permuted = run(permute(&o), permute(&x));
    for (r, &src) in perm.iter().enumerate() {
        for (a, b) in permuted.row(r).iter().zip(base.row(src)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn fused_output_depends_on_both_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 3;
    let mut store = ParamStore::<f64>::new(11);
    let sgm = Sgm::new(&mut store, d, 2, QuerySource::Features);
    let inputs = [random(&mut rng, &[4, d]), random(&mut rng, &[4, d])];
    let r = check("sgm_fuse", &inputs, GradCheckOptions::default(), |g, v| {
        let p = bind(g, &store);
        let (_, y) = sgm.fuse(g, &p, &bev(v[0], 2, 2, d), &bev(v[1], 2, 2, d))?;
        let sq = g.mul(y.var, y.var)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
    assert!(r.numeric_scale.iter().all(|&s| s > 1e-6), "{r:?}");
}

#[test]
fn spatial_mismatch_is_rejected() {
    let mut store = ParamStore::<f64>::new(0);
    let sgm = Sgm::new(&mut store, 2, 2, QuerySource::Features);
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let a = g.constant(Tensor::zeros(&[6, 2]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(sgm.attend(&mut g, &p, &bev(a, 2, 3, 2), &bev(b, 2, 2, 2)).is_err());
    assert!(sgm.fuse(&mut g, &p, &bev(a, 2, 3, 2), &bev(b, 2, 2, 2)).is_err());
}

#[test]
fn logits_can_drive_the_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 4;
    let mut store = ParamStore::<f64>::new(13);
    let sgm = Sgm::new(&mut store, d, 3, QuerySource::Logits);
    let bsm = BsmHead::new(&mut store, d);
    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let x = bev(g.constant(random(&mut rng, &[6, d])), 2, 3, d);
    let (o_bev, o_feat) = bsm.forward(&mut g, &p, &x).unwrap();
    assert_eq!(sgm.source_map(&o_bev, &o_feat).c, 2);
    let out = sgm.forward(&mut g, &p, o_bev, o_feat, &x).unwrap();
    assert_eq!(g.shape(out.y_bev.var), &[6, d]);
}

#[test]
fn bsm_head_shapes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = 8;
    let mut store = ParamStore::<f64>::new(15);
    let bsm = BsmHead::new(&mut store, d);
    let x = random(&mut rng, &[10 * 5, d]);
    let run = || {
        let mut g = Graph::new();
        let p = bind(&mut g, &store);
        let xv = g.constant(x.clone());
        let (logits, feat) = bsm.forward(&mut g, &p, &bev(xv, 10, 5, d)).unwrap();
        assert_eq!(logits.chw(), [2, 10, 5]);
        assert_eq!(feat.chw(), [d, 10, 5]);
        (g.value(logits.var).clone(), g.value(feat.var).clone())
    };
    assert_eq!(run(), run());

    let mut g = Graph::new();
    let p = bind(&mut g, &store);
    let xv = g.constant(x.clone());
    let uv = FeatureMap {
        frame: Frame::Uv,
        ..bev(xv, 10, 5, d)
    };
    assert!(bsm.forward(&mut g, &p, &uv).is_err());
}
