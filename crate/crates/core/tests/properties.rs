use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segmap_core::decoder::{LayerOutput, N_LOGITS};
use segmap_core::eval::{chamfer_distance, evaluate, Detection, EvalConfig};
use segmap_core::graph::Graph;
use segmap_core::loss::{dice_loss, map_layer_loss, total_loss, MapLossConfig, MapTerms};
use segmap_core::matching::{
    assignment_cost, cost_matrix, equivalent_orderings, hungarian, hungarian_match, resample_element,
    resample_polyline, GtTarget, MatchWeights, PredView,
};
use segmap_core::scene::{MapClass, MapElement};
use segmap_core::Tensor;

type Point = [f64; 2];

fn class(i: usize) -> MapClass {
    MapClass::from_index(i % 3).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * N_LOGITS);
    for _ in 0..n {
        let raw: Vec<f64> = (0..N_LOGITS).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

/// Random ground truth already resampled to `n_pts` normalized points.
fn random_target(rng: &mut ChaCha8Rng, n_pts: usize) -> (MapClass, Vec<Point>, bool) {
    let cls = class(rng.gen_range(0..3));
    let closed = cls == MapClass::PedCrossing;
    (cls, random_points(rng, n_pts), closed)
}

fn target(cls: MapClass, pts: &[Point], closed: bool) -> GtTarget {
    GtTarget {
        cls,
        orderings: equivalent_orderings(pts, closed),
    }
}

#[test]
fn hungarian_matches_brute_force_on_two_hundred_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let n_pts = 5;
    for case in 0..200 {
        let n = 1 + case % 6;
        let points: Vec<Vec<Point>> = (0..n).map(|_| random_points(&mut rng, n_pts)).collect();
        let probs = random_probs(&mut rng, n);
        let gts: Vec<GtTarget> = (0..n)
            .map(|_| {
                let (c, p, closed) = random_target(&mut rng, n_pts);
                target(c, &p, closed)
            })
            .collect();
        let view = PredView {
            probs: &probs,
            n_classes_bg: N_LOGITS,
            points: &points,
        };
        let w = MatchWeights::default();
        let m = hungarian_match(&view, &gts, &w).unwrap();
        let cost = cost_matrix(&view, &gts, &w);
        let best = permutations(n)
            .iter()
            .map(|perm| assignment_cost(&cost, n, perm))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(m.total_cost, best, "case {case}");
        assert_eq!(m.pairs.len(), n);
        assert!(m.unmatched_preds.is_empty());
    }
}

#[test]
fn hungarian_rectangular_is_injective_and_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(rows..6);
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = hungarian(&cost, rows, cols);
        let mut seen = a.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), rows);
        let best = permutations(cols)
            .iter()
            .map(|p| assignment_cost(&cost, cols, &p[..rows]))
            .fold(f64::INFINITY, f64::min);
        assert!((assignment_cost(&cost, cols, &a) - best).abs() <= 1e-12);
    }
}

fn layer_loss(scores: &Tensor<f64>, points: &Tensor<f64>, gts: &[GtTarget], n_pts: usize) -> (f64, f64) {
    let mut g = Graph::new();
    let lo = LayerOutput {
        scores: g.constant(scores.clone()),
        points: g.constant(points.clone()),
    };
    let (c, p, _) = map_layer_loss(&mut g, &lo, gts, n_pts, &MapLossConfig::default()).unwrap();
    (g.scalar_value(c), g.scalar_value(p))
}

#[test]
fn map_loss_is_invariant_to_equivalent_reorderings() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (n_inst, n_pts) = (6, 8);
    for case in 0..100 {
        let scores = Tensor::new(
            &[n_inst, N_LOGITS],
            (0..n_inst * N_LOGITS).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let points = Tensor::new(
            &[n_inst * n_pts, 2],
            (0..n_inst * n_pts * 2).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let raw: Vec<_> = (0..rng.gen_range(1..5)).map(|_| random_target(&mut rng, n_pts)).collect();
        let base: Vec<GtTarget> = raw.iter().map(|(c, p, cl)| target(*c, p, *cl)).collect();
        let moved: Vec<GtTarget> = raw
            .iter()
            .map(|(c, p, closed)| {
                let mut q = p.clone();
                if *closed {
                    q.rotate_left(rng.gen_range(1..n_pts));
                    if rng.gen_bool(0.5) {
                        q.reverse();
                    }
                } else {
                    q.reverse();
                }
                target(*c, &q, *closed)
            })
            .collect();
        assert_eq!(
            layer_loss(&scores, &points, &base, n_pts),
            layer_loss(&scores, &points, &moved, n_pts),
            "case {case}"
        );
    }
}

#[test]
fn ordering_counts() {
    let pts: Vec<Point> = (0..10).map(|i| [i as f64, 0.0]).collect();
    assert_eq!(equivalent_orderings(&pts, false).len(), 2);
    assert_eq!(equivalent_orderings(&pts, true).len(), 20);
}

#[test]
fn l_shape_resamples_by_arc_length() {
    // legs of length 3 and 1: total 4, so the five samples sit at 0, 1, 2, 3, 4
    let pts = resample_polyline(&[[0.0, 0.0], [3.0, 0.0], [3.0, 1.0]], false, 5).unwrap();
    let cum = |p: Point| if p[1] == 0.0 { p[0] } else { 3.0 + p[1] };
    for (i, p) in pts.iter().enumerate() {
        assert!((cum(*p) - i as f64).abs() <= 1e-12, "{p:?}");
    }
    let e = MapElement {
        cls: MapClass::Divider,
        points: vec![[0.0, 0.0], [0.0, 9.0]],
        closed: false,
    };
    let r = resample_element(&e, 10).unwrap();
    for (i, p) in r.iter().enumerate() {
        assert!((p[1] - i as f64).abs() <= 1e-12 && p[0] == 0.0);
    }
}

fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
    let d = |p: Point, q: Point| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let mut ab = 0.0;
    for &p in a {
        let mut m = f64::INFINITY;
        for &q in b {
            m = m.min(d(p, q));
        }
        ab += m;
    }
    let mut ba = 0.0;
    for &q in b {
        let mut m = f64::INFINITY;
        for &p in a {
            m = m.min(d(p, q));
        }
        ba += m;
    }
    0.5 * (ab / a.len() as f64 + ba / b.len() as f64)
}

fn point_set(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0).prop_map(|(x, y)| [x, y]), 1..max)
}

fn random_frame(rng: &mut ChaCha8Rng) -> Vec<MapElement> {
    (0..rng.gen_range(0..5))
        .map(|_| {
            let cls = class(rng.gen_range(0..3));
            let x0 = rng.gen_range(-10.0..8.0);
            let y0 = rng.gen_range(-6.0..4.0);
            let points = if cls == MapClass::PedCrossing {
                vec![[x0, y0], [x0 + 2.0, y0], [x0 + 2.0, y0 + 2.0], [x0, y0 + 2.0]]
            } else {
                vec![[x0, y0], [x0 + rng.gen_range(1.0..5.0), y0 + rng.gen_range(-1.0..1.0)]]
            };
            MapElement {
                cls,
                points,
                closed: cls == MapClass::PedCrossing,
            }
        })
        .collect()
}

/// Ground truth perturbed into detections, plus some spurious ones.
fn noisy_detections(rng: &mut ChaCha8Rng, gts: &[MapElement]) -> Vec<Detection> {
    let mut out = Vec::new();
    for e in gts {
        if !rng.gen_bool(0.8) {
            continue;
        }
        let s = rng.gen_range(0.0..2.0);
        let score = rng.gen_range(0.0..1.0);
        let points = e
            .points
            .iter()
            .map(|p| [p[0] + s * rng.gen_range(-1.0..1.0), p[1] + s * rng.gen_range(-1.0..1.0)])
            .collect();
        out.push(Detection {
            cls: e.cls,
            score,
            points,
        });
    }
    for e in random_frame(rng).iter().take(2) {
        out.push(Detection {
            score: rng.gen_range(0.0..1.0),
            ..Detection::from(e)
        });
    }
    out
}

fn single(thr: f64) -> EvalConfig {
    EvalConfig {
        thresholds: vec![thr],
        ..EvalConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_matches_brute_force(a in point_set(12), b in point_set(12)) {
        let ab = chamfer_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer_distance(&b, &a).unwrap());
        prop_assert!((ab - brute_chamfer(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn ap_is_monotone_in_threshold(seed in any::<u64>(), t1 in 0.1f64..2.0, dt in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<_> = (0..4).map(|_| random_frame(&mut rng)).collect();
        let preds: Vec<_> = gts.iter().map(|g| noisy_detections(&mut rng, g)).collect();
        let lo = evaluate(&preds, &gts, &single(t1)).unwrap();
        let hi = evaluate(&preds, &gts, &single(t1 + dt)).unwrap();
        for c in 0..3 {
            match (lo.per_class_ap[c], hi.per_class_ap[c]) {
                (Some(a), Some(b)) => {
                    prop_assert!((0.0..=1.0).contains(&a));
                    prop_assert!(a <= b + 1e-12, "class {} ap {} > {}", c, a, b);
                }
                (None, None) => {}
                other => prop_assert!(false, "presence differs: {:?}", other),
            }
        }
    }

    #[test]
    fn ap_ignores_prediction_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<_> = (0..3).map(|_| random_frame(&mut rng)).collect();
        let preds: Vec<_> = gts.iter().map(|g| noisy_detections(&mut rng, g)).collect();
        let mut shuffled = preds.clone();
        for f in &mut shuffled {
            f.shuffle(&mut rng);
        }
        let cfg = EvalConfig::default();
        prop_assert_eq!(evaluate(&preds, &gts, &cfg).unwrap(), evaluate(&shuffled, &gts, &cfg).unwrap());
    }

    #[test]
    fn dice_is_bounded_and_rewards_overlap(
        p in prop::collection::vec(0.0f64..1.0, 16),
        g in prop::collection::vec(any::<bool>(), 16),
        frac in 0.0f64..1.0,
    ) {
        let gt: Vec<f64> = g.iter().map(|&b| f64::from(u8::from(b))).collect();
        let d = dice_loss(&p, &gt, 1.0).unwrap();
        prop_assert!((0.0..1.0).contains(&d));
        // move mass from a background pixel onto a foreground pixel
        if let (Some(i), Some(j)) = (g.iter().position(|&b| b), g.iter().position(|&b| !b)) {
            let delta = frac * p[j].min(1.0 - p[i]);
            let mut q = p.clone();
            q[i] += delta;
            q[j] -= delta;
            prop_assert!(dice_loss(&q, &gt, 1.0).unwrap() <= d + 1e-12);
        }
    }

    #[test]
    fn total_loss_identities(usm in 0.0f64..100.0, bsm in 0.0f64..100.0, cls in 0.0f64..100.0, pts in 0.0f64..100.0) {
        let r = total_loss(usm, bsm, MapTerms { cls, pts }).unwrap();
        prop_assert!(r.identities_hold());
        prop_assert_eq!(r.seg, usm + bsm);
        prop_assert_eq!(r.total, (cls + pts) + (usm + bsm));
    }

    #[test]
    fn resampling_a_uniform_polyline_is_identity(x0 in -5.0f64..5.0, y0 in -5.0f64..5.0, dx in 0.1f64..2.0, dy in -2.0f64..2.0, n in 2usize..12) {
        let pts: Vec<Point> = (0..n).map(|i| [x0 + dx * i as f64, y0 + dy * i as f64]).collect();
        let r = resample_polyline(&pts, false, n).unwrap();
        for (a, b) in r.iter().zip(&pts) {
            prop_assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
        }
    }
}

#[test]
fn total_loss_examples() {
    let r = total_loss(0.0, 0.0, MapTerms::default()).unwrap();
    assert_eq!(r.total, 0.0);
    let r = total_loss(1.5, 2.5, MapTerms { cls: 1.0, pts: 2.0 }).unwrap();
    assert_eq!((r.seg, r.total), (4.0, 7.0));
    assert!(total_loss(f64::NAN, 0.0, MapTerms::default()).is_err());
}

#[test]
fn hand_computed_micro_dataset() {
    // three frames, one divider each; detections at known distances
    let gt = |y: f64| {
        vec![MapElement {
            cls: MapClass::Divider,
            points: vec![[-5.0, y], [5.0, y]],
            closed: false,
        }]
    };
    let det = |y: f64, score: f64| Detection {
        cls: MapClass::Divider,
        score,
        points: vec![[-5.0, y], [5.0, y]],
    };
    let gts = vec![gt(0.0), gt(2.0), gt(-3.0)];
    // scores 0.9 (TP at 0.2 m), 0.8 (FP: 4 m away), 0.7 (TP at 0.4 m)
    let preds = vec![vec![det(0.2, 0.9)], vec![det(6.0, 0.8)], vec![det(-3.4, 0.7)]];
    let r = evaluate(&preds, &gts, &single(1.0)).unwrap();
    // ranks: TP (p=1, r=1/3), FP, TP (p=2/3, r=2/3); all-point AP = (1 + 2/3) / 3
    let want = (1.0 + 2.0 / 3.0) / 3.0;
    assert!((r.per_class_ap[1].unwrap() - want).abs() <= 1e-12);
    assert_eq!(r.per_class_ap[0], None);
    assert_eq!(r.map, r.per_class_ap[1].unwrap());
}
