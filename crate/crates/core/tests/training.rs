use segmap_core::gradcheck::GradCheckOptions;
use segmap_core::scene::generate_dataset;
use segmap_core::suite::{gradient_suite, SUITE};
use segmap_core::train::Trainer;
use segmap_core::Config;

#[test]
fn every_operation_passes_the_gradient_check() {
    let reports = gradient_suite(GradCheckOptions::default()).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, SUITE);
    for r in &reports {
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
        assert!(r.coords_checked > 0);
    }
}

#[test]
fn short_run_halves_the_loss() {
    let mut c = Config::default();
    c.scene.n_frames = 8;
    c.scene.image_h = 32;
    c.scene.image_w = 48;
    c.scene.bev_h = 40;
    c.scene.bev_w = 20;
    c.model.backbone_widths = [8, 12, 16];
    c.model.d_model = 32;
    c.model.heads = 2;
    c.model.ffn = 64;
    c.sgm.d_k = 32;
    c.decoder.n_instances = 12;
    c.decoder.heads = 2;
    c.decoder.ffn = 64;
    // the schedule spans 1000 steps; the run stops after the first 200
    c.train.epochs = 250;
    c.train.lr0 = 1e-3;
    c.train.lr_min = 1e-5;
    c.train.weight_decay = 0.0;
    let frames = generate_dataset(&c.scene).unwrap();
    let mut t = Trainer::<f32>::new(&c).unwrap();
    t.run_until(&frames, 200, |_, _| Ok(())).unwrap();
    // one epoch is four batches; compare epoch means to smooth batch noise
    let epoch_mean = |rs: &[segmap_core::train::StepRecord]| rs.iter().map(|r| r.loss.total).sum::<f64>() / rs.len() as f64;
    let first = epoch_mean(&t.history[..4]);
    let last = epoch_mean(&t.history[t.history.len() - 4..]);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}
