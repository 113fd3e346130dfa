use std::fs;

use segmap::checkpoint::Checkpoint;
use segmap::config_file::apply_override;
use segmap::dataset::{load_dataset, read_manifest, save_dataset, MANIFEST};
use segmap::metrics::read_metrics;
use segmap::runner;
use segmap::Error;
use segmap_core::model::Model;
use segmap_core::scene::generate_dataset;
use segmap_core::train::Trainer;
use segmap_core::Config;

fn tiny(sets: &[&str]) -> Config {
    let mut c = Config::default();
    for s in [
        "scene.n_frames=4",
        "scene.image_h=16",
        "scene.image_w=24",
        "scene.bev_h=20",
        "scene.bev_w=10",
        "model.backbone_widths=[4, 6, 8]",
        "model.d_model=8",
        "model.heads=2",
        "model.ffn=16",
        "sgm.d_k=8",
        "decoder.n_instances=6",
        "decoder.n_points=5",
        "decoder.n_layers=2",
        "decoder.heads=2",
        "decoder.ffn=16",
        "train.epochs=4",
    ]
    .iter()
    .chain(sets)
    {
        c = apply_override(&c, s).unwrap();
    }
    c.validate().unwrap();
    c
}

#[test]
fn dataset_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["scene.n_frames=1"]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    save_dataset(dir.path(), &cfg.scene, &frames).unwrap();
    let (scene, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(scene, cfg.scene);
    assert_eq!(loaded, frames);
}

#[test]
fn manifest_lists_every_frame_with_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["scene.n_frames=16"]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    save_dataset(dir.path(), &cfg.scene, &frames).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.frames.len(), 16);
    let cams = cfg.scene.camera_yaws_deg.len();
    for e in &m.frames {
        assert_eq!(e.files.len(), 2 * cams + 1);
        for (name, &crc) in &e.files {
            let bytes = fs::read(dir.path().join(&e.dir).join(name)).unwrap();
            assert_eq!(crc32fast::hash(&bytes), crc, "{}/{name}", e.dir);
        }
    }
}

#[test]
fn empty_or_corrupt_datasets_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains(MANIFEST), "{err}");

    let cfg = tiny(&["scene.n_frames=2"]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    save_dataset(dir.path(), &cfg.scene, &frames).unwrap();
    let victim = dir.path().join("frame_00001").join("bev_mask.png");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "format");
    assert!(err.to_string().contains("bev_mask.png"), "{err}");

    fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().kind(), "format");
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let cfg = tiny(&[]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    t.run_until(&frames, 3, |_, _| Ok(())).unwrap();
    let ck = Checkpoint::from_trainer(&t, 1);
    let back = Checkpoint::from_bytes(std::path::Path::new("mem"), &ck.to_bytes()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.config, cfg);
}

#[test]
fn resume_matches_uninterrupted_training_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["train.hflip=true"]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    let straight = runner::train(&cfg, &frames, None, None, Some(6), &mut |_| {}).unwrap();

    let first = runner::train(&cfg, &frames, Some(dir.path()), None, Some(3), &mut |_| {}).unwrap();
    assert_eq!(first.step, 3);
    let ck = Checkpoint::load(&dir.path().join(runner::FINAL_CHECKPOINT)).unwrap();
    let resumed = runner::train(&cfg, &frames, Some(dir.path()), Some(ck), Some(6), &mut |_| {}).unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.model.store.tensors(), straight.model.store.tensors());
    assert_eq!(resumed.opt.m, straight.opt.m);
    assert_eq!(read_metrics(&dir.path().join(runner::METRICS)).unwrap(), straight.history);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["train.checkpoint_every=2"]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    runner::train(&cfg, &frames, Some(dir.path()), None, None, &mut |_| {}).unwrap();
    for e in [2, 4] {
        assert!(dir.path().join(format!("checkpoint_epoch{e:04}.safetensors")).exists());
    }
    let last = Checkpoint::load(&dir.path().join(runner::FINAL_CHECKPOINT)).unwrap();
    assert_eq!((last.step, last.epoch), (8, 4));
}

#[test]
fn architecture_mismatch_is_reported() {
    let cfg = tiny(&[]);
    let t = Trainer::<f32>::new(&cfg).unwrap();
    let ck = Checkpoint::from_trainer(&t, 0);
    let mut other = Model::<f32>::new(&tiny(&["sgm.enabled=false"])).unwrap();
    match ck.load_weights(&mut other) {
        Err(Error::Incompatible(msg)) => assert!(msg.contains("sgm.")),
        other => panic!("expected incompatibility, got {other:?}"),
    }
    let mut wider = Model::<f32>::new(&tiny(&["model.backbone_widths=[4, 6, 12]"])).unwrap();
    let err = ck.load_weights(&mut wider).unwrap_err();
    assert_eq!(err.kind(), "checkpoint");
}

#[test]
fn warm_start_copies_matching_parameters_only() {
    let cfg = tiny(&[]);
    let src = Trainer::<f32>::new(&tiny(&["model.backbone_widths=[4, 6, 12]", "train.seed=7"])).unwrap();
    let ck = Checkpoint::from_trainer(&src, 0);
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let fresh = Model::<f32>::new(&cfg).unwrap();
    let missed = ck.warm_start(&mut model);
    assert!(!missed.is_empty());
    for (name, t) in model.store.iter() {
        let expect = if missed.iter().any(|m| m == name) {
            fresh.store.iter().find(|(n, _)| *n == name).unwrap().1
        } else {
            src.model.store.iter().find(|(n, _)| *n == name).unwrap().1
        };
        assert_eq!(t, expect, "{name}");
    }
}

#[test]
fn evaluation_is_repeatable() {
    let cfg = tiny(&[]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    let t = runner::train(&cfg, &frames, None, None, Some(2), &mut |_| {}).unwrap();
    let a = runner::evaluate_model(&t.model, &frames, &cfg.eval).unwrap();
    let b = runner::evaluate_model(&t.model, &frames, &cfg.eval).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.bev_iou.is_some());
}

#[test]
fn ablation_rows_follow_the_variants() {
    let cfg = tiny(&["train.epochs=1"]);
    let frames = generate_dataset(&cfg.scene).unwrap();
    let mut variants = runner::module_variants();
    assert_eq!(
        variants.iter().map(|v| v.label.as_str()).collect::<Vec<_>>(),
        ["baseline", "USM", "BSM", "USM + BSM", "USM + BSM + SGM"]
    );
    variants.truncate(1);
    variants.push(runner::Variant {
        label: "broken".into(),
        overrides: vec!["no.such.key=1".into()],
    });
    let rows = runner::run_ablation(&cfg, &frames, &variants, &mut |_, _| {}).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].status, segmap_core::eval::RowStatus::Ok);
    assert!(rows[0].mean_gap() <= 5e-5);
    assert!(matches!(rows[1].status, segmap_core::eval::RowStatus::Failed(_)));
    let table = segmap_core::eval::render_table("Module", &rows);
    assert!(table.contains("failed"));
}
