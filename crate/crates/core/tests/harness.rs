use std::fs;

use poifusion_core::assign::set_loss;
use poifusion_core::autodiff::Tape;
use poifusion_core::decoder::SceneInputs;
use poifusion_core::harness::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_report, cmd_train, evaluate, gradcheck, line_chart_svg, load_dataset,
    mix_seed, sha256_hex, tiny_config, GradcheckOptions, Manifest, RunConfig, Series,
};
use poifusion_core::scene::{generate_scene, Corruption, OracleEncoder};
use poifusion_core::{Error, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> RunConfig {
    let mut cfg = tiny_config();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg
}

#[test]
fn gen_without_scenes_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_gen(&quick().scene, 5, 0, dir.path()).unwrap();
    assert!(m.entries.is_empty());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["manifest.json"]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::NoScenes(_))));
}

#[test]
fn gen_is_byte_identical_and_hashed() {
    let cfg = quick();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = cmd_gen(&cfg.scene, 9, 100, a.path()).unwrap();
    cmd_gen(&cfg.scene, 9, 100, b.path()).unwrap();
    assert_eq!(ma.entries.len(), 100);
    for e in &ma.entries {
        let bytes = fs::read(a.path().join(&e.file)).unwrap();
        assert_eq!(bytes, fs::read(b.path().join(&e.file)).unwrap());
        assert_eq!(sha256_hex(&bytes), e.sha256);
    }
    let manifest = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.path().join("manifest.json")).unwrap());
    let parsed: Manifest = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(parsed, ma);
    assert_eq!(load_dataset(a.path()).unwrap().len(), 100);
    // a tampered scene is rejected
    let f = a.path().join(&ma.entries[3].file);
    let mut text = fs::read_to_string(&f).unwrap();
    text.push(' ');
    fs::write(&f, text).unwrap();
    assert!(load_dataset(a.path()).is_err());
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let cfg = RunConfig { train: poifusion_core::harness::TrainConfig { epochs: 0, ..quick().train }, ..quick() };
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    cmd_gen(&cfg.scene, 1, 2, data.path()).unwrap();
    let summary = cmd_train(&cfg, data.path(), out.path()).unwrap();
    assert_eq!(summary.steps, 0);
    let init = Model::new(cfg.model.clone(), &cfg.scene.grid, cfg.seed).unwrap();
    let mut bytes = Vec::new();
    init.save_checkpoint(&mut bytes).unwrap();
    assert_eq!(fs::read(out.path().join("checkpoint.bin")).unwrap(), bytes);
}

#[test]
fn first_step_loss_is_reproducible_exactly() {
    let mut cfg = quick();
    cfg.train.batch_size = 1;
    let scene = generate_scene(&cfg.scene, 17).unwrap();
    let trained = poifusion_core::harness::train(&cfg, std::slice::from_ref(&scene), None).unwrap();
    // recompute the first step from scratch on its random stream
    let model = Model::new(cfg.model.clone(), &cfg.scene.grid, cfg.seed).unwrap();
    let atlas = OracleEncoder::new(&cfg.scene).encode(&scene).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, 0), 0));
    let inputs = SceneInputs { atlas: &atlas, rig: &scene.rig, grid: &scene.grid };
    let outs = model.forward(&mut tape, &p, &inputs, &mut rng).unwrap();
    let (_, b) = set_loss(&mut tape, &outs, &scene.boxes, &cfg.loss).unwrap();
    assert_eq!(trained.summary.first_step_loss.unwrap().to_bits(), b.total.to_bits());
    let again = poifusion_core::harness::train(&cfg, &[scene], None).unwrap();
    assert_eq!(again.summary, trained.summary);
}

#[test]
fn worker_count_does_not_change_training() {
    let cfg = quick();
    let scenes: Vec<_> = (0..4).map(|s| generate_scene(&cfg.scene, s).unwrap()).collect();
    let one = poifusion_core::harness::train(&cfg, &scenes, None).unwrap();
    let mut par = cfg.clone();
    par.train.workers = 3;
    let three = poifusion_core::harness::train(&par, &scenes, None).unwrap();
    for id in one.model.params.ids() {
        assert_eq!(one.model.params.get(id), three.model.params.get(id));
    }
}

#[test]
fn gen_train_eval_is_deterministic() {
    let cfg = quick();
    let run = || {
        let root = tempfile::tempdir().unwrap();
        let (train, eval, out) = (root.path().join("train"), root.path().join("eval"), root.path().join("run"));
        cmd_gen(&cfg.scene, 1, 4, &train).unwrap();
        cmd_gen(&cfg.scene, 2, 3, &eval).unwrap();
        cmd_train(&cfg, &train, &out).unwrap();
        let corr = [Corruption::CameraDrop { cameras: None }];
        cmd_eval(&cfg, &out.join("checkpoint.bin"), &eval, &corr, &out).unwrap();
        let report = fs::read(out.join("eval_report.json")).unwrap();
        let log = fs::read(out.join("train_log.csv")).unwrap();
        (report, log, root)
    };
    let (r1, l1, root) = run();
    let (r2, l2, _) = run();
    assert_eq!(r1, r2);
    assert_eq!(l1, l2);
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report["config_hash"], cfg.hash());
    assert_eq!(report["num_scenes"], 3);
    assert_eq!(report["calibration_sweep"].as_array().unwrap().len(), 6);
    assert_eq!(report["center_error_per_iteration"].as_array().unwrap().len(), cfg.model.iterations);
    let out = root.path().join("run");
    for f in ["checkpoint.bin", "best.bin", "train_summary.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = String::from_utf8(l1).unwrap();
    assert_eq!(log.lines().next(), Some("step,epoch,lr,total,cls,reg"));
    assert_eq!(log.lines().count(), 1 + 2);
}

#[test]
fn empty_evaluation_set_is_rejected() {
    let cfg = quick();
    let model = Model::new(cfg.model.clone(), &cfg.scene.grid, 0).unwrap();
    match evaluate(&model, &cfg, &[], None) {
        Err(e @ Error::NoScenes(_)) => assert!(e.to_string().contains("no scenes")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_gradcheck(&cfg, &GradcheckOptions::default(), dir.path()).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_error < 1e-3);
    let blocks: Vec<&str> = report.blocks.iter().map(|b| b.block.as_str()).collect();
    for b in ["attn", "ffn", "fusion", "head", "poi", "query", "sampling"] {
        assert!(blocks.contains(&b), "{b}");
    }
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], true);
    let bad =
        gradcheck(&cfg, &GradcheckOptions { corrupt_block: Some("fusion".into()), ..GradcheckOptions::default() })
            .unwrap();
    assert!(!bad.passed);
    let failing: Vec<&str> = bad.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect();
    assert_eq!(failing, vec!["fusion"]);
}

#[test]
fn chart_is_valid_deterministic_svg() {
    let s = [
        Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)] },
        Series { name: "b".into(), points: vec![(0.0, 0.2)] },
    ];
    let svg = line_chart_svg("Title & more", "x", "y", &s);
    assert_eq!(svg, line_chart_svg("Title & more", "x", "y", &s));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("Title &amp; more"));
    // empty series still render a frame
    let empty = line_chart_svg("none", "x", "y", &[]);
    assert!(empty.contains("</svg>"));
}

#[test]
fn report_collects_available_results() {
    let cfg = quick();
    let root = tempfile::tempdir().unwrap();
    let (train, run) = (root.path().join("train"), root.path().join("run"));
    cmd_gen(&cfg.scene, 1, 2, &train).unwrap();
    cmd_train(&cfg, &train, &run).unwrap();
    cmd_eval(&cfg, &run.join("checkpoint.bin"), &train, &[], &run).unwrap();
    let (a, b) = (root.path().join("ra"), root.path().join("rb"));
    let sa = cmd_report(&run, &a).unwrap();
    cmd_report(&run, &b).unwrap();
    assert_eq!(sa.figures, vec!["loss.svg", "center_error.svg", "calibration_sweep.svg"]);
    assert!(sa.map.is_some() && sa.train.is_some() && sa.gradcheck_passed.is_none());
    for f in ["loss.svg", "center_error.svg", "calibration_sweep.svg", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // an empty run directory yields an empty summary
    let empty = root.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let s = cmd_report(&empty, &root.path().join("re")).unwrap();
    assert!(s.figures.is_empty() && s.map.is_none());
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed == 3);
    assert!(matches!(RunConfig::from_json(r#"{"sed": 3}"#), Err(Error::Config(_)) | Err(Error::Json(_))));
    let cfg = quick();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert_eq!(cfg.hash(), RunConfig::from_json(&cfg.to_json()).unwrap().hash());
}
