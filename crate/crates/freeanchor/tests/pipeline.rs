//! End-to-end workflows through the CLI layer and file formats.

use std::fs;
use std::path::Path;

use freeanchor::cli;
use freeanchor::eval::EvalReport;
use freeanchor::model::Checkpoint;
use freeanchor::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetSpec};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["freeanchor"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn small_config(dir: &Path) -> String {
    let mut cfg = cli::ExperimentConfig::default();
    cfg.dataset.num_scenes = 10;
    cfg.dataset.seed = 5;
    cfg.train.iterations = 40;
    cfg.train.lr_milestones = vec![30];
    cfg.train.seed = 5;
    cfg.train.snapshot_every = None;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gzip_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        num_scenes: 6,
        seed: 9,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec).unwrap();
    for name in ["plain.jsonl", "packed.jsonl.gz"] {
        let path = dir.path().join(name);
        save_dataset(&path, &scenes).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), scenes);
    }
    // The gzip variant should actually be compressed.
    let plain = fs::metadata(dir.path().join("plain.jsonl")).unwrap().len();
    let packed = fs::metadata(dir.path().join("packed.jsonl.gz")).unwrap().len();
    assert!(packed < plain / 2, "gzip {packed} vs plain {plain}");
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data.jsonl.gz");
    let ckpt = dir.path().join("model.json");
    let log = dir.path().join("train.csv");
    let report = dir.path().join("report.json");
    let trace = dir.path().join("trace.csv");

    assert_eq!(run(&["generate", "--config", &cfg, "--output", data.to_str().unwrap()]), 0);
    let manifest = data.with_extension("manifest.json");
    let manifest_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(manifest_json["seed"], 5);
    assert_eq!(manifest_json["num_scenes"], 10);

    assert_eq!(
        run(&[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--output",
            ckpt.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
            "--config",
            &cfg,
        ]),
        0
    );
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("iteration,"));
    assert_eq!(log_text.lines().count(), 41);

    assert_eq!(
        run(&[
            "eval",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--output",
            report.to_str().unwrap(),
            "--config",
            &cfg,
        ]),
        0
    );
    let parsed: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed.ap >= 0.0 && parsed.ap <= 1.0);
    assert_eq!(parsed.nms_recall.per_tau.len(), 9);

    let scenes = load_dataset(&data).unwrap();
    let scene_id = scenes.iter().find(|s| !s.objects.is_empty()).unwrap().id;
    assert_eq!(
        run(&[
            "trace-matching",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--scene",
            &scene_id.to_string(),
            "--output",
            trace.to_str().unwrap(),
            "--config",
            &cfg,
        ]),
        0
    );
    let trace_text = fs::read_to_string(&trace).unwrap();
    assert!(trace_text.starts_with("iteration,anchor_index"));
    assert!(trace_text.lines().count() > 1);
}

#[test]
fn cli_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data.jsonl");
    assert_eq!(run(&["generate", "--config", &cfg, "--output", data.to_str().unwrap()]), 0);
    let mut checkpoints = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        assert_eq!(
            run(&[
                "train",
                "--dataset",
                data.to_str().unwrap(),
                "--output",
                out.to_str().unwrap(),
                "--config",
                &cfg,
            ]),
            0
        );
        checkpoints.push(fs::read(&out).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
}

#[test]
fn cli_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let mut cfg = cli::ExperimentConfig::default();
    cfg.dataset.num_scenes = 8;
    cfg.dataset.seed = 6;
    cfg.train.iterations = 30;
    cfg.train.lr_milestones = vec![];
    cfg.train.seed = 6;
    cfg.save(&cfg_path).unwrap();
    let cfg_str = cfg_path.to_str().unwrap();
    let data = dir.path().join("data.jsonl");
    assert_eq!(run(&["generate", "--config", cfg_str, "--output", data.to_str().unwrap()]), 0);

    // Uninterrupted 30-iteration run.
    let full = dir.path().join("full.json");
    assert_eq!(
        run(&["train", "--dataset", data.to_str().unwrap(), "--output", full.to_str().unwrap(), "--config", cfg_str]),
        0
    );

    // 15 iterations, then resume to 30.
    let half_cfg_path = dir.path().join("half.jsonc");
    let mut half_cfg = cfg.clone();
    half_cfg.train.iterations = 15;
    half_cfg.save(&half_cfg_path).unwrap();
    let half = dir.path().join("half.json");
    assert_eq!(
        run(&[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--output",
            half.to_str().unwrap(),
            "--config",
            half_cfg_path.to_str().unwrap(),
        ]),
        0
    );
    let resumed = dir.path().join("resumed.json");
    assert_eq!(
        run(&[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--output",
            resumed.to_str().unwrap(),
            "--config",
            cfg_str,
            "--resume",
            half.to_str().unwrap(),
        ]),
        0
    );
    let a = Checkpoint::load(&full).unwrap();
    let b = Checkpoint::load(&resumed).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(run(&["gradcheck", "--instances", "3"]), 0);
    assert_eq!(run(&["gradcheck", "--instances", "3", "--corrupt-gradient"]), 1);
}

#[test]
fn malformed_dataset_is_reported_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, "{\"id\":0,\"width\":4,\"height\":4,\"objects\":[],\"raster\":\"AAAAAAAAAAAAAAAAAAAAAA==\"}\nnot json\n").unwrap();
    let err = load_dataset(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('2'), "error should name line 2: {msg}");
}
