use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ctxdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxdet"))
        .args(args)
        .env_remove("CTXDET_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast model and corpus settings shared by the training tests.
const TINY: [&str; 6] = [
    "--set",
    "model.width_multiplier=0.0625",
    "--set",
    "model.head_depth=1",
    "--set",
    "train.batch_size=4",
];

fn generate(dir: &Path, det: usize, seg: usize, seed: u64) -> String {
    ok(&ctxdet(&[
        "generate-data",
        "--det",
        &det.to_string(),
        "--seg",
        &seg.to_string(),
        "--seed",
        &seed.to_string(),
        "--image-size",
        "64",
        "--out",
        s(dir),
    ]))
}

fn manifest_hash(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.split_once(" sha256 ").map(|(_, h)| h.trim().to_string()))
        .expect("hash line")
}

fn train(data: &Path, out: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--mode", mode];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    ctxdet(&args)
}

fn log_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_data_is_reproducible_and_rejects_empty_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ha = manifest_hash(&generate(&a, 8, 8, 1));
    let hb = manifest_hash(&generate(&b, 8, 8, 1));
    assert_eq!(ha, hb);
    let images = std::fs::read_dir(a.join("images")).unwrap().count();
    let masks = std::fs::read_dir(a.join("masks")).unwrap().count();
    assert_eq!((images, masks), (16, 8));

    let out = ctxdet(&["generate-data", "--det", "0", "--seg", "0", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty corpus"));
}

#[test]
fn data_root_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ctxdet"))
        .args(["generate-data", "--det", "2", "--seg", "0", "--image-size", "64", "--out", "corpus"])
        .env("CTXDET_DATA_ROOT", tmp.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("corpus/manifest.json").is_file());
}

#[test]
fn configuration_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = ctxdet(&["train", "--set", "train.epoch=3", "--data", s(tmp.path())]);
    assert_eq!(bad_key.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad_key.stderr));
    let odd_batch = ctxdet(&["train", "--batch-size", "3", "--data", s(tmp.path())]);
    assert_eq!(odd_batch.status.code(), Some(2));
    let missing = ctxdet(&["train", "--data", s(&tmp.path().join("nowhere"))]);
    assert_eq!(missing.status.code(), Some(3));
    let no_ckpt = ctxdet(&["eval", "--checkpoint", s(&tmp.path().join("x.ckpt")), "--data", s(tmp.path())]);
    assert_eq!(no_ckpt.status.code(), Some(3));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 2, 2, 3);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "mode = \"seg-only\"\n[train]\nepochs = 5\nbatch_size = 2\n").unwrap();
    let out = tmp.path().join("run");
    let res = train(&data, &out, "det-only", &["--config", s(&cfg), "--epochs", "1"]);
    ok(&res);
    let effective = std::fs::read_to_string(out.join("effective-config.toml")).unwrap();
    assert!(effective.contains("mode = \"det-only\""), "{effective}");
    assert!(effective.contains("epochs = 1"), "{effective}");
    // TINY sets batch_size 4 via --set, which also beats the file
    assert!(effective.contains("batch_size = 4"), "{effective}");
}

#[test]
fn train_logs_terms_per_mode_and_eval_checks_the_task() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 4, 4, 5);

    let joint = tmp.path().join("joint");
    ok(&train(&data, &joint, "joint-context", &["--epochs", "2"]));
    let log = log_lines(&joint.join("metrics.jsonl"));
    assert_eq!(log.len(), 4);
    for rec in &log {
        for key in ["l_reg", "l_obj", "l_cls", "l_ce", "l_iou"] {
            assert!(rec[key].as_f64().unwrap() > 0.0, "{key} in {rec}");
        }
    }

    let det = tmp.path().join("det");
    ok(&train(&data, &det, "det-only", &["--epochs", "1"]));
    for rec in log_lines(&det.join("metrics.jsonl")) {
        assert_eq!(rec["l_ce"].as_f64(), Some(0.0));
        assert_eq!(rec["l_iou"].as_f64(), Some(0.0));
    }

    let seg = tmp.path().join("seg");
    ok(&train(&data, &seg, "seg-only", &["--epochs", "1"]));
    let ckpt = seg.join("checkpoints/last.ckpt");
    let refused = ctxdet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "det"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("no trained detection head"));

    let seg_report: Value = serde_json::from_str(&ok(&ctxdet(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
    ])))
    .unwrap();
    assert!(seg_report["segmentation"]["miou"].is_number());
    assert!(seg_report.get("detection").is_none());

    let rules = tmp.path().join("rules.json");
    std::fs::write(
        &rules,
        r#"{"caries_enamel": ["enamel"], "caries_dentin": ["dentin"], "bone_loss_mild": ["bone", "root_dentin", "background"],
            "bone_loss_severe": ["bone", "root_dentin", "background"], "periapical_lesion": ["bone", "root_dentin", "pulp"],
            "calculus": ["enamel", "background"]}"#,
    )
    .unwrap();
    let curves = tmp.path().join("pr.csv");
    let report_path = tmp.path().join("report.json");
    ok(&ctxdet(&[
        "eval",
        "--checkpoint",
        s(&joint.join("checkpoints/last.ckpt")),
        "--data",
        s(&data),
        "--filter-rules",
        s(&rules),
        "--out",
        s(&report_path),
        "--pr-curves",
        s(&curves),
    ]));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["detection", "detection_filtered", "segmentation"] {
        assert!(report.get(key).is_some(), "{key} missing from {report}");
    }
    assert!(std::fs::read_to_string(&curves).unwrap().starts_with("class_id,"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 4, 4, 9);
    let full = tmp.path().join("full");
    ok(&train(&data, &full, "joint-context", &["--epochs", "3"]));

    let part = tmp.path().join("part");
    ok(&train(&data, &part, "joint-context", &["--epochs", "3", "--max-steps", "3"]));
    assert!(part.join("checkpoints/step-000003.ckpt").is_file());
    ok(&train(
        &data,
        &part,
        "joint-context",
        &["--epochs", "3", "--resume", s(&part.join("checkpoints/last.ckpt"))],
    ));

    let a = log_lines(&full.join("metrics.jsonl"));
    let b = log_lines(&part.join("metrics.jsonl"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b, "resumed trajectory differs");
}

#[test]
fn ablate_writes_a_four_by_six_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let test_dir = tmp.path().join("test");
    generate(&train_dir, 2, 2, 11);
    ok(&ctxdet(&[
        "generate-data", "--det", "2", "--seg", "2", "--seed", "11", "--split", "test", "--image-size", "64", "--out",
        s(&test_dir),
    ]));
    let out = tmp.path().join("abl");
    let mut args = vec![
        "ablate", "--data", s(&train_dir), "--test-data", s(&test_dir), "--seeds", "0", "--epochs", "1", "--out", s(&out),
    ];
    args.extend_from_slice(&TINY);
    ok(&ctxdet(&args));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 7));
    let det_only = rows.iter().find(|r| r[0] == "det-only").unwrap();
    assert!(det_only[4..].iter().all(|c| c.is_empty()));
    assert!(det_only[1..4].iter().all(|c| !c.is_empty()));
    let seg_only = rows.iter().find(|r| r[0] == "seg-only").unwrap();
    assert!(seg_only[1..4].iter().all(|c| c.is_empty()));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}
