use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccda::nets::{DiscSpec, EncoderSpec, Model};
use serde_json::{json, Value};

fn ccda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccda")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small scene, small model: fast enough for many invocations.
fn tiny_config(dir: &Path, extra: Value) -> PathBuf {
    let mut doc = json!({
        "scene": {"image_height": 32, "image_width": 32, "num_classes": 4, "train_images": 6, "eval_images": 3},
        "train": {
            "iterations": 10,
            "crop_height": 32,
            "crop_width": 32,
            "encoder": {"feature_channels": 8, "stride": 4, "depth": 2},
            "disc_fine_hidden": [8, 8],
            "disc_coarse_hidden": [8, 8]
        },
        "eval": {"seeds": [0, 1]}
    });
    merge(&mut doc, extra);
    let path = dir.join("config.json");
    fs::write(&path, doc.to_string()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn generate(dir: &Path, config: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = ccda(&["generate", "--config", s(config), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_two_manifests_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = ccda(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let printed = stdout(&out);
        assert_eq!(printed.lines().count(), 2);
        assert!(dir.join("source/manifest.json").is_file());
        assert!(dir.join("target/manifest.json").is_file());
        assert!(!dir.join(".lock").exists());
    }
    assert_eq!(read_tree(&a), read_tree(&b));
    let resolved: Value = serde_json::from_slice(&fs::read(a.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["scene"]["seed"], 5);
    assert_eq!(resolved["provenance"]["train.adam_beta2"], "paper");
}

#[test]
fn default_config_generates_the_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccda(&["generate", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: Value = serde_json::from_slice(&fs::read(tmp.path().join("d/source/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["splits"]["train"].as_array().unwrap().len(), 200);
    assert_eq!(manifest["num_classes"], 5);
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = ccda(&["generate", "--out", s(&file.join("sub"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("plain"), "{}", stderr(&out));
}

#[test]
fn validation_problems_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"iteratons": 3}}"#).unwrap();
    let out = ccda(&["generate", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("iteratons"));

    let cfg = tiny_config(tmp.path(), json!({}));
    let out = ccda(&["generate", "--config", s(&cfg), "--device", "gpu0", "--out", s(&tmp.path().join("y"))]);
    assert_eq!(code(&out), 2);

    let cfg = tiny_config(tmp.path(), json!({"train": {"crop_height": 20}}));
    let out = ccda(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("z"))]);
    assert_eq!(code(&out), 2);

    let out = ccda(&["train", "--variant", "fancy", "--source", "a", "--target", "b", "--out", "c"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_smoke_run_is_reproducible_from_its_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let data = generate(tmp.path(), &cfg);
    let (src, tgt) = (data.join("source"), data.join("target"));
    let run1 = tmp.path().join("run1");
    let out = ccda(&[
        "train", "--config", s(&cfg), "--source", s(&src), "--target", s(&tgt), "--out", s(&run1), "--verify-isolation", "--plots",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = fs::read_to_string(run1.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert!(run1.join("loss.png").is_file());
    assert!(Path::new(stdout(&out).trim()).is_file());

    let run2 = tmp.path().join("run2");
    let resolved = run1.join("config.resolved.json");
    let out = ccda(&["train", "--config", s(&resolved), "--source", s(&src), "--target", s(&tgt), "--out", s(&run2)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(run1.join("log.csv")).unwrap(), fs::read(run2.join("log.csv")).unwrap());
    assert_eq!(fs::read(&resolved).unwrap(), fs::read(run2.join("config.resolved.json")).unwrap());
}

#[test]
fn variant_flag_selects_the_ladder_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({"train": {"iterations": 3}}));
    let data = generate(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    let out = ccda(&[
        "train", "--config", s(&cfg), "--variant", "basic", "--source", s(&data.join("source")), "--target",
        s(&data.join("target")), "--out", s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = ccda::trainer::read_log(&run.join("log.csv")).unwrap();
    for row in rows {
        for t in [ccda::losses::Term::D2, ccda::losses::Term::Adv2, ccda::losses::Term::DCoarse, ccda::losses::Term::AdvCoarse] {
            assert_eq!(row.get(t), Some(0.0));
        }
    }
}

#[test]
fn missing_manifest_is_named_and_locked_runs_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let missing = tmp.path().join("nowhere/manifest.json");
    let out = ccda(&["train", "--config", s(&cfg), "--source", s(&missing), "--target", s(&missing), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(s(&missing)), "{}", stderr(&out));

    let data = generate(tmp.path(), &cfg);
    let run = tmp.path().join("locked");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".lock"), "1").unwrap();
    let out = ccda(&[
        "train", "--config", s(&cfg), "--source", s(&data.join("source")), "--target", s(&data.join("target")), "--out", s(&run),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({"train": {"checkpoint_every": 4}}));
    let data = generate(tmp.path(), &cfg);
    let (src, tgt) = (data.join("source"), data.join("target"));
    let full = tmp.path().join("full");
    let out = ccda(&["train", "--config", s(&cfg), "--source", s(&src), "--target", s(&tgt), "--out", s(&full)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // interrupted after step 8: the last checkpoint is gone, the log ran ahead
    let cut = tmp.path().join("cut");
    fs::create_dir_all(cut.join("checkpoints")).unwrap();
    for name in ["step-4.ckpt", "step-8.ckpt"] {
        fs::copy(full.join("checkpoints").join(name), cut.join("checkpoints").join(name)).unwrap();
    }
    fs::copy(full.join("log.csv"), cut.join("log.csv")).unwrap();
    let out = ccda(&["train", "--config", s(&cfg), "--source", s(&src), "--target", s(&tgt), "--out", s(&cut), "--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(full.join("log.csv")).unwrap(), fs::read(cut.join("log.csv")).unwrap());
    assert_eq!(
        fs::read(full.join("checkpoints/step-10.ckpt")).unwrap(),
        fs::read(cut.join("checkpoints/step-10.ckpt")).unwrap()
    );
}

fn save_model(path: &Path, classes: usize) {
    let cfg = ccda::trainer::TrainConfig::default();
    let model = Model::new(classes, cfg.encoder, cfg.disc_spec(classes), 3).unwrap();
    model.to_checkpoint(0, json!({})).save(path).unwrap();
}

#[test]
fn eval_of_random_init_is_near_chance_and_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = ccda(&["generate", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = tmp.path().join("random.ckpt");
    save_model(&ckpt, 5);
    let report_dir = tmp.path().join("report");
    let out = ccda(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("target")), "--reference", s(&data.join("source")), "--out",
        s(&report_dir), "--plots",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!(miou < 0.3, "{miou}");
    assert_eq!(report["rare_classes"], json!([4, 3]));
    assert!(fs::read_to_string(report_dir.join("report.csv")).unwrap().starts_with("metric,value\n"));
    assert!(report_dir.join("iou.png").is_file());

    let wrong = tmp.path().join("c4.ckpt");
    save_model(&wrong, 4);
    let out = ccda(&["eval", "--checkpoint", s(&wrong), "--data", s(&data.join("target")), "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(code(&out), 2);

    let spec_wrong = tmp.path().join("spec.ckpt");
    let model = Model::new(5, EncoderSpec::default(), DiscSpec::published(5), 0).unwrap();
    model.to_checkpoint(0, json!({})).save(&spec_wrong).unwrap();
    let tiny = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tiny.path(), json!({"scene": {"num_classes": 5}}));
    let small = generate(tiny.path(), &cfg);
    let out = ccda(&["eval", "--checkpoint", s(&spec_wrong), "--data", s(&small.join("source")), "--out", s(&tmp.path().join("r3"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn eval_of_a_memorised_pair_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        tmp.path(),
        json!({
            "scene": {"train_images": 2, "eval_images": 1, "num_classes": 3, "shapes_per_image": [1, 1]},
            "train": {"iterations": 600, "sgd_lr": 0.02, "encoder": {"feature_channels": 16, "stride": 1, "depth": 3}},
            "weights": {"lambda_s": 0.0, "lambda_t": 0.0, "lambda_c": 0.0, "alpha": 1.0, "beta": 1.0}
        }),
    );
    let data = generate(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    let out = ccda(&[
        "train", "--config", s(&cfg), "--source", s(&data.join("source")), "--target", s(&data.join("target")), "--out", s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = stdout(&out).trim().to_string();
    let report_dir = tmp.path().join("report");
    let out = ccda(&["eval", "--checkpoint", &ckpt, "--data", s(&data.join("source")), "--split", "train", "--out", s(&report_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["miou"].as_f64(), Some(1.0), "{report}");
}

#[test]
fn gradcheck_passes_and_flags_the_sign_flip_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccda(&["gradcheck", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
    let doc: Value = serde_json::from_slice(&fs::read(tmp.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(doc["results"].as_array().unwrap().iter().all(|r| r["passed"] == true));

    let out = ccda(&["gradcheck", "--instances", "3", "--inject-sign-flip"]);
    assert_eq!(code(&out), 3);
    let text = stdout(&out);
    assert_eq!(text.matches("FAIL").count(), 1, "{text}");

    let out = ccda(&["gradcheck", "--height", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_writes_the_ladder_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({"train": {"iterations": 4}}));
    let out_dir = tmp.path().join("ablation");
    let out = ccda(&["ablate", "--config", s(&cfg), "--seeds", "3,4", "--out", s(&out_dir), "--plots"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table: Value = serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 6);
    assert_eq!(table["seeds"], json!([3, 4]));
    let published: Vec<f64> = table["summary"].as_array().unwrap().iter().map(|s| s["published_miou"].as_f64().unwrap()).collect();
    assert_eq!(published, vec![34.9, 37.0, 37.7]);
    assert!(out_dir.join("report.csv").is_file());
    assert!(out_dir.join("ablation.png").is_file());
    assert!(out_dir.join("runs/full-seed4/log.csv").is_file());
}
