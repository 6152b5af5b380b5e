use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn oceanmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oceanmae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = oceanmae(args);
    assert!(
        out.status.success(),
        "oceanmae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Manifest and array files of a dataset directory.
fn dataset_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "f32") || p.ends_with("manifest.json"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn gen_data(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--seed",
        seed,
        "--n-samples",
        "6",
        "--image-size",
        "16",
        "--channels",
        "3",
        "--n-classes",
        "3",
    ]);
    data
}

fn pretrain(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("pre");
    let mut args = vec![
        "pretrain",
        "--data",
        s(data),
        "--out",
        s(&out),
        "--epochs",
        "2",
        "--batch-size",
        "3",
        "--seed",
        "1",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = gen_data(a.path(), "5");
    let db = gen_data(b.path(), "5");
    let files = dataset_files(&da);
    assert_eq!(files.len(), 1 + 6 * 5);
    assert_eq!(files, dataset_files(&db));

    let c = tempfile::tempdir().unwrap();
    let dc = gen_data(c.path(), "6");
    assert_ne!(files, dataset_files(&dc));

    let manifest = json(&da.join("manifest.json"));
    assert_eq!(manifest["meta"]["sample_ids"].as_array().unwrap().len(), 6);
    let summary = json(&da.join("summary.json"));
    assert!(summary["depth_min"].as_f64().unwrap() >= -30.3);
    assert!(summary["depth_max"].as_f64().unwrap() <= 0.0);
}

#[test]
fn invalid_geometry_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = oceanmae(&[
        "gen-data",
        "--out",
        s(&tmp.path().join("d")),
        "--image-size",
        "0",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("image_size"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"pretrain": {"epochz": 3}}"#).unwrap();
    let out = oceanmae(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn pretrain_writes_history_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "2");
    let pre = pretrain(tmp.path(), &data, &[]);
    let csv = std::fs::read_to_string(pre.join("loss_history.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,loss");
    assert_eq!(rows.len(), 3);
    assert!(pre.join("checkpoint/manifest.json").exists());
    let summary = json(&pre.join("summary.json"));
    assert_eq!(summary["epochs"], 2);
    assert!(summary["max_abs_proj_weight_grad"].as_f64().unwrap() > 0.0);
    let echoed = json(&pre.join("resolved_config.json"));
    assert_eq!(echoed["pretrain"]["epochs"], 2);
    assert_eq!(echoed["model"]["channels"], 3);
}

#[test]
fn no_ocean_run_keeps_projection_gradient_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "3");
    let pre = pretrain(tmp.path(), &data, &["--no-ocean"]);
    let summary = json(&pre.join("summary.json"));
    assert_eq!(summary["no_ocean"], true);
    assert_eq!(summary["max_abs_proj_weight_grad"].as_f64(), Some(0.0));
}

#[test]
fn fe_finetune_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "4");
    let pre = pretrain(tmp.path(), &data, &[]);
    let ft = tmp.path().join("ft");
    let checkpoint = pre.join("checkpoint");
    ok(&[
        "finetune",
        "--data",
        s(&data),
        "--checkpoint",
        s(&checkpoint),
        "--strategy",
        "fe",
        "--task",
        "seg",
        "--epochs",
        "2",
        "--out",
        s(&ft),
        "--seed",
        "1",
    ]);
    let summary = json(&ft.join("summary.json"));
    assert_eq!(
        summary["encoder_fingerprint_before"],
        summary["encoder_fingerprint_after"]
    );
    assert_eq!(summary["cache_misses"], 6);
    assert_eq!(summary["cache_hits"], 6);
    assert!(ft.join("embeddings/manifest.json").exists());
    let history = std::fs::read_to_string(ft.join("metric_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let ev = tmp.path().join("ev");
    let ft_ckpt = ft.join("checkpoint");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ft_ckpt),
        "--out",
        s(&ev),
        "--dump-predictions",
    ]);
    let report = json(&ev.join("report.json"));
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    for k in [
        "pa",
        "miou",
        "macro_f1",
        "per_class_iou",
        "mae",
        "rmse",
        "stddev",
        "n_valid",
    ] {
        assert!(keys.iter().any(|x| *x == k), "missing {k}");
    }
    assert!(report["mae"].is_null());
    let pa = report["pa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pa));
    let csv = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(csv.starts_with("pa,miou,macro_f1,per_class_iou,mae,rmse,stddev,n_valid\n"));

    // Scoring the dumped predictions against themselves is perfect.
    let self_ev = tmp.path().join("self");
    let dump = ev.join("predictions");
    ok(&[
        "evaluate",
        "--data",
        s(&dump),
        "--checkpoint",
        s(&ft_ckpt),
        "--out",
        s(&self_ev),
    ]);
    assert_eq!(json(&self_ev.join("report.json"))["pa"], 1.0);

    // Evaluation is deterministic.
    let ev2 = tmp.path().join("ev2");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ft_ckpt),
        "--out",
        s(&ev2),
    ]);
    assert_eq!(
        std::fs::read(ev.join("report.json")).unwrap(),
        std::fs::read(ev2.join("report.json")).unwrap()
    );
}

#[test]
fn random_bathy_and_ff_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "7");
    let rnd = tmp.path().join("rnd");
    ok(&[
        "finetune",
        "--data",
        s(&data),
        "--strategy",
        "random",
        "--task",
        "bathy",
        "--epochs",
        "1",
        "--out",
        s(&rnd),
    ]);
    let report = json(&rnd.join("summary.json"));
    assert!(report["train_metrics"]["mae"].as_f64().unwrap() >= 0.0);

    let pre = pretrain(tmp.path(), &data, &[]);
    let ff = tmp.path().join("ff");
    let checkpoint = pre.join("checkpoint");
    ok(&[
        "finetune",
        "--data",
        s(&data),
        "--checkpoint",
        s(&checkpoint),
        "--strategy",
        "ff",
        "--epochs",
        "1",
        "--out",
        s(&ff),
    ]);
    let summary = json(&ff.join("summary.json"));
    assert_ne!(
        summary["encoder_fingerprint_before"],
        summary["encoder_fingerprint_after"]
    );
    assert!(
        json(&ff.join("resolved_config.json"))["strategy"]["encoder_lr"]
            .as_f64()
            .unwrap()
            > 0.0
    );
}

#[test]
fn fixed_strategy_needs_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "8");
    let out = oceanmae(&[
        "finetune",
        "--data",
        s(&data),
        "--strategy",
        "fe",
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn embed_writes_a_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "9");
    let pre = pretrain(tmp.path(), &data, &[]);
    let emb = tmp.path().join("emb");
    let checkpoint = pre.join("checkpoint");
    ok(&[
        "embed",
        "--data",
        s(&data),
        "--checkpoint",
        s(&checkpoint),
        "--strategy",
        "fe",
        "--out",
        s(&emb),
    ]);
    let summary = json(&emb.join("summary.json"));
    assert_eq!(summary["n_embeddings"], 6);
    let pre_summary = json(&pre.join("summary.json"));
    assert_eq!(
        summary["encoder_fingerprint"],
        pre_summary["encoder_fingerprint"]
    );
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "10");
    let pre = pretrain(tmp.path(), &data, &[]);

    // Replay the echoed configuration into a fresh directory.
    let mut cfg = json(&pre.join("resolved_config.json"));
    let replay = tmp.path().join("replay");
    cfg["out_dir"] = Value::String(s(&replay).into());
    let cfg_path = tmp.path().join("replay.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    ok(&["pretrain", "--config", s(&cfg_path)]);

    for f in ["loss_history.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(pre.join(f)).unwrap(),
            std::fs::read(replay.join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_eq!(
        dataset_files(&pre.join("checkpoint")),
        dataset_files(&replay.join("checkpoint"))
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), "11");
    let run = |threads: &str, name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_oceanmae"))
            .env("OCEANMAE_THREADS", threads)
            .args([
                "pretrain",
                "--data",
                s(&data),
                "--out",
                s(&out),
                "--epochs",
                "2",
                "--batch-size",
                "3",
            ])
            .output()
            .unwrap();
        assert!(status.status.success());
        std::fs::read(out.join("loss_history.csv")).unwrap()
    };
    assert_eq!(run("1", "one"), run("4", "four"));
}
