use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lungref::trainer::TrainConfig;

fn lungref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungref"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) {
    let o = lungref(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--n-train",
        "4",
        "--n-val",
        "2",
        "--n-test",
        "2",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(path: &Path, edit: impl FnOnce(&mut TrainConfig)) {
    let mut c = TrainConfig {
        epochs_total: 1,
        batch_size: 4,
        label_ratio: 1.0,
        ..TrainConfig::default()
    };
    edit(&mut c);
    fs::write(path, c.to_json()).unwrap();
}

#[test]
fn gen_data_writes_the_requested_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    gen_small(&dir);
    let manifest = fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    let samples = manifest
        .lines()
        .filter(|l| l.contains(r#""type":"sample""#))
        .count();
    assert_eq!(samples, 8);
    assert_eq!(fs::read_dir(dir.join("images")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(dir.join("masks")).unwrap().count(), 8);
}

#[test]
fn gen_data_rejects_an_empty_training_split() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lungref(&[
        "gen-data",
        "--out",
        tmp.path().to_str().unwrap(),
        "--n-train",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_fail_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let cfg = tmp.path().join("bad.json");
    let mut json: serde_json::Value =
        serde_json::from_str(&TrainConfig::default().to_json()).unwrap();
    json["warmup"] = serde_json::json!(3);
    fs::write(&cfg, json.to_string()).unwrap();
    let o = lungref(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));
}

#[test]
fn train_then_eval_reports_dice_and_miou() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, |_| {});
    let run = tmp.path().join("run");
    let o = lungref(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("metrics.jsonl").exists());
    assert!(run.join("final.ckpt").exists());

    let ckpt = run.join("best.ckpt");
    let o = lungref(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("mean_dice"), "{text}");
    assert!(text.contains("miou"), "{text}");
    let report = fs::read_to_string(run.join("eval_test.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3, "two samples plus a summary line");

    let o = lungref(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "holdout",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augshow_with_gate_closed_leaves_views_unmixed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, |c| c.delta_gate = 1.5);
    let out = tmp.path().join("show");
    let o = lungref(&[
        "augshow",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n",
        "4",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..4 {
        let weak = fs::read(out.join(format!("{k:03}_weak.pgm"))).unwrap();
        let mixed = fs::read(out.join(format!("{k:03}_mixed.pgm"))).unwrap();
        assert_eq!(weak, mixed, "sample {k}");
        let caption = fs::read_to_string(out.join(format!("{k:03}_caption.txt"))).unwrap();
        assert!(caption.contains("applied: false"), "{caption}");
    }
}

#[test]
fn ablate_produces_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, |_| {});
    let out = tmp.path().join("ablate");
    let o = lungref(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out.join("ablation.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    for name in ["Baseline", "+T-S EMA", "+PosAug", "+T-PatchMix", "+ITCL"] {
        assert!(table.contains(name), "{table}");
    }
}
