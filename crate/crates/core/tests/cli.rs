//! End-to-end command-line checks: the gensynth -> train -> eval -> predict
//! -> ensemble pipeline, exit codes, and output contracts.

use std::path::Path;
use std::process::{Command, Output};

fn avdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avdet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // generate
    let out = avdet(&["gensynth", "--n", "60", "--seed", "5", "--spec", "uni", "--out-dir", "d"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("d/data.jsonl").is_file());
    assert!(dir.join("d/images/s00000.mmt").is_file());

    // train (tiny run)
    let out = avdet(
        &[
            "train",
            "--data",
            "d/data.jsonl",
            "--model-dir",
            "model",
            "--epochs",
            "2",
            "--lr",
            "0.002",
            "--batch-size",
            "8",
            "--seed",
            "1",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("model/manifest.json").is_file());
    assert!(dir.join("model/history.csv").is_file());
    let history = std::fs::read_to_string(dir.join("model/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,train_acc,val_loss,val_acc"));

    // eval on the held-out split
    let out = avdet(&["eval", "--model", "model", "--data", "d/data.jsonl", "--use-test-split"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(metrics["accuracy"].as_f64().unwrap() >= 0.0);
    assert!(metrics.get("fn").is_some());

    // predict with attention dump
    let out = avdet(
        &[
            "predict",
            "--model",
            "model",
            "--data",
            "d/data.jsonl",
            "--out",
            "preds.csv",
            "--dump-attention",
            "att.jsonl",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = std::fs::read_to_string(dir.join("preds.csv")).unwrap();
    assert!(preds.starts_with("id,probability,decision\n"));
    assert_eq!(preds.lines().count(), 61, "60 posts plus header");
    // rows preserve input order
    assert!(preds.lines().nth(1).unwrap().starts_with("s00000,"));

    // attention weights sum to 1 per group
    let att = std::fs::read_to_string(dir.join("att.jsonl")).unwrap();
    let mut checked = 0;
    for line in att.lines().take(10) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for site in ["hashtag", "text", "fusion"] {
            if let Some(weights) = v["attention"][site]["weights"].as_array() {
                if weights.is_empty() {
                    continue;
                }
                let total: f64 = weights.iter().map(|w| w.as_f64().unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-5, "{site} weights sum {total}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn determinism_same_seed_same_checkpoint_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    avdet(&["gensynth", "--n", "40", "--seed", "9", "--spec", "uni", "--out-dir", "d"], dir);
    for tag in ["m1", "m2"] {
        let out = avdet(
            &[
                "train",
                "--data",
                "d/data.jsonl",
                "--model-dir",
                tag,
                "--epochs",
                "2",
                "--batch-size",
                "8",
                "--seed",
                "7",
            ],
            dir,
        );
        assert!(out.status.success());
    }
    let h1 = std::fs::read(dir.join("m1/history.csv")).unwrap();
    let h2 = std::fs::read(dir.join("m2/history.csv")).unwrap();
    assert_eq!(h1, h2);
    for entry in std::fs::read_dir(dir.join("m1/params")).unwrap() {
        let entry = entry.unwrap();
        let a = std::fs::read(entry.path()).unwrap();
        let b = std::fs::read(dir.join("m2/params").join(entry.file_name())).unwrap();
        assert_eq!(a, b, "{:?}", entry.file_name());
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // missing dataset: data error, exit 3
    let out = avdet(&["train", "--data", "nope.jsonl", "--model-dir", "m"], dir);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // odd synthetic size: usage error, exit 2
    let out = avdet(&["gensynth", "--n", "9", "--out-dir", "d"], dir);
    assert_eq!(out.status.code(), Some(2));

    // conflicting flags: unimodal subset with a fusion ablation, exit 2
    avdet(&["gensynth", "--n", "20", "--seed", "3", "--out-dir", "d2"], dir);
    let out = avdet(
        &[
            "train",
            "--data",
            "d2/data.jsonl",
            "--model-dir",
            "m",
            "--modalities",
            "caption",
            "--no-fusion",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // ensemble with a missing member checkpoint: exit 2
    let out = avdet(
        &["ensemble", "--fused", "m", "--data", "d2/data.jsonl"],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rules_only_ensemble_reproduces_worked_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("scores.csv"),
        "id,s_F,s_V,s_C,s_H,label\nex_max,0.4,0.3,0.35,0.9,1\nex_vote,0.2,0.3,0.8,0.9,1\n",
    )
    .unwrap();
    let out = avdet(&["ensemble", "--scores", "scores.csv", "--rules-only"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,mean,max,vote");
    // (0.4, 0.3, 0.35, 0.9): mean 0.4875 -> 0; max picks 0.9 -> 1; votes 0,0,0,1 -> 0
    assert_eq!(lines[1], "ex_max,0,1,0");
    // (0.2, 0.3, 0.8, 0.9): mean 0.55 -> 1; vote tie broken toward the high side -> 1
    assert_eq!(lines[2], "ex_vote,1,1,1");
}

#[test]
fn daily_counts_aggregate_by_date() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    avdet(&["gensynth", "--n", "20", "--seed", "2", "--spec", "uni", "--out-dir", "d"], dir);
    let out = avdet(
        &["train", "--data", "d/data.jsonl", "--model-dir", "m", "--epochs", "1", "--batch-size", "8"],
        dir,
    );
    assert!(out.status.success());

    // build a small dated stream reusing the generated images
    let src = std::fs::read_to_string(dir.join("d/data.jsonl")).unwrap();
    let mut stream = String::new();
    for (i, line) in src.lines().take(6).enumerate() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v["date"] = serde_json::json!(if i < 4 { "2019-11-01" } else { "2019-11-02" });
        v["label"] = serde_json::Value::Null;
        stream.push_str(&v.to_string());
        stream.push('\n');
    }
    std::fs::write(dir.join("d/stream.jsonl"), stream).unwrap();

    let out = avdet(
        &[
            "predict",
            "--model",
            "m",
            "--data",
            "d/stream.jsonl",
            "--out",
            "p.csv",
            "--daily-counts",
            "days.csv",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let days = std::fs::read_to_string(dir.join("days.csv")).unwrap();
    let lines: Vec<&str> = days.lines().collect();
    assert_eq!(lines[0], "date,total,antivaccine");
    assert!(lines[1].starts_with("2019-11-01,4,"));
    assert!(lines[2].starts_with("2019-11-02,2,"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    avdet(&["gensynth", "--n", "24", "--seed", "4", "--out-dir", "d"], dir);
    std::fs::write(dir.join("run.conf"), "epochs=1\nbatch-size=8\nlr=0.002\n").unwrap();

    // config file supplies epochs=1
    let out = avdet(
        &["train", "--data", "d/data.jsonl", "--model-dir", "m1", "--config", "run.conf"],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let h = std::fs::read_to_string(dir.join("m1/history.csv")).unwrap();
    assert_eq!(h.lines().count(), 2, "header plus one epoch");

    // explicit flag overrides the file
    let out = avdet(
        &[
            "train",
            "--data",
            "d/data.jsonl",
            "--model-dir",
            "m2",
            "--config",
            "run.conf",
            "--epochs",
            "2",
        ],
        dir,
    );
    assert!(out.status.success());
    let h = std::fs::read_to_string(dir.join("m2/history.csv")).unwrap();
    assert_eq!(h.lines().count(), 3, "header plus two epochs");
}
