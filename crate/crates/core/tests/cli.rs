use std::path::Path;
use std::process::{Command, Output};

fn atn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const TINY_COPY: &str = r#"
task = "copy"
T = 5
mode = "atn"
k = 3
hidden = 6
batch = 4
optimizer = "rmsprop"
lr = 1e-3
iterations = 6
eval_every = 3

[quick]
iterations = 2
"#;

const TINY_STATS: &str = r#"
task = "add"
T = 12
mode = "atn"
k = 5
hidden = 8
batch = 6
optimizer = "rmsprop"
lr = 1e-3
iterations = 1
gamma_beta_trainable = false
"#;

#[test]
fn every_subcommand_has_help() {
    for sub in ["train", "gradcheck", "stats", "ksweep", "gen-task"] {
        let out = atn(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(
            text.contains("--seed") && text.contains("--out"),
            "{sub} help lacks common flags:\n{text}"
        );
    }
    assert!(atn(&["--help"]).status.success());
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    let out = atn(&["evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = atn(&["gradcheck", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn train_writes_metrics_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_COPY);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = atn(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("config.toml").exists());
        csvs.push(std::fs::read(out_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "iteration,train_loss,val_loss,val_accuracy,wall_time,grad_norm"
    );
    assert_eq!(lines.len(), 3);
}

#[test]
fn quick_preset_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_COPY);
    let out_dir = dir.path().join("q");
    let out = atn(&[
        "train",
        "--config",
        &cfg,
        "--quick",
        "--set",
        "eval_every=1",
        "--mode",
        "ln",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let written = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(written.contains("mode = \"ln\""), "{written}");
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY_COPY.replace("hidden = 6", "hidden = 0"));
    let out = atn(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hidden"));

    let cfg = write_config(
        dir.path(),
        &format!("{TINY_COPY}\nmomentum = 0.9\n").replace("[quick]\niterations = 2\n", ""),
    );
    let out = atn(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn missing_config_file_is_reported() {
    let out = atn(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn gradcheck_exit_code_tracks_verdict() {
    let out = atn(&["gradcheck", "--mode", "atn", "--k", "3", "--T", "6"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    let dir = tempfile::tempdir().unwrap();
    let out = atn(&[
        "gradcheck",
        "--mode",
        "atn",
        "--k",
        "3",
        "--T",
        "6",
        "--stop-window-gradient",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["groups"].as_array().unwrap().len() > 5);
}

#[test]
fn stats_json_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_STATS);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = atn(&[
            "stats",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        files.push(std::fs::read(out_dir.join("stats.json")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let records: Vec<serde_json::Value> = serde_json::from_slice(&files[0]).unwrap();
    assert_eq!(records.len(), 3 * 12);
    let keys: Vec<&String> = records[0].as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
    for key in ["site", "t", "mean", "var"] {
        assert!(records[0].get(key).is_some());
    }
}

#[test]
fn stats_rejects_trainable_gains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY_STATS.replace("gamma_beta_trainable = false", ""));
    let out = atn(&["stats", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma_beta_trainable"));
}

#[test]
fn ksweep_writes_one_csv_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_COPY);
    let out_dir = dir.path().join("sweep");
    let out = atn(&[
        "ksweep",
        "--config",
        &cfg,
        "--quick",
        "--k-list",
        "2,4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["metrics-k2.csv", "metrics-k4.csv"]);
}

#[test]
fn gen_task_writes_batch_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = atn(&[
        "gen-task",
        "--task",
        "copy",
        "--T",
        "4",
        "--batch",
        "2",
        "--seed",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let batch: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("batch.json")).unwrap()).unwrap();
    assert_eq!(batch["inputs"].as_array().unwrap().len(), 24);
    assert_eq!(batch["meta"]["task"], "copy");

    let out = atn(&["gen-task", "--task", "denoise", "--T", "5"]);
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        for quick in [false, true] {
            atn::harness::TrainConfig::parse(&text, quick, &[])
                .and_then(|c| c.validate())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        seen += 1;
    }
    assert!(seen >= 5);
}
