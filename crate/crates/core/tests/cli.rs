//! Command-line contract: artifacts, exit codes, atomic outputs.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pangram-fusion"))
        .args(args)
        .env("PANGRAM_FUSION_THREADS", "2")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn synth(dir: &Path, n: &str) {
    let o = run(&["synth", "--out", &s(dir), "--n", n, "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_train_evaluate_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "200");
    let manifest = s(&data.join("manifest.csv"));
    let feats = format!("acoustic={}", s(&data.join("acoustic.csv")));
    let run_dir = tmp.path().join("run");
    let o = run(&["train", "--manifest", &manifest, "--features", &feats, "--out", &s(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "history.csv", "split.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,total,bce,cos,rec,val_auroc,best_val_auroc,lr"));

    let eval = tmp.path().join("eval");
    let o = run(&[
        "evaluate",
        "--checkpoint",
        &s(&run_dir.join("checkpoint.json")),
        "--manifest",
        &manifest,
        "--features",
        &feats,
        "--split",
        &s(&run_dir.join("split.json")),
        "--threshold",
        "0.5",
        "--out",
        &s(&eval),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("eval_report.json")).unwrap()).unwrap();
    for key in ["accuracy", "sensitivity", "specificity", "ppv", "npv", "auroc", "tp", "fp", "tn", "fn"] {
        assert!(report.get(key).is_some(), "{key} missing from report");
    }
    assert_eq!(report["n"], 30);
    let roc = std::fs::read_to_string(eval.join("roc.csv")).unwrap();
    assert!(roc.lines().count() > 2);
    let preds = std::fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 31);

    // Audits consume the predictions.
    let audit = tmp.path().join("audit");
    let o = run(&["bias-test", "--manifest", &manifest, "--predictions", &s(&eval.join("predictions.csv")), "--out", &s(&audit)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(audit.join("bias_report.csv").is_file());
    let o = run(&[
        "error-tree",
        "--manifest",
        &manifest,
        "--predictions",
        &s(&eval.join("predictions.csv")),
        "--min-leaf",
        "5",
        "--heatmap",
        "sex,label",
        "--out",
        &s(&audit),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(audit.join("error_tree.json").is_file());
    assert!(audit.join("heatmap_sex_label.csv").is_file());

    // Nothing but declared artifacts is left behind.
    for dir in [&run_dir, &eval, &audit] {
        for e in std::fs::read_dir(dir).unwrap() {
            let name = e.unwrap().file_name().into_string().unwrap();
            assert!(!name.starts_with('.') && !name.contains("tmp"), "stray file {name}");
        }
    }
}

#[test]
fn missing_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--manifest", &s(&tmp.path().join("nope.csv")), "--features", "a=b.csv", "--out", &s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["train", "--bogus"], &[]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"), "{args:?}");
    }
    let o = run(&["train", "--manifest", "m.csv", "--features", "noequals", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("name=path"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "200");
    let cfg = tmp.path().join("hot.json");
    std::fs::write(&cfg, br#"{"learning_rate": 1e6, "momentum": 0.99}"#).unwrap();
    let out = tmp.path().join("run");
    let o = run(&[
        "train",
        "--manifest",
        &s(&data.join("manifest.csv")),
        "--features",
        &format!("wavlm={}", s(&data.join("wavlm.csv"))),
        "--features",
        &format!("imagebind={}", s(&data.join("imagebind.csv"))),
        "--config",
        &s(&cfg),
        "--out",
        &s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("checkpoint.json").exists());
}

#[test]
fn bad_config_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "60");
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, br#"{"learning_rat": 0.1}"#).unwrap();
    let o = run(&[
        "train",
        "--manifest",
        &s(&data.join("manifest.csv")),
        "--features",
        &format!("acoustic={}", s(&data.join("acoustic.csv"))),
        "--config",
        &s(&cfg),
        "--out",
        &s(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_crossval_and_tune_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "120");
    let manifest = s(&data.join("manifest.csv"));
    let feats = format!("acoustic={}", s(&data.join("acoustic.csv")));

    let pp = tmp.path().join("pp");
    let o = run(&["preprocess", "--manifest", &manifest, "--features", &feats, "--out", &s(&pp)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pp.join("plans.json").is_file() && pp.join("acoustic.csv").is_file());

    let cv = tmp.path().join("cv");
    let o = run(&["crossval", "--manifest", &manifest, "--features", &feats, "--k", "3", "--out", &s(&cv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(cv.join("crossval.json")).unwrap()).unwrap();
    assert_eq!(rep["folds"].as_array().unwrap().len(), 3);

    let tune = tmp.path().join("tune");
    let args = |n: &'static str, resume: bool| {
        let mut v = vec!["tune", "--manifest", &manifest, "--features", &feats, "--trials", n, "--seed", "2", "--out"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        v.push(s(&tune));
        if resume {
            v.push("--resume".into());
        }
        v
    };
    let run_owned = |v: Vec<String>| run(&v.iter().map(String::as_str).collect::<Vec<_>>());
    let o = run_owned(args("2", false));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run_owned(args("4", true));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = std::fs::read(tune.join("ranking.json")).unwrap();

    std::fs::remove_dir_all(&tune).unwrap();
    let o = run_owned(args("4", false));
    assert!(o.status.success());
    assert_eq!(std::fs::read(tune.join("ranking.json")).unwrap(), resumed);
    assert!(tune.join("best_config.json").is_file());
}
