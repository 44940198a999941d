mod common;

use common::{check, runet, s, write_tiny_config};

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(runet(&["--help"]).status.code(), Some(0));
    assert_eq!(runet(&["--version"]).status.code(), Some(0));
    assert_eq!(runet(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(runet(&[]).status.code(), Some(1));
    assert_eq!(runet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(runet(&["generate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let bad = runet(&["generate", "--out", s(&out), "--set", "depth=0"]);
    assert_eq!(bad.status.code(), Some(1));
    let unknown = runet(&["generate", "--out", s(&out), "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("no_such_key"));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = runet(&[
        "predict",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--volume",
        s(&dir.path().join("none.vol")),
        "--out",
        s(&dir.path().join("p.prob")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_generate_train_predict_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let preds = dir.path().join("preds");
    check(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    assert!(manifest.starts_with("id,path,split"));

    for o in ["axial", "coronal", "sagittal"] {
        let run = dir.path().join(format!("run-{o}"));
        check(&["train", "--config", s(&cfg), "--orientation", o, "--data", s(&data), "--out", s(&run)]);
        for f in ["best.ckpt", "last.ckpt", "curves.csv", "curves.svg", "config.txt"] {
            assert!(run.join(f).exists(), "{o}: {f} missing");
        }
        check(&["predict", "--checkpoint", s(&run.join("best.ckpt")), "--data", s(&data), "--out", s(&preds)]);
    }
    let n_test = manifest.lines().filter(|l| l.ends_with(",test")).count();
    assert_eq!(std::fs::read_dir(&preds).unwrap().count(), 3 * n_test);

    let report = dir.path().join("report");
    check(&["eval", "--config", s(&cfg), "--data", s(&data), "--predictions", s(&preds), "--out", s(&report)]);
    let metrics = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    // four methods, two stages each
    assert_eq!(metrics.lines().count(), 1 + n_test * 4 * 2);
    assert!(metrics.contains(",ensemble,"));
    let summary = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,stage,metric,median,q1,q3,outlier_count"));
    assert!(std::fs::read_to_string(report.join("boxplots.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn eval_without_all_orientations_skips_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let preds = dir.path().join("preds");
    check(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    check(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--set", "epochs=1"]);
    check(&["predict", "--checkpoint", s(&run.join("last.ckpt")), "--data", s(&data), "--out", s(&preds)]);
    let report = dir.path().join("report");
    check(&["eval", "--config", s(&cfg), "--data", s(&data), "--predictions", s(&preds), "--out", s(&report)]);
    let metrics = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert!(metrics.contains(",axial,"));
    assert!(!metrics.contains(",ensemble,"));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    check(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    check(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full), "--set", "epochs=3"]);
    check(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--set", "epochs=1"]);
    check(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--set", "epochs=3", "--resume"]);
    for f in ["last.ckpt", "best.ckpt", "curves.csv"] {
        assert_eq!(
            std::fs::read(full.join(f)).unwrap(),
            std::fs::read(split.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn single_volume_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    check(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    check(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--set", "epochs=1"]);
    let vol = std::fs::read_dir(data.join("volumes")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("one").join("p.prob");
    check(&["predict", "--checkpoint", s(&run.join("best.ckpt")), "--volume", s(&vol), "--out", s(&out)]);
    assert!(std::fs::read(&out).unwrap().starts_with(b"RUNETPRB"));
}

#[test]
fn verify_fails_under_injected_fault() {
    let out = runet(&["verify", "--inject-fault", "conv-backward"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
