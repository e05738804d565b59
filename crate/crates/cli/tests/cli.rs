//! End-to-end checks of the `osrmix` binary on tiny synthetic runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use osrmix::checkpoint::Checkpoint;
use osrmix::config::read_lock;
use osrmix::experiment::{run_dir, MatrixSummary, SUMMARY_FILE};
use osrmix::metrics::EvalReport;
use tempfile::TempDir;

fn osrmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osrmix"))
        .args(args)
        .output()
        .expect("spawn osrmix")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A desk-mnist config shrunk to a few seconds of training.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "preset = \"desk-mnist\"\n\
         [dataset]\nroot_path = {:?}\n\
         [dataset.synthesize]\ntrain_per_class = 12\ntest_per_class = 6\n\
         [train]\nepochs = 2\nlr_decay_epochs = [1]\n{extra}",
        dir.join("data")
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn train(dir: &TempDir, extra: &str, name: &str) -> PathBuf {
    let cfg = tiny_config(dir.path(), extra);
    let out = dir.path().join(name);
    let o = osrmix(&["train", "-q", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_writes_checkpoint_metrics_and_lock() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir, "", "vanilla");
    let ckpt = Checkpoint::<f32>::load(&out.join("checkpoint-final.bin")).unwrap();
    let lock = read_lock(&out).unwrap();
    assert_eq!(ckpt.config_digest, lock.config_digest);
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(lines.lines().count() > 0);
    for line in lines.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    // The preset expands to six known and four unknown digits.
    assert_eq!(lock.config.dataset.known_classes, (0..6).collect::<Vec<_>>());
    assert_eq!(lock.config.dataset.unknown_classes, (6..10).collect::<Vec<_>>());
}

#[test]
fn distillation_without_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "regime = \"asymmetric_distill\"\n[train.augment]\nkind = \"cutmix\"\n");
    let o = osrmix(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--teacher"), "{}", stderr(&o));
}

#[test]
fn missing_config_and_unknown_preset_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(osrmix(&["train", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(osrmix(&["train", "--preset", "nope", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn eval_diagnose_audit_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir, "", "vanilla");
    let cfg = dir.path().join("run.toml");
    let ckpt = out.join("checkpoint-final.bin");
    let digest = read_lock(&out).unwrap().config_digest;

    let report_path = dir.path().join("eval.json");
    let o = osrmix(&["eval", "-q", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&report_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.config_digest, digest);
    assert!(report.auroc.is_some() && report.oscr.is_some());

    let o = osrmix(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--score", "uncertainty"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: EvalReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed.accuracy, report.accuracy);

    let diag = dir.path().join("diag");
    let o = osrmix(&["diagnose", "-q", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["norms.json", "discrepancy.json", "audit.json", "uncertainty_hist.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(diag.join(f)).unwrap()).unwrap();
        assert_eq!(v["config_digest"], digest.as_str(), "{f}");
        assert_eq!(v["schema_version"], 1, "{f}");
    }

    let audit = dir.path().join("audit");
    let o = osrmix(&["audit", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--samples", "40", "--out", s(&audit)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("samples 40 "));

    let plots = dir.path().join("plots");
    let o = osrmix(&["report", "-q", "--out", s(&plots), s(&report_path), s(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("AUROC"), "{text}");
    assert!(std::fs::read_dir(&plots).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "png")));
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir, "", "a");
    let other = dir.path().join("other.toml");
    std::fs::write(
        &other,
        std::fs::read_to_string(dir.path().join("run.toml")).unwrap().replace("epochs = 2", "epochs = 3"),
    )
    .unwrap();
    let o = osrmix(&["eval", "--config", s(&other), "--checkpoint", s(&out.join("checkpoint-final.bin"))]);
    assert!(!o.status.success());
}

#[test]
fn report_rejects_schema_mismatch_and_prints_na_without_unknowns() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 99, "kind": "eval_report"}"#).unwrap();
    assert_eq!(osrmix(&["report", s(&bad)]).status.code(), Some(2));

    tiny_config(dir.path(), "");
    let closed = dir.path().join("closed.toml");
    std::fs::write(
        &closed,
        std::fs::read_to_string(dir.path().join("run.toml"))
            .unwrap()
            .replace("[dataset]\n", "[dataset]\nunknown_classes = []\n"),
    )
    .unwrap();
    let cout = dir.path().join("closed-run");
    let o = osrmix(&["train", "-q", "--config", s(&closed), "--out", s(&cout)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = dir.path().join("closed-eval.json");
    let o = osrmix(&[
        "eval",
        "-q",
        "--config",
        s(&closed),
        "--checkpoint",
        s(&cout.join("checkpoint-final.bin")),
        "--out",
        s(&path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = osrmix(&["report", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("n/a"));
}

fn matrix_file(dir: &Path, seeds: &str) -> PathBuf {
    let path = dir.join("matrix.toml");
    std::fs::write(
        &path,
        format!(
            "seeds = {seeds}\n\
             [base]\npreset = \"desk-mnist\"\n\
             dataset = {{ root_path = {:?}, synthesize = {{ train_per_class = 10, test_per_class = 5 }} }}\n\
             train = {{ epochs = 1, lr_decay_epochs = [] }}\n\
             [[runs]]\nname = \"vanilla\"\n\
             [[runs]]\nname = \"cutmix\"\ntrain = {{ augment = {{ kind = \"cutmix\" }} }}\n",
            dir.join("data")
        ),
    )
    .unwrap();
    path
}

#[test]
fn matrix_runs_every_member_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let m = matrix_file(dir.path(), "[0, 1, 2]");
    let out = dir.path().join("out");
    let o = osrmix(&["matrix", "-q", "--workers", "2", "--config", s(&m), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: MatrixSummary =
        serde_json::from_str(&std::fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert!(summary.failures.is_empty());
    for row in &summary.rows {
        let accs: Vec<f64> = [0, 1, 2]
            .iter()
            .map(|&seed| {
                let p = run_dir(&out, &row.name, seed).join("report.json");
                serde_json::from_str::<EvalReport>(&std::fs::read_to_string(p).unwrap()).unwrap().accuracy
            })
            .collect();
        let stat = row.accuracy.as_ref().unwrap();
        assert_eq!(stat.n, 3);
        assert!((stat.mean - accs.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
}

#[test]
fn matrix_rejects_empty_seeds_and_zero_workers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let m = matrix_file(dir.path(), "[]");
    assert_eq!(osrmix(&["matrix", "--config", s(&m), "--out", s(&out)]).status.code(), Some(2));
    let m = matrix_file(dir.path(), "[0]");
    assert_eq!(
        osrmix(&["matrix", "--workers", "0", "--config", s(&m), "--out", s(&out)]).status.code(),
        Some(2)
    );
}
