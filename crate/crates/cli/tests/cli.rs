use std::path::Path;
use std::process::{Command, Output};

fn casseg(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casseg"))
        .args(args)
        .env("CASSEG_OUT_DIR", out_root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--kind", "shapes", "--count", "0"][..],
        &["no-such-command"],
        &["experiment", "--preset", "no-such-preset"],
        &["experiment", "--preset", "alpha-sweep", "--set", "train.lr_x=1"],
        &["experiment", "--preset", "alpha-sweep", "--set", "train.alpha=1.5"],
        &["experiment"],
        &["eval", "--checkpoint", "missing", "--data", "missing"],
    ] {
        let o = casseg(args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(o.stdout.is_empty(), "diagnostics belong on stderr");
    }
}

#[test]
fn grad_check_prints_error_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = casseg(&["grad-check", "--seed", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn generate_train_evaluate_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let o = casseg(&["gen-data", "--kind", "shapes", "--count", "6", "--size", "16", "--seed", "2"], r);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index: serde_json::Value = serde_json::from_slice(&std::fs::read(r.join("data/index.json")).unwrap()).unwrap();
    assert_eq!(index["samples"].as_array().unwrap().len(), 6);

    let data = r.join("data");
    let data = data.to_str().unwrap();
    let o = casseg(&["train", "--data", data, "--set", "train.max_steps=20"], r);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "trainlog.csv", "train.json"] {
        assert!(r.join("checkpoint").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(r.join("checkpoint/trainlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);

    let ck = r.join("checkpoint");
    let o = casseg(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data], r);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(r.join("eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("f_beta,mae,"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn toy_experiment_reports_confusions_and_reruns_identically() {
    let root = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let out = root.path().join(out);
        let o = casseg(
            &[
                "experiment",
                "--preset",
                "toy-imbalance",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
                "--set",
                "toy.n1=300",
                "--set",
                "toy.runs=1",
                "--set",
                "train.max_steps=50",
            ],
            root.path(),
        );
        // A short run need not pass its checks, but it must finish.
        assert!(matches!(code(&o), 0 | 1), "{}", stderr(&o));
        out
    };
    let a = run("a");
    let b = run("b");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    for loss in ["ce", "cas"] {
        let m = &report["results"][loss]["counts"];
        assert_eq!(m.as_array().unwrap().len(), 2, "{loss}");
        let total: u64 = m.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, 310);
    }
    for f in ["metrics.csv", "trainlog.csv", "report.json", "config.json", "curve.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("meta.json").exists());
}

#[test]
fn failed_property_check_exits_1() {
    let root = tempfile::tempdir().unwrap();
    // Five training steps cannot saturate the outputs, so sparsity fails.
    let o = casseg(
        &[
            "check-properties",
            "--set",
            "train.max_steps=5",
            "--set",
            "data.count=6",
            "--set",
            "properties.permutation_cases=5",
            "--set",
            "properties.bound_cases=5",
            "--set",
            "properties.gradient_cases=2",
            "--set",
            "properties.network_gradient_seeds=1",
        ],
        root.path(),
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("[FAIL]") && err.contains("[PASS]"), "{err}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.path().join("properties/report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}
