use std::path::Path;
use std::process::{Command, Output};

fn tta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tta"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tta(args);
    assert!(
        out.status.success(),
        "tta {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (train, clean, noisy, noisy2) = (d.join("train"), d.join("clean"), d.join("noisy"), d.join("noisy2"));
    let ckpt = d.join("source.ckpt");
    ok(&["make-dataset", "--out", s(&train), "--count", "60", "--seed", "1"]);
    ok(&["make-dataset", "--out", s(&clean), "--count", "24", "--seed", "2"]);
    ok(&["train-source", "--data", s(&train), "--out", s(&ckpt), "--epochs", "1"]);
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    let clean_bytes = std::fs::read(clean.join("images.bin")).unwrap();

    for out in [&noisy, &noisy2] {
        ok(&[
            "corrupt", "--clean", s(&clean), "--name", "gaussian_noise", "--severity", "5", "--seed", "3", "--out", s(out),
        ]);
    }
    assert_eq!(
        std::fs::read(noisy.join("images.bin")).unwrap(),
        std::fs::read(noisy2.join("images.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(noisy.join("manifest.json")).unwrap(),
        std::fs::read(noisy2.join("manifest.json")).unwrap()
    );

    let config = d.join("run.toml");
    std::fs::write(
        &config,
        "dataset = \"noisy\"\ncheckpoint = \"source.ckpt\"\noutput_dir = \"out\"\n\n[adaptation]\nbatch_size = 8\n",
    )
    .unwrap();
    let a = ok(&["run", "--config", s(&config), "--out", s(&d.join("a"))]);
    let b = ok(&["run", "--config", s(&config), "--out", s(&d.join("b"))]);
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(d.join("a/summary.json")).unwrap(),
        std::fs::read(d.join("b/summary.json")).unwrap()
    );
    for f in ["report.jsonl", "summary.json", "policy_history.jsonl", "reliability.csv", "student.ckpt", "teacher.ckpt"] {
        assert!(d.join("a").join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(summary["method"], "tesla");
    assert_eq!(summary["head_unchanged"], true);
    let report = std::fs::read_to_string(d.join("a/report.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert_eq!(last["type"], "summary");
    assert_eq!(report.lines().filter(|l| l.contains("\"type\":\"batch\"")).count(), 3);

    let src = ok(&["run", "--config", s(&config), "--method", "source_only", "--out", s(&d.join("src"))]);
    let src: serde_json::Value = serde_json::from_str(&src).unwrap();
    assert_eq!(src["method"], "source_only");
    assert_eq!(
        std::fs::read(d.join("src/student.ckpt")).unwrap(),
        ckpt_bytes,
        "source-only run changed the model"
    );

    let feats = d.join("features.csv");
    ok(&["export-features", "--ckpt", s(&ckpt), "--data", s(&clean), "--out", s(&feats)]);
    let text = std::fs::read_to_string(&feats).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0].split(',').count(), 49);

    // Inputs are never modified.
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes);
    assert_eq!(std::fs::read(clean.join("images.bin")).unwrap(), clean_bytes);
}

#[test]
fn invalid_requests_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let clean = d.join("clean");
    ok(&["make-dataset", "--out", s(&clean), "--count", "4"]);

    let out = tta(&["corrupt", "--clean", s(&clean), "--name", "fog", "--severity", "2", "--out", s(&d.join("x"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gaussian_noise") && err.contains("pixelate"), "{err}");

    let out = tta(&["corrupt", "--clean", s(&clean), "--name", "contrast", "--severity", "0", "--out", s(&d.join("x"))]);
    assert!(!out.status.success());

    let out = tta(&["run", "--config", s(&d.join("missing.toml"))]);
    assert!(!out.status.success());

    let config = d.join("bad.toml");
    std::fs::write(&config, "dataset = \"clean\"\ncheckpoint = \"nope.ckpt\"\noutput_dir = \"out\"\n").unwrap();
    let out = tta(&["run", "--config", s(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
    assert!(!d.join("out").exists(), "output written before validation");

    let out = tta(&["run", "--config", s(&config), "--method", "tent"]);
    assert!(!out.status.success());
}
