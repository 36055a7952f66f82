use std::path::Path;
use std::process::{Command, Output};

fn ipdiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipdiff"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = ipdiff(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen", "--family", "sc", "--count", "10", "--seed", "3", "--out", "data"], d);
    assert!(ok(&["collect", "--data", "data", "--pool", "5"], d).contains("solved 10"));
    ok(&["train-cisp", "--data", "data", "--epochs", "2", "--dim", "8", "--heads", "2", "--out", "cisp"], d);
    ok(
        &["train-diffusion", "--data", "data", "--cisp", "cisp", "--epochs", "2", "--timesteps", "20", "--lambda", "auto", "--out", "diff"],
        d,
    );
    ok(&["eval", "--data", "data", "--ckpt", "diff", "--steps", "5", "--s", "2", "--count", "3", "--out", "eval"], d);
    let csv = ok(&["ablate", "--data", "data", "--ckpt", "diff", "--steps", "5", "--count", "2", "--out", "abl"], d);
    assert_eq!(csv.lines().count(), 6);
    ok(&["hist", "--data", "data", "--ckpt", "diff", "--steps", "5", "--count", "10", "--out", "hist"], d);
    for run in ["data", "cisp", "diff", "eval", "abl", "hist"] {
        assert!(d.join(run).join("manifest.json").exists(), "{run}");
    }
    assert!(d.join("diff/models.ckpt").exists());
    let hist = std::fs::read_to_string(d.join("hist/histogram.csv")).unwrap();
    assert!(hist.starts_with("objective,optimum"));
}

#[test]
fn errors_report_a_category_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = ipdiff(&["featurize", "--inst", "missing.ipinst", "--out", "g.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));

    std::fs::write(dir.path().join("bad.ipinst"), "not an instance\n").unwrap();
    let out = ipdiff(&["featurize", "--inst", "bad.ipinst", "--out", "g.json"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[parse]"));
}
