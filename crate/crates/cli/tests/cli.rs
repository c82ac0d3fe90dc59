mod common;

use common::*;

#[test]
fn usage_errors_exit_with_one() {
    let out = run(exdf().args(["fit", "--config", "/nonexistent/cfg.toml"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = run(exdf().args(["fit", "--no-such-flag"]));
    assert_eq!(out.status.code(), Some(1));
    let out = run(exdf().args(["--help"]));
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 4, 60, 5, 1);
    let cfg = write_config(dir.path(), 5, 40, "bogus_key = 3");
    let out = run(exdf().arg("fit").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn fit_writes_archive_and_manifest_rerun_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 4, 120, 5, 2);
    let cfg = write_config(dir.path(), 5, 200, "");
    check(exdf().arg("fit").arg("--config").arg(&cfg));
    let archive = dir.path().join("out/posterior.bin");
    let manifest = dir.path().join("out/posterior.bin.manifest.json");
    assert!(archive.is_file() && manifest.is_file());
    let first = sha256_file(&archive);

    let rerun = dir.path().join("rerun.bin");
    check(exdf().arg("fit").arg("--manifest").arg(&manifest).arg("--out").arg(&rerun));
    assert_eq!(sha256_file(&rerun), first);

    let csv = dir.path().join("draws.csv");
    check(exdf().arg("export").arg(&archive).arg("--out").arg(&csv));
    let text = std::fs::read_to_string(&csv).unwrap();
    // Two chains of (200 - 50) / 5 draws plus a header.
    assert_eq!(text.lines().count(), 1 + 2 * 30);
}

#[test]
fn predict_and_surface_outputs() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 4, 90, 5, 3);
    let cfg = write_config(dir.path(), 5, 120, "");
    check(exdf().arg("fit").arg("--config").arg(&cfg));
    let point = dir.path().join("point.csv");
    check(exdf().arg("predict").arg("--config").arg(&cfg).args(["--at", "0.7,1.3"]).arg("--out").arg(&point));
    assert!(std::fs::read_to_string(&point).unwrap().lines().count() > 1);
    let surface = dir.path().join("surface.csv");
    check(exdf().arg("predict").arg("--config").arg(&cfg).arg("--surface").arg("--out").arg(&surface));
    // 25 cells plus a header.
    assert_eq!(std::fs::read_to_string(&surface).unwrap().lines().count(), 26);
}

#[test]
fn loso_writes_one_metrics_row_per_site() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 4, 90, 5, 4);
    let cfg = write_config(dir.path(), 5, 100, "");
    check(exdf().arg("validate").arg("--config").arg(&cfg).arg("--loso"));
    let text = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[0].starts_with("site,converged,max_rhat"));
    let out = run(exdf().arg("validate").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn threshold_and_diagnose_tables() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), 4, 120, 5, 5);
    let cfg = write_config(dir.path(), 5, 120, "");
    let mrl = dir.path().join("mrl.csv");
    check(exdf().arg("threshold").arg("--config").arg(&cfg).args(["--n", "10"]).arg("--out").arg(&mrl));
    assert_eq!(std::fs::read_to_string(&mrl).unwrap().lines().count(), 1 + 4 * 10);
    check(exdf().arg("fit").arg("--config").arg(&cfg));
    let diag = dir.path().join("diag");
    check(exdf().arg("diagnose").arg(dir.path().join("out/posterior.bin")).arg("--out-dir").arg(&diag));
    assert!(std::fs::read_dir(&diag).unwrap().count() >= 2);
}
