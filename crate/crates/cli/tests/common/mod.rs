//! Helpers for driving the `exdf` binary.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn exdf() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_exdf"));
    cmd.arg("--quiet");
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("exdf binary runs")
}

pub fn check(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exdf failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Simulate a small exceedance data set into `dir/data`.
pub fn simulate_into(dir: &Path, n_sites: usize, n_days: usize, m: usize, seed: u64) {
    check(exdf().args(["simulate", "--n-sites", &n_sites.to_string(), "--n-days", &n_days.to_string()])
        .args(["--m", &m.to_string(), "--seed", &seed.to_string(), "--out-dir"])
        .arg(dir.join("data")));
}

/// Write `dir/cfg.toml` pointing at `dir/data` with a short two-chain run.
pub fn write_config(dir: &Path, m: usize, n_iter: usize, extra: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    let text = format!(
        "m = {m}\n{extra}\n[paths]\nstations = \"data/stations.csv\"\ngrid = \"data/grid.csv\"\noutput_dir = \"out\"\n\
         [mcmc]\nn_iter = {n_iter}\nburn_in = {}\nthin = 5\nn_chains = 2\nseed = 7\n[predict]\nn_draws = 100\n",
        n_iter / 4
    );
    std::fs::write(&path, text).unwrap();
    path
}

pub fn sha256_file(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}
