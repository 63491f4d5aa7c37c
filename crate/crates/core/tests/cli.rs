//! Exit codes and output determinism of the `kras` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kras_cli_{}_{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn kras(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kras")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())).collect();
    out.sort();
    out
}

#[test]
fn verify_passes_on_the_shipped_config() {
    let out = scratch("verify");
    let o = kras(&["verify", "--config", path(&configs().join("wb_small.toml")), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("PASS adjointness")));
    assert!(!stdout.contains("FAIL"));
    assert!(out.join("checks.csv").exists() && out.join("verify_instances.csv").exists());
}

#[test]
fn missing_config_is_a_usage_error() {
    assert_eq!(kras(&["verify", "--config", "/nonexistent/config.toml"]).status.code(), Some(2));
    assert_eq!(kras(&["verify"]).status.code(), Some(2));
}

#[test]
fn unknown_flags_and_subcommands_are_usage_errors() {
    let cfg = configs().join("wb_small.toml");
    let o = kras(&["verify", "--config", path(&cfg), "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(kras(&["sideways"]).status.code(), Some(2));
    assert_eq!(kras(&["bias", "--config", path(&cfg), "--method", "ols"]).status.code(), Some(2));
    assert_eq!(kras(&["bias", "--config", path(&cfg), "--jobs", "0"]).status.code(), Some(2));
}

#[test]
fn invalid_config_contents_are_usage_errors() {
    let dir = scratch("invalid");
    let cfg = dir.join("bad.toml");
    fs::write(&cfg, "scenario = \"workbench\"\nn_grid = [500, 250]\n[kernel_h]\nfamily = \"gaussian\"\n[kernel_g]\nfamily = \"gaussian\"\n").unwrap();
    assert_eq!(kras(&["verify", "--config", path(&cfg)]).status.code(), Some(2));
}

#[test]
fn failed_criterion_exits_one() {
    let dir = scratch("strict");
    let text = fs::read_to_string(configs().join("bias.toml")).unwrap().replace("tolerance = 0.10", "tolerance = 0.0");
    let cfg = dir.join("strict.toml");
    fs::write(&cfg, text).unwrap();
    let o = kras(&["bias", "--config", path(&cfg), "--out", path(&dir.join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn worker_count_does_not_change_output_bytes() {
    let dir = scratch("jobs");
    let text = fs::read_to_string(configs().join("rates.toml")).unwrap().replace("replications = 200", "replications = 12");
    let cfg = dir.join("rates.toml");
    fs::write(&cfg, text).unwrap();
    let (one, eight) = (dir.join("one"), dir.join("eight"));
    for (jobs, out) in [("1", &one), ("8", &eight)] {
        let o = kras(&["rates", "--config", path(&cfg), "--jobs", jobs, "--out", path(out), "--seed", "99", "--emit-plotdata"]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (files(&one), files(&eight));
    assert!(a.iter().any(|(n, _)| n == "plotdata.csv"));
    assert_eq!(a, b);

    let (c1, c8) = (dir.join("c1"), dir.join("c8"));
    let cmp = configs().join("compare.toml");
    for (jobs, out) in [("1", &c1), ("8", &c8)] {
        kras(&["kmmr-compare", "--config", path(&cmp), "--jobs", jobs, "--out", path(out), "--method", "kras,kmmr"]);
    }
    assert_eq!(files(&c1), files(&c8));
}

#[test]
fn seed_override_changes_the_replications() {
    let dir = scratch("seed");
    let text = fs::read_to_string(configs().join("dml_workbench.toml")).unwrap().replace("replications = 500", "replications = 20");
    let cfg = dir.join("dml.toml");
    fs::write(&cfg, text).unwrap();
    kras(&["dml", "--config", path(&cfg), "--out", path(&dir.join("a")), "--seed", "1"]);
    kras(&["dml", "--config", path(&cfg), "--out", path(&dir.join("b")), "--seed", "2"]);
    kras(&["dml", "--config", path(&cfg), "--out", path(&dir.join("c")), "--seed", "1"]);
    let read = |d: &str| fs::read(dir.join(d).join("dml.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
}
