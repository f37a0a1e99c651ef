//! Exit codes and argument handling of the `semi` binary.

use std::process::{Command, Output};

fn semi(args: &[&str], out: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semi"))
        .args(args)
        .env("SEMI_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("run semi")
}

#[test]
fn config_prints_defaults_that_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = semi(&["config"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = semi_core::config::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, semi_core::config::ExperimentConfig::default());
}

#[test]
fn overrides_and_config_files_apply() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.toml");
    std::fs::write(&file, "seed = 7\n[stage2]\nsteps = 10\n").unwrap();
    let out = semi(
        &["--config", file.to_str().unwrap(), "--set", "finetune.steps=3", "config"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = semi_core::config::ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.seed, cfg.stage2.steps, cfg.finetune.steps), (7, 10, 3));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    std::fs::write(&file, "[stage2]\nstepz = 10\n").unwrap();
    for args in [
        vec!["--config", file.to_str().unwrap(), "config"],
        vec!["--set", "hypernet.adapter_layers=3", "config"],
        vec!["--config", "/nonexistent/semi.toml", "config"],
        vec!["adapt", "--method", "adapter-soup"],
        vec!["stage2"],
        vec!["no-such-command"],
    ] {
        let out = semi(&args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = semi(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["stage1", "stage2", "adapt", "benchmark", "ablate"] {
        assert!(text.contains(cmd));
    }
}
