//! End-to-end checks of the `wtmpc` binary: the four subcommands and the
//! documented exit codes.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wtmpc"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("wtmpc_cli_{tag}_{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = r#"
root_seed = 11

[system]
x0 = [-1.0, -0.5]

[mpc]
horizon = 4
n_trajectories = 4

[sweep]
epsilons = [0.1]
sample_counts = [4]

[open_loop]
mc_realizations = 50
center_repeats = 1

[closed_loop]
t_steps = 3
repeats = 1

[tube_plot]
directions = 6
bisect_iters = 10
"#;

#[test]
fn open_loop_end_to_end() {
    let dir = workdir("open");
    let cfg = dir.join("cfg.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = bin()
        .args(["run-open-loop", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results = fs::read_to_string(dir.join("results.csv")).unwrap();
    assert!(results.lines().count() > 1);
    assert!(dir.join("config_echo.toml").exists());
    assert!(dir.join("violations_by_step.csv").exists());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn closed_loop_end_to_end() {
    let dir = workdir("closed");
    let cfg = dir.join("cfg.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = bin()
        .args(["run-closed-loop", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results = fs::read_to_string(dir.join("results.csv")).unwrap();
    // robust repeat + one wt cell
    assert_eq!(results.lines().count(), 3);
    assert!(dir.join("tradeoff.csv").exists());
    assert!(dir.join("timings.csv").exists());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn tube_and_dump_gamma() {
    let dir = workdir("tube");
    let cfg = dir.join("cfg.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = bin()
        .args(["tube", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("tube_sections.csv").exists());
    assert!(dir.join("tube_manifest.csv").exists());

    let out = bin()
        .args(["dump-gamma", "--step", "2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("k=2 gamma-block"));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_code_2_on_bad_config() {
    let dir = workdir("bad");
    let cfg = dir.join("broken.toml");
    fs::write(&cfg, "no_such_field = true\n").unwrap();
    let out = bin()
        .args(["run-open-loop", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // missing file is a config error too
    let out = bin()
        .args(["run-open-loop", "--config", "/nonexistent/x.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_code_4_when_infeasible_at_start() {
    let dir = workdir("infeas");
    let cfg = dir.join("cfg.toml");
    // benchmark start but a horizon too short to reach the terminal set
    let text = TINY_CONFIG.replace("x0 = [-1.0, -0.5]", "x0 = [-5.0, -2.0]");
    fs::write(&cfg, text).unwrap();
    let out = bin()
        .args(["run-open-loop", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::remove_dir_all(&dir).ok();
}
