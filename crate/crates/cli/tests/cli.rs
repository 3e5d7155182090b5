use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_structcov"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("structcov-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn describe_geometry_reports_coarray() {
    let out = run(bin().args(["describe-geometry", "--positions", "0,1,2,3,7,11"]));
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("aperture:   12"), "{text}");
    assert!(text.contains("contiguous: 0..11"), "{text}");
}

#[test]
fn bad_positions_are_config_errors() {
    let out = run(bin().args(["describe-geometry", "--positions", "0,1,x"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = scratch("badcfg");
    let path = dir.join("bad.toml");
    let text = std::fs::read_to_string(config("fig_single_snapshot.toml")).unwrap().replace("trials = 10", "trials = 0");
    std::fs::write(&path, text).unwrap();
    let out = run(bin().args(["estimate", "--config"]).arg(&path));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment.trials"));
    let out = run(bin().args(["estimate", "--config"]).arg(dir.join("missing.toml")));
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = scratch("blocked");
    let file = dir.join("not_a_dir");
    std::fs::write(&file, "x").unwrap();
    let out = run(bin().args(["sweep", "--config"]).arg(config("fig_single_snapshot.toml")).arg("--out").arg(&file));
    assert_eq!(out.status.code(), Some(3));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn simulate_estimate_and_crb_write_csv() {
    let dir = scratch("artifacts");
    let cfg = config("fig_single_snapshot.toml");
    let out = run(bin().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&dir));
    assert_eq!(out.status.code(), Some(0));
    let snaps = std::fs::read_to_string(dir.join("fig_single_snapshot_snapshots.csv")).unwrap();
    assert_eq!(snaps.lines().count(), 1 + 10);
    let out = run(bin().args(["estimate", "--config"]).arg(&cfg).arg("--out").arg(&dir));
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("structcov"));
    assert!(dir.join("fig_single_snapshot_estimate.csv").exists());
    let out = run(bin().args(["crb", "--config"]).arg(&cfg).arg("--out").arg(&dir));
    assert_eq!(out.status.code(), Some(0));
    let crb = std::fs::read_to_string(dir.join("fig_single_snapshot_crb.csv")).unwrap();
    assert!(crb.starts_with("point,crb_rmse,crb_1,crb_2"), "{crb}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn seed_override_changes_snapshots() {
    let dir = scratch("seed");
    let cfg = config("fig_single_snapshot.toml");
    let read = |seed: &str, sub: &str| {
        let d = dir.join(sub);
        let out = run(bin().args(["simulate", "--config"]).arg(&cfg).args(["--seed", seed, "--out"]).arg(&d));
        assert_eq!(out.status.code(), Some(0));
        std::fs::read_to_string(d.join("fig_single_snapshot_snapshots.csv")).unwrap()
    };
    assert_eq!(read("5", "a"), read("5", "b"));
    assert_ne!(read("5", "a"), read("6", "c"));
    let _ = std::fs::remove_dir_all(dir);
}
