use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DAMPING: &str = r#"
[model]
H = [[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-0.5, 0.0]]]
C = [[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]

[run]
T = 1.0
n_grid = [8, 16, 32, 64]
n_paths = 100
grid_points = 50
seed = 11
"#;

const FREE: &str = r#"
[model]
H = [[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-0.5, 0.0]]]
C = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]

[run]
T = 1.0
n_grid = [8, 16, 32, 64]
n_paths = 100
grid_points = 50
seed = 11
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn jumptraj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jumptraj"))
        .args(args)
        .env_remove("JUMPTRAJ_WORKERS")
        .output()
        .unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn trajectories_are_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", DAMPING);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = jumptraj(&[
        "trajectories",
        "--config",
        cfg,
        "--out",
        a.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = jumptraj(&[
        "trajectories",
        "--config",
        cfg,
        "--out",
        b.to_str().unwrap(),
        "--workers",
        "3",
    ]);
    assert!(out.status.success());
    let fa = files(&a);
    assert_eq!(fa.len(), 100 + 4);
    assert_eq!(fa, files(&b));
}

#[test]
fn seed_flag_changes_the_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", DAMPING);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    jumptraj(&[
        "trajectories",
        "--config",
        cfg,
        "--out",
        a.to_str().unwrap(),
    ]);
    jumptraj(&[
        "trajectories",
        "--config",
        cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_ne!(
        fs::read(a.join("jumps.csv")).unwrap(),
        fs::read(b.join("jumps.csv")).unwrap()
    );
}

#[test]
fn zero_coupling_writes_a_single_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", FREE);
    let out_dir = tmp.path().join("out");
    let out = jumptraj(&[
        "trajectories",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read_dir(out_dir.join("paths")).unwrap().count(), 1);
    let jumps = fs::read_to_string(out_dir.join("jumps.csv")).unwrap();
    assert_eq!(jumps.lines().count(), 1);
}

#[test]
fn zero_coupling_convergence_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", FREE);
    let out_dir = tmp.path().join("out");
    let out = jumptraj(&[
        "convergence",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("convergence.json")).unwrap())
            .unwrap();
    assert_eq!(json["report"]["degenerate"], true);
}

#[test]
fn three_value_grid_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = DAMPING.replace("[8, 16, 32, 64]", "[8, 16, 32]");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = jumptraj(&[
        "convergence",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("need ≥ 4 octave-spanning n values"));
}

#[test]
fn non_hermitian_hamiltonian_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let text = DAMPING.replace("[[0.0, 0.0], [-0.5, 0.0]]]", "[[1.0, 0.0], [-0.5, 0.0]]]");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = jumptraj(&["audit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.H"));
}

#[test]
fn missing_config_and_bad_flags_exit_two() {
    let out = jumptraj(&["audit", "--config", "/nonexistent/c.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(jumptraj(&["frobnicate"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", DAMPING);
    assert_eq!(
        jumptraj(&["audit", "--config", cfg.to_str().unwrap(), "--paths", "0"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn workers_env_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", DAMPING);
    let out = Command::new(env!("CARGO_BIN_EXE_jumptraj"))
        .args([
            "trajectories",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().to_str().unwrap(),
        ])
        .env("JUMPTRAJ_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("JUMPTRAJ_WORKERS"));
}

#[test]
fn replay_reads_back_its_own_realization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", DAMPING);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let out = jumptraj(&[
        "replay",
        "--config",
        cfg,
        "--out",
        a.to_str().unwrap(),
        "--path",
        "3",
        "--n",
        "32",
    ]);
    assert!(out.status.success());
    let b = tmp.path().join("b");
    let bin = a.join("realization.bin");
    let again = jumptraj(&[
        "replay",
        "--config",
        cfg,
        "--out",
        b.to_str().unwrap(),
        "--realization",
        bin.to_str().unwrap(),
        "--n",
        "32",
    ]);
    assert!(again.status.success());
    assert_eq!(out.stdout, again.stdout);
    assert_eq!(
        fs::read(a.join("replay.csv")).unwrap(),
        fs::read(b.join("replay.csv")).unwrap()
    );
}
