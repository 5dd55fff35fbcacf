use std::path::Path;
use std::process::{Command, Output};

fn patchforge(workspace: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchforge"))
        .arg("--workspace")
        .arg(workspace)
        .args(args)
        .env_remove("PATCHFORGE_WORKSPACE")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = patchforge(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("make-chessboard"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = patchforge(dir.path(), &["synth-data", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn targeted_attack_without_target_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = patchforge(dir.path(), &["attack", "--mode", "targeted"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MissingTarget"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pf.toml");
    std::fs::write(&config, "[make-chessboard]\ncolour = \"red\"\n").unwrap();
    let o = patchforge(
        dir.path(),
        &["--config", config.to_str().unwrap(), "make-chessboard"],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = patchforge(dir.path(), &["embed-gallery", "--manifest", "missing.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pf.toml");
    std::fs::write(&config, "[make-chessboard]\ndpi = 150\nborder-px = 3\n").unwrap();
    let o = patchforge(
        dir.path(),
        &[
            "--config",
            config.to_str().unwrap(),
            "make-chessboard",
            "--dpi",
            "100",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let effective =
        std::fs::read_to_string(dir.path().join("effective-config/make-chessboard.toml")).unwrap();
    let table: toml::Table = effective.parse().unwrap();
    let section = table["make-chessboard"].as_table().unwrap();
    assert_eq!(section["dpi"].as_float(), Some(100.0));
    assert_eq!(section["border-px"].as_integer(), Some(3));
    assert_eq!(section["layout"].as_str(), Some("forehead"));
    assert!(dir.path().join("chessboard.png").is_file());

    // The written file is itself a valid config.
    let effective_path = dir.path().join("effective-config/make-chessboard.toml");
    let again = patchforge(
        dir.path(),
        &[
            "--config",
            effective_path.to_str().unwrap(),
            "make-chessboard",
        ],
    );
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
}

#[test]
fn workspace_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_patchforge"))
        .args(["make-chessboard", "--out", "board.png"])
        .env("PATCHFORGE_WORKSPACE", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("board.png").is_file());
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let run = |args: &[&str]| {
        let o = patchforge(ws, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    run(&[
        "synth-data",
        "--num-identities",
        "3",
        "--images-per-identity",
        "10",
        "--train-per-identity",
        "4",
        "--val-per-identity",
        "3",
    ]);
    assert!(ws.join("data/manifest.json").is_file());
    run(&[
        "train-target",
        "--channels",
        "2,3,4",
        "--embedding-dim",
        "8",
        "--epochs",
        "1",
        "--min-epochs",
        "0",
        "--target-accuracy",
        "0",
    ]);
    run(&["embed-gallery"]);
    run(&["attack", "--max-iters", "2"]);
    for f in [
        "patch.json",
        "patch.png",
        "print.png",
        "trace.csv",
        "attack.json",
    ] {
        assert!(ws.join("runs/patch").join(f).is_file(), "missing {f}");
    }
    run(&[
        "attack",
        "--mode",
        "targeted",
        "--target",
        "nearest",
        "--max-iters",
        "2",
        "--out",
        "runs/targeted",
    ]);
    run(&["apply-patch", "--split", "test"]);
    let eval = run(&["evaluate"]);
    assert!(stdout(&eval).contains('±'), "{}", stdout(&eval));
    run(&["evaluate", "--run", "runs/targeted"]);
    let report = run(&["report", "--runs", "runs/patch,runs/targeted"]);
    assert!(
        stdout(&report).contains("Untargeted"),
        "{}",
        stdout(&report)
    );
    assert!(stdout(&report).contains("Targeted"));
    for sub in [
        "synth-data",
        "train-target",
        "embed-gallery",
        "attack",
        "evaluate",
        "report",
    ] {
        assert!(
            ws.join("effective-config")
                .join(format!("{sub}.toml"))
                .is_file(),
            "{sub}"
        );
    }
}
