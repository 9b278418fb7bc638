//! Exit codes and outputs of the `corrsparse` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn corrsparse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrsparse"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CORR_SPARSE_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&corrsparse(&["--help"], dir.path())), 0);
    assert_eq!(code(&corrsparse(&["exp"], dir.path())), 1);
    assert_eq!(code(&corrsparse(&["exp", "fig1", "--algos", "nope"], dir.path())), 1);
    assert_eq!(code(&corrsparse(&["exp", "fig1", "--bogus"], dir.path())), 1);
    assert_eq!(code(&corrsparse(&["exp", "fig1", "--config", "missing.json"], dir.path())), 1);
    fs::write(dir.path().join("bad.json"), r#"{"trials": "many"}"#).unwrap();
    assert_eq!(code(&corrsparse(&["exp", "fig1", "--config", "bad.json"], dir.path())), 1);
}

#[test]
fn gen_then_solve() {
    let dir = tempfile::tempdir().unwrap();
    let o = corrsparse(&["gen", "--seed", "4", "--out", "inst"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["phi.csv", "y.csv", "x_true.csv", "meta.json"] {
        assert!(dir.path().join("inst").join(f).exists(), "{f}");
    }
    let o = corrsparse(&["solve", "--instance", "inst", "--algos", "tsbl", "--out", "sol"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["x_hat.csv", "gamma.csv", "b.csv", "cost_trace.csv", "summary.json"] {
        assert!(dir.path().join("sol").join(f).exists(), "{f}");
    }
}

#[test]
fn solver_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&corrsparse(&["gen", "--out", "inst"], dir.path())), 0);
    // without the generator's correlation the true-B solver has no B to use
    let meta = dir.path().join("inst").join("meta.json");
    let text = fs::read_to_string(&meta).unwrap().replace("corr_beta", "unused");
    fs::write(&meta, text).unwrap();
    let o = corrsparse(&["solve", "--instance", "inst", "--algos", "rw_l1_md_true_b", "--out", "sol"], dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn experiment_with_config_and_env_threads() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"algos": ["msbl"], "ls": [2], "betas": [0.9], "gen": {"n": 10, "m": 30, "k": 3}}"#,
    )
    .unwrap();
    let args = ["exp", "fig1", "--config", "cfg.json", "--trials", "2", "--out", "run"];
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_corrsparse"))
            .args(args)
            .current_dir(dir.path())
            .env("CORR_SPARSE_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("0")), 1);
    let o = run("1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trials = fs::read_to_string(dir.path().join("run").join("fig1_trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 2);
    assert!(dir.path().join("run").join("fig1_beta0p9.svg").exists());
}

#[test]
fn fig3_window_flag() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"solver_opts": {"sbl": {"max_iters": 5}}}"#).unwrap();
    let o = corrsparse(
        &["exp", "fig3", "--config", "cfg.json", "--trials", "1", "--window-len", "10", "--out", "f3"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let header = fs::read_to_string(dir.path().join("f3").join("fig3_nmse.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "column,tsbl_w10,msbl_w10");
}
