use std::process::{Command, Output};

fn pbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbev")).args(args).output().expect("run pbev")
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(pbev(&["--threads", "0", "selftest", "--out-dir", out]).status.code(), Some(2));
    assert_eq!(pbev(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(pbev(&["plot", "/nonexistent/in.csv", "--out", &format!("{out}/p.svg")]).status.code(), Some(3));
    assert_eq!(pbev(&["eval", "--checkpoint", "/nonexistent/model.pbev", "--out-dir", out]).status.code(), Some(3));
}

#[test]
fn zero_points_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = pbev(&["bench-pulling", "--points", "0", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(run.status.success());
    let csv = std::fs::read_to_string(dir.path().join("bench_pulling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("shape,method,n_points"));
}

#[test]
fn selftest_writes_passing_suites() {
    let dir = tempfile::tempdir().unwrap();
    let run = pbev(&["selftest", "--instances", "5", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(dir.path().join("selftest.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn env_seed_yields_to_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = |sub: &str| dir.path().join(sub).to_str().unwrap().to_owned();
    let run = |args: &[&str], seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pbev"));
        cmd.args(args);
        match seed {
            Some(s) => cmd.env("PBEV_SEED", s),
            None => cmd.env_remove("PBEV_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
    };
    let train = ["train", "--steps", "2"];
    run(&[&train[..], &["--out-dir", &out("a"), "--seed", "5"]].concat(), Some("9"));
    run(&[&train[..], &["--out-dir", &out("b"), "--seed", "5"]].concat(), None);
    run(&[&train[..], &["--out-dir", &out("c")]].concat(), Some("9"));
    let metrics = |sub: &str| std::fs::read_to_string(dir.path().join(sub).join("train_metrics.csv")).unwrap();
    assert_eq!(metrics("a"), metrics("b"));
    assert_ne!(metrics("a"), metrics("c"));
}
