use std::fs;
use std::process::{Command, Output};

fn maxq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maxq"))
        .args(args)
        .env_remove("MAXQ_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_modes() {
    for (mode, total) in [("flat", "3000"), ("maxq_plain", "14000")] {
        let o = maxq(&["count", "taxi", mode]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).lines().next().unwrap().split_whitespace().last(), Some(total));
    }
    let o = maxq(&["count", "taxi-noisy", "maxq_abstracted"]);
    let text = stdout(&o);
    let total: usize = text.lines().next().unwrap().split_whitespace().last().unwrap().parse().unwrap();
    assert!((550..=750).contains(&total));
    assert!(text.lines().skip(1).all(|l| l.starts_with("  ") && l.contains('\t')));
    assert!(text.contains("Root/Put"));
}

#[test]
fn errors_are_one_tab_separated_line() {
    let o = maxq(&["count", "taxi", "bogus"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error\t"));
    assert_eq!(err.lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "method = flat-q\ndomain = taxi\ntrials = 1\nbudget = 10\ngamma = 1.5\n").unwrap();
    let o = maxq(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));
}

#[test]
fn run_writes_outputs_and_env_overrides_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "method = flat-q\ndomain = taxi-deterministic\ntrials = 2\nbudget = 3000\neval_interval = 1000\neval_episodes = 5\n",
    )
    .unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_maxq"))
        .args(["run", cfg.to_str().unwrap(), "--out", dir.path().join("ignored").to_str().unwrap()])
        .env("MAXQ_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(target.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("steps,mean_return,stderr,trials"));
    assert_eq!(csv.lines().count(), 5);
    assert!(target.join("tables/trial-001.txt").exists());
    assert!(target.join("summary.txt").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn oracle_writes_both_solutions() {
    let dir = tempfile::tempdir().unwrap();
    let o = maxq(&["oracle", "taxi-deterministic", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let worst: f64 = text
        .lines()
        .find(|l| l.starts_with("max |V_flat - V_root|"))
        .and_then(|l| l.rsplit(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst <= 1e-6);
    assert!(fs::metadata(dir.path().join("flat.txt")).unwrap().len() > 0);
    assert!(fs::metadata(dir.path().join("hierarchical.txt")).unwrap().len() > 0);
}
