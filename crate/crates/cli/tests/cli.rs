use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg-lab"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn body_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn convergence_writes_one_row_per_population() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["convergence"], &config("smoke.toml"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = body_rows(&dir.path().join("rates.csv"));
    assert_eq!(rows[0], "N,state_gap,control_gap,EB,ESigma,ESigma0,EF,EG");
    let ns: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["4", "8", "16", "32"]);
    let fit = body_rows(&dir.path().join("rate_fit.csv"));
    assert_eq!(fit[0], "gap,slope,intercept,r2");
    assert_eq!(fit.len(), 3);
}

#[test]
fn artifacts_carry_replay_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve-mfg", "--seed", "11"], &config("smoke.toml"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["mfg_residuals.csv", "mfg_summary.csv", "manifest.toml"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# subcommand: solve-mfg"), "{name}");
        assert_eq!(lines.next(), Some("# seed: 11"), "{name}");
        assert!(lines.next().unwrap().starts_with("# config_sha256: "), "{name}");
    }
    let summary = body_rows(&dir.path().join("mfg_summary.csv"));
    assert_eq!(summary[0], "step,t,mean_X,var_X,mean_Y,mean_alpha,var_alpha");
    assert_eq!(summary.len(), 1 + 21);
    let manifest: toml::Table = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(11));
    assert!(manifest["config"].as_str().unwrap().contains("[model]"));
    assert!(manifest["wall_time_seconds"].as_float().is_some());
    assert!(manifest["version"].as_str().is_some());
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("smoke.toml");
    assert!(run(&["solve-nplayer", "--threads", "1"], &cfg, a.path()).status.success());
    assert!(run(&["solve-nplayer", "--threads", "3"], &cfg, b.path()).status.success());
    for name in ["nplayer_residuals.csv", "nplayer_summary.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let rows = body_rows(&a.path().join("nplayer_residuals.csv"));
    assert_eq!(rows[0], "N,iteration,residual");
}

#[test]
fn broken_config_yields_witness_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["check-monotonicity"], &config("broken_q.toml"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("witness.csv").exists());
    let summary = body_rows(&dir.path().join("monotonicity.csv"));
    assert!(summary[1].ends_with(",false"));
}

#[test]
fn reference_config_certifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["check-monotonicity"], &config("reference.toml"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("witness.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("passed=true"), "{stdout}");
}

#[test]
fn invalid_config_exits_one_with_every_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[modle]\na = 1\n[grid]\nK = 0\n").unwrap();
    let out = run(&["solve-mfg"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown key \"modle\""), "{err}");
    assert!(err.contains("grid.K must be ≥ 1"), "{err}");
    assert!(err.contains("missing [model] section"), "{err}");
}

#[test]
fn riccati_oracle_prints_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["oracle-riccati"], &config("deterministic.toml"), dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("K0 ="));
    assert!(stdout.contains("value ="));
    assert_eq!(body_rows(&dir.path().join("riccati.csv")).len(), 1 + 401);
    // The reference game has noise and interaction, which the oracle rejects.
    let out = run(&["oracle-riccati"], &config("reference.toml"), dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_is_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("deterministic.toml");
    let before = std::fs::read(&cfg).unwrap();
    run(&["oracle-riccati"], &cfg, dir.path());
    assert_eq!(std::fs::read(&cfg).unwrap(), before);
}
