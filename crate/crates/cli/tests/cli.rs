use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cciv"));
    c.env_remove("CCIV_SEED");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn data() -> String {
    fixture("small.csv").to_string_lossy().into_owned()
}

fn report_field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` line in\n{text}"))
        .to_string()
}

#[test]
fn infer_prints_report_with_decision() {
    let o = run(&["infer", "--data", &data(), "--beta0", "0.3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("beta0: 0.300000\n"));
    let reject = report_field(&text, "reject");
    assert!(reject == "true" || reject == "false");
    assert_eq!(report_field(&text, "validation"), "pass");
}

#[test]
fn wald_statistic_vanishes_at_its_own_estimate() {
    let o = run(&["infer", "--data", &data(), "--beta0", "0", "--csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), row.len());
    let col = header.iter().position(|h| *h == "beta1_hat").unwrap();
    let beta1 = row[col];

    let o = run(&["infer", "--data", &data(), "--beta0", beta1]);
    assert!(o.status.success());
    let t = report_field(&stdout(&o), "T");
    assert!(t == "0.000000" || t == "-0.000000", "T = {t}");
}

#[test]
fn infer_is_deterministic() {
    let args = ["infer", "--data", &data(), "--beta0", "0.1", "--weighting", "optimal"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn infer_writes_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.txt");
    let o = run(&["infer", "--data", &data(), "--beta0", "0.3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text, stdout(&run(&["infer", "--data", &data(), "--beta0", "0.3"])));
}

#[test]
fn validate_reports_each_check() {
    let o = run(&["validate", "--data", &data()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("block_leverage"));
    assert!(text.trim_end().ends_with("summary: pass"));
}

#[test]
fn simulate_reproduces_fixture() {
    let o = run(&["simulate", "--config", fixture("small.cfg").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), std::fs::read_to_string(fixture("small.csv")).unwrap());
}

#[test]
fn seed_env_fallback_matches_flag() {
    let cfg = fixture("small.cfg");
    let flag = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "99"]);
    let env = bin()
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .env("CCIV_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(flag.stdout, env.stdout);
    let default = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_ne!(flag.stdout, default.stdout);
}

#[test]
fn power_smoke_and_worker_invariance() {
    let cfg = fixture("small.cfg");
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("power.svg");
    let one = run(&[
        "power", "--config", cfg.to_str().unwrap(), "--reps", "10", "--workers", "1",
        "--svg", svg.to_str().unwrap(),
    ]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let csv = stdout(&one);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta0,wald,lm,ar,combined,mc_std_err,valid,invalid_count");
    assert_eq!(lines.len(), 10);
    assert!(String::from_utf8_lossy(&one.stderr).contains("invalid replications: 0"));
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));

    let three = run(&["power", "--config", cfg.to_str().unwrap(), "--reps", "10", "--workers", "3"]);
    assert_eq!(one.stdout, three.stdout);
}

#[test]
fn limit_experiment_table() {
    let o = run(&["limit-experiment", "--reps", "2000", "--deltas", "-1,0,1", "--rho1", "0.3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "delta,ump,wald,lm,mc_std_err");
    assert_eq!(lines.len(), 4);
    let again = run(&["limit-experiment", "--reps", "2000", "--deltas", "-1,0,1", "--rho1", "0.3", "--workers", "2"]);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn exit_codes() {
    let missing = run(&["infer", "--data", "/nonexistent/data.csv", "--beta0", "0"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    let bad_alpha = run(&["infer", "--data", &data(), "--beta0", "0", "--alpha", "1.5"]);
    assert_eq!(bad_alpha.status.code(), Some(2));

    let bad_preset = run(&["power", "--preset", "nope"]);
    assert_eq!(bad_preset.status.code(), Some(2));

    let bad_rho = run(&["limit-experiment", "--rho1", "0.8", "--rho2", "0.8", "--reps", "10"]);
    assert_eq!(bad_rho.status.code(), Some(2));

    let usage = run(&["infer"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn rank_deficient_instruments_are_numerical_failures() {
    let text = std::fs::read_to_string(fixture("small.csv")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dup.csv");
    // Duplicate z_1 as an extra many-IV column so ZᵀZ is singular.
    let dup: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let first_z = l.split(',').nth(6).unwrap();
            if i == 0 { format!("{l},z_9\n") } else { format!("{l},{first_z}\n") }
        })
        .collect();
    std::fs::write(&path, dup).unwrap();
    let o = run(&["infer", "--data", path.to_str().unwrap(), "--beta0", "0", "--config", "/dev/null"]);
    assert!(matches!(o.status.code(), Some(2) | Some(3)), "{:?}", o.status);
}

fn check_snapshot(name: &str, args: &[&str]) {
    let o = run(args);
    assert!(o.status.success());
    let got = stdout(&o);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name);
    if std::env::var_os("CCIV_UPDATE_SNAPSHOTS").is_some() {
        std::fs::write(&path, &got).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_default();
    assert_eq!(got, want, "help text of `{}` changed; rerun with CCIV_UPDATE_SNAPSHOTS=1", args.join(" "));
}

#[test]
fn help_snapshots() {
    check_snapshot("cciv.txt", &["--help"]);
    for sub in ["infer", "validate", "simulate", "power", "limit-experiment"] {
        check_snapshot(&format!("{sub}.txt"), &[sub, "--help"]);
    }
}
