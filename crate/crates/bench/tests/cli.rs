use std::fs;
use std::process::Command;

use mambo_bench::config::ExperimentConfig;

fn mambo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mambo"))
}

#[test]
fn bench_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.cfg");
    fs::write(&cfg, "eta = 1\nn0 = 6\nrestarts = 1\ncandidate_count = 64\nrefine_steps = 2\n").unwrap();
    let out = dir.path().join("r");
    let o = mambo()
        .args(["bench", "--problem", "branin100", "--iters", "8", "--macroreps", "2", "--seed", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("branin100_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 9);
    assert!(String::from_utf8_lossy(&o.stdout).contains("2 runs ok"));
}

#[test]
fn missing_config_exits_with_one() {
    let o = mambo().args(["run", "--config", "/no/such/file.cfg"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/file.cfg"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mambo().args(["run", "--frobnicate"]).output().unwrap().status.code(), Some(1));
    assert_eq!(mambo().arg("explode").output().unwrap().status.code(), Some(1));
    assert_eq!(mambo().args(["bench", "--algo", "turbo"]).output().unwrap().status.code(), Some(1));
    assert_eq!(mambo().args(["run", "--problem", "nowhere7"]).output().unwrap().status.code(), Some(1));
    assert_eq!(mambo().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn validate_passes() {
    let o = mambo().arg("validate").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}

#[test]
fn oracle_caches_price_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let o = mambo().args(["oracle", "--problem", "price10"]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("price10_oracle.txt")).unwrap();
    assert!(text.contains("interior = true"), "{text}");
    let value: f64 = text.lines().find_map(|l| l.strip_prefix("value = ")).unwrap().parse().unwrap();
    assert!(value < -2000.0);
}

#[test]
fn run_prints_incumbent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "problem = camel10\nn0 = 5\niterations = 7\neta = 0\nrestarts = 1\ncandidate_count = 32\n").unwrap();
    let o = mambo().arg("run").arg("--config").arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("7 points"));
    assert!(dir.path().join("camel10_seed0.csv").exists());
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cfg");
    fs::write(&path, "problem = eggholder50\nseed = 4\neta = cv\neta_grid = 0, 1\nsubsets = 3\n").unwrap();
    let c = ExperimentConfig::from_file(&path).unwrap();
    assert_eq!(c.problem, "eggholder50");
    assert_eq!(c.seed, 4);
    fs::write(&path, "problem = eggholder50\nseed = 4\nseed = 5\n").unwrap();
    let e = ExperimentConfig::from_file(&path).unwrap_err();
    assert!(e.to_string().contains("duplicate"));
    assert_eq!(e.exit_code(), 1);
}
