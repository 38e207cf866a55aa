//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line with its runtime and key metrics.

use std::io::Write;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use riskflow::verify::{check_by_name, CheckReport, VerifyConfig};

// Criteria run one at a time so the runtimes are meaningful.
static SERIAL: Mutex<()> = Mutex::new(());

fn line(id: u32, name: &str, passed: bool, elapsed: Duration, limit: Option<u64>, detail: &str) {
    let mut err = std::io::stderr();
    let limit = limit.map_or(String::new(), |l| format!(" / limit {l}s"));
    let _ = writeln!(
        err,
        "{} criterion {id:>2} {name} ({:.2}s{limit}) {detail}",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn summary(r: &CheckReport) -> String {
    let m: Vec<String> = r.metrics.iter().take(6).map(|(k, v)| format!("{k}={v:.6e}")).collect();
    if r.detail.is_empty() {
        m.join(" ")
    } else {
        format!("{} [{}]", m.join(" "), r.detail)
    }
}

fn criterion(id: u32, name: &str, limit_secs: u64) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = check_by_name(name).expect("registered check");
    assert_eq!(check.id, id);
    let start = Instant::now();
    let report = check.run(&VerifyConfig::default());
    let elapsed = start.elapsed();
    let in_time = elapsed <= Duration::from_secs(limit_secs);
    line(id, name, report.passed && in_time, elapsed, Some(limit_secs), &summary(&report));
    assert!(report.passed, "criterion {id} ({name}) failed: {:?} {}", report.metrics, report.detail);
    assert!(in_time, "criterion {id} ({name}) took {elapsed:?}, limit {limit_secs}s");
}

#[test]
fn criterion_01_euler_single_period() {
    criterion(1, "euler_single_period", 1);
}

#[test]
fn criterion_02_example_covariance() {
    criterion(2, "example_covariance", 1);
}

#[test]
fn criterion_03_deviation_axioms() {
    criterion(3, "deviation_axioms", 5);
}

#[test]
fn criterion_04_gbm_variance() {
    criterion(4, "gbm_variance", 10);
}

#[test]
fn criterion_05_aggregation() {
    criterion(5, "aggregation", 60);
}

#[test]
fn criterion_06_gateaux() {
    criterion(6, "gateaux", 30);
}

#[test]
fn criterion_07_covariance_symmetry() {
    criterion(7, "covariance_symmetry", 15);
}

#[test]
fn criterion_08_vol_managed() {
    criterion(8, "vol_managed", 10);
}

#[test]
fn criterion_09_sabr_cases() {
    criterion(9, "sabr_cases", 60);
}

#[test]
fn criterion_10_mean_variance() {
    criterion(10, "mean_variance", 60);
}

#[test]
fn criterion_11_embedding() {
    criterion(11, "embedding", 60);
}

#[test]
fn criterion_12_projection() {
    criterion(12, "projection", 30);
}

fn verify_output(threads: &str) -> (Vec<u8>, i32) {
    let out = Command::new(env!("CARGO_BIN_EXE_riskflow"))
        .args(["verify", "--seed", "99", "--paths", "3000"])
        .env("RISKFLOW_THREADS", threads)
        .output()
        .expect("run riskflow");
    (out.stdout, out.status.code().unwrap_or(-1))
}

#[test]
fn criterion_13_determinism() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (a, code_a) = verify_output("1");
    let (b, code_b) = verify_output("4");
    let in_process = check_by_name("determinism").expect("registered").run(&VerifyConfig::default());
    let same = a == b && !a.is_empty() && code_a == code_b;
    let passed = same && in_process.passed;
    line(
        13,
        "determinism",
        passed,
        start.elapsed(),
        None,
        &format!("report_bytes={} threads=1,4 identical={same} in_process={}", a.len(), in_process.passed),
    );
    assert!(same, "verify reports differ between worker counts");
    assert!(in_process.passed, "{}", in_process.detail);
}
