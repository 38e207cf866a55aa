use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riskflow::io::{read_ensemble_binary, read_ensemble_csv};
use serde_json::{json, Value};
use tempfile::TempDir;

fn riskflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskflow")).args(args).output().expect("run riskflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn write_config(dir: &TempDir, name: &str, v: &Value) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run_config(cmd: &str, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    riskflow(&args)
}

/// Header lines and named tables of a multi-table CSV report.
struct Parsed {
    header: BTreeMap<String, String>,
    tables: BTreeMap<String, Vec<BTreeMap<String, String>>>,
}

fn parse(stdout: &[u8]) -> Parsed {
    let text = String::from_utf8(stdout.to_vec()).unwrap();
    let mut header = BTreeMap::new();
    let mut tables = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut columns: Vec<String> = Vec::new();
    for l in text.lines() {
        if let Some(rest) = l.strip_prefix("# ") {
            let (k, v) = rest.split_once('=').unwrap();
            if k == "table" {
                current = Some(v.to_string());
                columns.clear();
                tables.insert(v.to_string(), Vec::new());
            } else {
                header.insert(k.to_string(), v.to_string());
            }
        } else if l.is_empty() {
            continue;
        } else if columns.is_empty() {
            columns = l.split(',').map(str::to_string).collect();
        } else {
            let row = columns.iter().cloned().zip(l.split(',').map(str::to_string)).collect();
            tables.get_mut(current.as_ref().unwrap()).unwrap().push(row);
        }
    }
    Parsed { header, tables }
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn example_covariance() -> Value {
    json!([[0.09, 0.048, 0.0225], [0.048, 0.04, 0.009], [0.0225, 0.009, 0.0225]])
}

#[test]
fn single_period_example_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "sp.json", &json!({"covariance": example_covariance(), "strategies": ["ew", "mv", "rp"]}));
    let o = run_config("single-period", &cfg, &[]);
    assert_eq!(code(&o), 0);
    let p = parse(&o.stdout);
    let w = &p.tables["weights"];
    let mv1 = w.iter().find(|r| r["strategy"] == "mv" && r["asset"] == "1").unwrap();
    assert!(num(mv1, "weight") < 0.0);
    let rp: Vec<f64> = w.iter().filter(|r| r["strategy"] == "rp").map(|r| num(r, "normalized_contribution")).collect();
    assert_eq!(rp.len(), 3);
    for v in &rp {
        assert!((v - 1.0 / 3.0).abs() < 1e-8);
    }
    let sigma: BTreeMap<String, f64> =
        p.tables["summary"].iter().map(|r| (r["strategy"].clone(), num(r, "sigma"))).collect();
    assert!(sigma["mv"] <= sigma["rp"] && sigma["rp"] <= sigma["ew"]);
}

#[test]
fn single_period_identity_gives_identical_strategies() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "id.json", &json!({"covariance": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]}));
    let o = run_config("single-period", &cfg, &[]);
    assert_eq!(code(&o), 0);
    let p = parse(&o.stdout);
    for r in &p.tables["weights"] {
        assert!((num(r, "weight") - 1.0 / 3.0).abs() < 1e-12, "{r:?}");
    }
}

#[test]
fn single_period_bad_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("m.csv"), "0.09,0.01\nnot-a-number,0.04\n").unwrap();
    let cfg = write_config(&dir, "f.json", &json!({"covariance_file": "m.csv"}));
    assert_eq!(code(&run_config("single-period", &cfg, &[])), 2);

    let cfg = write_config(&dir, "n.json", &json!({"covariance": [[1.0, 2.0], [2.0, 1.0]]}));
    let o = run_config("single-period", &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("positive definite"));

    let missing = dir.path().join("absent.json");
    assert_eq!(code(&run_config("single-period", &missing, &[])), 2);
}

#[test]
fn single_period_reads_covariance_file() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("m.csv"), "0.09,0.048,0.0225\n0.048,0.04,0.009\n0.0225,0.009,0.0225\n").unwrap();
    let cfg = write_config(&dir, "f.json", &json!({"covariance_file": "m.csv", "strategies": ["mv"]}));
    let o = run_config("single-period", &cfg, &[]);
    assert_eq!(code(&o), 0);
    let p = parse(&o.stdout);
    assert!((num(&p.tables["weights"][0], "weight") + 0.355083459787557).abs() < 1e-10);
}

fn gbm_contrib(policy: Value, n_paths: usize) -> Value {
    json!({
        "seed": 5,
        "n_paths": n_paths,
        "n_steps": 50,
        "model": {"type": "gbm", "s0": [1.0], "drift": [0.05], "sigma": [[0.2]]},
        "policy": policy
    })
}

#[test]
fn contrib_constant_policy_passes_and_reproduces() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", &gbm_contrib(json!({"type": "constant", "shares": [1.0]}), 20_000));
    let a = run_config("contrib", &cfg, &[]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let p = parse(&a.stdout);
    assert_eq!(p.tables["aggregation"][0]["status"], "PASS");
    for key in ["seed", "n_paths", "n_steps", "build", "horizon", "x0"] {
        assert!(p.header.contains_key(key), "missing header {key}");
    }
    assert_eq!(p.header["seed"], "5");
    assert!(p.header["build"].starts_with("riskflow-"));
    let b = run_config("contrib", &cfg, &[]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn contrib_zero_policy_is_trivially_consistent() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "z.json", &gbm_contrib(json!({"type": "constant", "shares": [0.0]}), 1_000));
    let o = run_config("contrib", &cfg, &[]);
    assert_eq!(code(&o), 0);
    let row = &parse(&o.stdout).tables["aggregation"][0];
    assert_eq!(num(row, "variance"), 0.0);
    assert_eq!(num(row, "aggregate"), 0.0);
    assert_eq!(row["status"], "PASS");
}

#[test]
fn contrib_error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "one.json", &gbm_contrib(json!({"type": "constant", "shares": [1.0]}), 1));
    assert_eq!(code(&run_config("contrib", &cfg, &[])), 2);

    let mut flat = gbm_contrib(json!({"type": "constant", "shares": [1.0]}), 500);
    flat["model"]["sigma"] = json!([[0.0]]);
    let cfg = write_config(&dir, "flat.json", &flat);
    assert_eq!(code(&run_config("contrib", &cfg, &[])), 3);

    let mut no_seed = gbm_contrib(json!({"type": "constant", "shares": [1.0]}), 500);
    no_seed.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(&dir, "ns.json", &no_seed);
    assert_eq!(code(&run_config("contrib", &cfg, &[])), 2);
    assert_eq!(code(&run_config("contrib", &cfg, &["--seed", "3"])), 0);

    let cfg = write_config(&dir, "bad.json", &gbm_contrib(json!({"type": "no_such_policy"}), 500));
    assert_eq!(code(&run_config("contrib", &cfg, &[])), 2);
}

#[test]
fn contrib_json_mirrors_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", &gbm_contrib(json!({"type": "wealth_feedback", "a": [0.5], "b": [1.0]}), 2_000));
    let csv = parse(&run_config("contrib", &cfg, &[]).stdout);
    let o = run_config("contrib", &cfg, &["--format", "json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["header"]["seed"], "5");
    let t = &v["tables"]["aggregation"];
    let cols: Vec<&str> = t["columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    let row = &csv.tables["aggregation"][0];
    assert_eq!(cols.len(), row.len());
    let i = cols.iter().position(|c| *c == "variance").unwrap();
    assert_eq!(t["rows"][0][i].as_f64().unwrap(), num(row, "variance"));
}

#[test]
fn contrib_writes_path_detail_to_file() {
    let dir = TempDir::new().unwrap();
    let mut v = gbm_contrib(json!({"type": "constant", "shares": [2.0]}), 200);
    v["detail_paths"] = json!(2);
    let cfg = write_config(&dir, "d.json", &v);
    let out = dir.path().join("out.csv");
    let o = run_config("contrib", &cfg, &["--out", out.to_str().unwrap(), "--steps", "10"]);
    assert_eq!(code(&o), 0);
    let p = parse(&fs::read(&out).unwrap());
    assert_eq!(p.header["n_steps"], "10");
    let rows = &p.tables["paths"];
    assert_eq!(rows.len(), 2 * 10);
    for r in rows {
        assert!((num(r, "k") - num(r, "u") * num(r, "c")).abs() <= 1e-12 * num(r, "k").abs().max(1.0));
    }
}

#[test]
fn budget_vol_managed_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let (c_hat, sigma) = (0.03, 0.25);
    let cfg = write_config(
        &dir,
        "vm.json",
        &json!({
            "seed": 2, "n_paths": 2000, "n_steps": 20, "x0": 1.0,
            "model": {"type": "gbm", "s0": [1.0], "drift": [0.0], "sigma": [[sigma]]},
            "budget": {"type": "vol_managed", "c_hat": c_hat},
            "class": {"class": "full"}
        }),
    );
    let o = run_config("budget", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let p = parse(&o.stdout);
    assert_eq!(p.tables["summary"][0]["solver"], "pointwise");
    assert_eq!(p.tables["summary"][0]["converged"], "true");
    let target = c_hat / (sigma * sigma);
    for r in &p.tables["policy"] {
        assert!((num(r, "u_min") - target).abs() <= 0.01 * target);
        assert!((num(r, "u_max") - target).abs() <= 0.01 * target);
    }
}

#[test]
fn budget_constant_class_matches_single_period_value() {
    let dir = TempDir::new().unwrap();
    let (beta, sigma) = (0.04, 0.2);
    let cfg = write_config(
        &dir,
        "cc.json",
        &json!({
            "seed": 3, "n_paths": 20000, "n_steps": 50, "x0": 0.0,
            "model": {"type": "gbm", "s0": [1.0], "drift": [0.0], "sigma": [[sigma]]},
            "budget": {"type": "constant", "values": [beta]},
            "class": {"class": "constant"}
        }),
    );
    let o = run_config("budget", &cfg, &[]);
    assert_eq!(code(&o), 0);
    let p = parse(&o.stdout);
    // one number: every row carries the same share
    let u: Vec<f64> = p.tables["policy"].iter().map(|r| num(r, "u_mean")).collect();
    assert!(u.iter().all(|v| (v - u[0]).abs() < 1e-12));
    // single-period solution of u² Var(S_T) = β T
    let analytic = (beta / ((sigma * sigma as f64).exp() - 1.0)).sqrt();
    assert!((u[0] - analytic).abs() <= 0.01 * analytic, "{} vs {analytic}", u[0]);
}

#[test]
fn budget_tiny_iteration_cap_exits_4() {
    let dir = TempDir::new().unwrap();
    let base = json!({
        "seed": 1, "n_paths": 1000, "n_steps": 20,
        "model": {"type": "gbm", "s0": [1.0, 1.0], "drift": [0.05, 0.02], "sigma": [[0.2, 0.0], [0.1, 0.25]]},
        "budget": {"type": "constant", "values": [0.02, 0.03]},
        "options": {"max_iter": 1}
    });
    for class in ["deterministic", "full"] {
        let mut v = base.clone();
        v["class"] = json!({"class": class});
        let cfg = write_config(&dir, &format!("{class}.json"), &v);
        let o = run_config("budget", &cfg, &[]);
        assert_eq!(code(&o), 4, "{class}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("residual"));
    }
}

#[test]
fn budget_unknown_solver_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "s.json",
        &json!({
            "seed": 1, "n_paths": 100, "n_steps": 5,
            "model": {"type": "gbm", "s0": [1.0], "drift": [0.0], "sigma": [[0.2]]},
            "budget": {"type": "constant", "values": [0.02]},
            "solver": "simplex"
        }),
    );
    assert_eq!(code(&run_config("budget", &cfg, &[])), 2);
}

#[test]
fn figure2_summary_structure() {
    let o = riskflow(&["figure2"]);
    assert_eq!(code(&o), 0);
    let p = parse(&o.stdout);
    let summary = &p.tables["summary"];
    assert!(summary.iter().all(|r| num(r, "k0_x2") > 0.0 && num(r, "k1_x2") < 0.0));
    let tau: Vec<&BTreeMap<String, String>> = summary.iter().filter(|r| r["sweep"] == "tau").collect();
    assert!(tau.len() >= 2);
    assert!(tau.iter().all(|r| r["k0_x2"] == tau[0]["k0_x2"] && r["k1_x2"] == tau[0]["k1_x2"]));
    assert!(p.tables["rows"].len() > 10);
    assert!(p.header.contains_key("mv"));
}

#[test]
fn verify_filter_runs_one_suite() {
    let o = riskflow(&["verify", "--filter", "single_period"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 3);
    assert!(checks.iter().all(|c| c["suite"] == "single_period" && c["passed"] == true));
}

#[test]
fn verify_injected_fault_names_aggregation() {
    let o = riskflow(&["verify", "--filter", "aggregation", "--inject-fault", "convention", "--paths", "3000"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("aggregation"));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["failed"], json!(["aggregation"]));
}

#[test]
fn verify_rejects_unknown_filter_and_fault() {
    assert_eq!(code(&riskflow(&["verify", "--filter", "nothing"])), 2);
    assert_eq!(code(&riskflow(&["verify", "--filter", "1", "--inject-fault", "bogus"])), 2);
}

#[test]
fn verify_csv_report() {
    let o = riskflow(&["verify", "--filter", "1,2", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let p = parse(&o.stdout);
    assert_eq!(p.tables["checks"].len(), 2);
    assert!(p.header.contains_key("seed"));
}

#[test]
fn bad_thread_setting_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_riskflow"))
        .args(["verify", "--filter", "1"])
        .env("RISKFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "sim.json",
        &json!({
            "seed": 8, "n_paths": 6, "n_steps": 4,
            "model": {"type": "sabr", "f0": 1.0, "s": 0.3, "alpha": 0.4, "beta": 0.5, "rho": -0.3}
        }),
    );
    let csv_out = dir.path().join("e.csv");
    let bin_out = dir.path().join("e.bin");
    assert_eq!(code(&run_config("simulate", &cfg, &["--out", csv_out.to_str().unwrap()])), 0);
    assert_eq!(code(&run_config("simulate", &cfg, &["--out", bin_out.to_str().unwrap()])), 0);
    let from_csv = read_ensemble_csv(fs::File::open(&csv_out).unwrap()).unwrap();
    let from_bin = read_ensemble_binary(fs::File::open(&bin_out).unwrap()).unwrap();
    assert_eq!(from_csv.values(), from_bin.values());
    assert_eq!(from_csv.aux_values(), from_bin.aux_values());
    assert_eq!(from_bin.seed(), Some(8));
    assert_eq!(from_bin.n_paths(), 6);
}
