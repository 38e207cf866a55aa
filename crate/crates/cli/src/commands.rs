use std::fs::File;

use anyhow::{bail, Context, Result};
use riskflow::budgeting::{
    budget_from_json, kl_divergence, solver_registry, BudgetProblem, InformationClass, SolveOptions,
};
use riskflow::contribution::{aggregate_risk, investment_value, sup_norm, ContributionProcess};
use riskflow::ensemble::materialize;
use riskflow::io::{read_matrix_csv, write_ensemble_binary, write_ensemble_csv, Cell, Table};
use riskflow::single_period::{allocation_registry, risk_contribution_sp, std_risk, RiskMeasure, SinglePeriodMarket};
use riskflow::stats::{combined_stderr, Moments};
use riskflow::strategies::{figure2_table, policy_from_json, MvParams};
use riskflow::verify::{run_verify, Fault, VerifyConfig};
use riskflow::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, Simulation};
use crate::output::{with_output, Format, Report};
use crate::{CommonArgs, VerificationFailed, VerifyArgs};

fn bad(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

/// Overlays the config object `key` on the serialized `default`.
fn overlay<T: Serialize + DeserializeOwned>(cfg: &mut Config, key: &str, default: T) -> Result<T> {
    let mut base = serde_json::to_value(default)?;
    if let Some(v) = cfg.value.get(key) {
        let Some(obj) = v.as_object() else {
            return Err(bad(format!("config field '{key}' must be an object")));
        };
        for (k, x) in obj {
            base[k] = x.clone();
        }
    }
    cfg.note(key, serde_json::to_string(&base)?);
    serde_json::from_value(base).map_err(|e| bad(format!("config field '{key}': {e}")))
}

pub fn single_period(a: &CommonArgs) -> Result<()> {
    let mut cfg = Config::load("single-period", a.config.as_deref())?;
    let rows: Vec<Vec<f64>> = if let Some(rows) = cfg.opt("covariance")? {
        rows
    } else if let Some(f) = cfg.opt::<String>("covariance_file")? {
        let path = cfg.resolve(&f);
        let file = File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
        read_matrix_csv(file)?
    } else {
        return Err(bad("config needs 'covariance' or 'covariance_file'"));
    };
    cfg.note("covariance", serde_json::to_string(&rows)?);
    let market = SinglePeriodMarket::from_rows(&rows)?;
    let names: Vec<String> =
        cfg.opt("strategies")?.unwrap_or_else(|| vec!["ew".into(), "mv".into(), "rp".into()]);
    cfg.note("strategies", names.join(";"));
    let params = json!({ "budget": cfg.value.get("budget").cloned().unwrap_or(Value::Null) });

    let mut weights = Table::new(&["strategy", "asset", "weight", "contribution", "normalized_contribution"]);
    let mut summary = Table::new(&["strategy", "sigma", "max_normalized", "min_normalized"]);
    for name in &names {
        let strategy = allocation_registry().build(name, &params)?;
        let w = strategy.allocate(&market)?;
        let sigma = std_risk(&market, w.as_slice());
        let k = risk_contribution_sp(&market, w.as_slice(), RiskMeasure::Std)?;
        let norm: Vec<f64> = k.iter().map(|v| v / sigma).collect();
        for (i, (wi, ki)) in w.as_slice().iter().zip(&k).enumerate() {
            weights.push(vec![name.as_str().into(), (i + 1).into(), (*wi).into(), (*ki).into(), norm[i].into()])?;
        }
        let hi = norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = norm.iter().copied().fold(f64::INFINITY, f64::min);
        summary.push(vec![name.as_str().into(), sigma.into(), hi.into(), lo.into()])?;
    }
    let mut report = Report::new(cfg.header);
    report.add("weights", weights);
    report.add("summary", summary);
    report.emit(a.format.unwrap_or(Format::Csv), a.out.as_deref())
}

pub fn contrib(a: &CommonArgs) -> Result<()> {
    let mut cfg = Config::load("contrib", a.config.as_deref())?;
    let sim = Simulation::from_config(&mut cfg, a)?;
    let policy_json = cfg.block("policy")?;
    let detail: usize = cfg.get("detail_paths", 0)?;
    let src = sim.source.as_ref();
    let x0 = sim.x0;
    let policy = policy_from_json(&policy_json, src, x0)?;
    let inv = investment_value(policy.as_ref(), src, x0)?;
    let var = inv.terminal_variance;
    if var.mean <= 0.0 && sup_norm(policy.as_ref(), src, x0)? > 0.0 {
        bail!(Error::DegenerateMarket("a nonzero policy has zero terminal variance".into()));
    }
    let cp = ContributionProcess::with_mean(policy.clone(), src, x0, inv.terminal_mean.mean - x0)?;
    let agg = aggregate_risk(&cp)?;
    let se = combined_stderr(var.stderr, agg.stderr);
    let z = var.z_score(&agg);
    let pass = z <= 3.0;

    let mut t = Table::new(&[
        "variance",
        "variance_stderr",
        "aggregate",
        "aggregate_stderr",
        "combined_stderr",
        "z",
        "cap_hits",
        "status",
    ]);
    t.push(vec![
        var.mean.into(),
        var.stderr.into(),
        agg.mean.into(),
        agg.stderr.into(),
        se.into(),
        z.into(),
        inv.cap_hits.into(),
        if pass { "PASS" } else { "FAIL" }.into(),
    ])?;
    let mut report = Report::new(cfg.header);
    report.add("aggregation", t);
    if detail > 0 {
        let grid = src.grid();
        let mut paths = Table::new(&["path", "t", "asset", "u", "c", "k"]);
        for p in 0..detail.min(src.n_paths()) {
            let pc = cp.path(p);
            let k = pc.k();
            for step in 0..grid.n_steps() {
                for i in 0..pc.n_assets {
                    let j = step * pc.n_assets + i;
                    paths.push(vec![p.into(), grid.t(step).into(), i.into(), pc.u[j].into(), pc.c[j].into(), k[j].into()])?;
                }
            }
        }
        report.add("paths", paths);
    }
    report.emit(a.format.unwrap_or(Format::Csv), a.out.as_deref())?;
    if !pass {
        bail!(VerificationFailed(format!("aggregation identity off by {z:.2} combined stderr")));
    }
    Ok(())
}

pub fn budget(a: &CommonArgs) -> Result<()> {
    let mut cfg = Config::load("budget", a.config.as_deref())?;
    let sim = Simulation::from_config(&mut cfg, a)?;
    let budget = budget_from_json(&cfg.block("budget")?)?;
    let class: InformationClass = cfg.opt("class")?.unwrap_or(InformationClass::Full);
    cfg.note("class", serde_json::to_string(&class)?);
    let default_solver = if class == InformationClass::Full && sim.model.is_driftless() { "pointwise" } else { "iterative" };
    let solver_name: String = cfg.get("solver", default_solver.to_string())?;
    let solver = solver_registry().build(&solver_name, &Value::Null)?;
    let opts: SolveOptions = overlay(&mut cfg, "options", SolveOptions::default())?;
    let src = sim.source.as_ref();
    let problem = BudgetProblem::new(src, budget.clone(), class, sim.x0).with_options(opts);
    let sol = solver.solve(&problem)?;
    let kl = kl_divergence(budget.as_ref(), sol.policy.as_ref(), src, sim.x0)?;

    let mut summary = Table::new(&[
        "solver",
        "policy",
        "iterations",
        "converged",
        "residual_max",
        "residual_l2",
        "objective",
        "terminal_variance",
        "terminal_variance_stderr",
        "mean_gain",
        "kl_divergence",
        "gamma",
        "cap_hits",
    ]);
    summary.push(vec![
        solver.name().into(),
        sol.policy.name().into(),
        sol.iterations.into(),
        sol.converged.into(),
        sol.residual.max.into(),
        sol.residual.l2.into(),
        sol.objective.into(),
        sol.terminal_variance.mean.into(),
        sol.terminal_variance.stderr.into(),
        sol.mean_gain.into(),
        kl.into(),
        sol.gamma.unwrap_or(f64::NAN).into(),
        sol.cap_hits.into(),
    ])?;

    let table = ContributionProcess::with_mean(sol.policy.clone(), src, sim.x0, sol.mean_gain)?.materialize();
    let grid = src.grid();
    let mut policy = Table::new(&["t", "asset", "u_mean", "u_min", "u_max", "k_mean"]);
    let k = table.k();
    for step in 0..grid.n_steps() {
        for i in 0..table.n_assets {
            let (mut um, mut km) = (Moments::default(), Moments::default());
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in 0..table.n_paths {
                let j = table.index(p, step, i);
                um.push(table.u[j]);
                km.push(k[j]);
                lo = lo.min(table.u[j]);
                hi = hi.max(table.u[j]);
            }
            policy.push(vec![grid.t(step).into(), i.into(), um.mean().into(), lo.into(), hi.into(), km.mean().into()])?;
        }
    }
    let mut report = Report::new(cfg.header);
    report.add("summary", summary);
    report.add("policy", policy);
    report.emit(a.format.unwrap_or(Format::Csv), a.out.as_deref())?;
    if !sol.converged {
        bail!(Error::Convergence { iterations: sol.iterations, residual: sol.residual.max });
    }
    Ok(())
}

pub fn figure2(a: &CommonArgs) -> Result<()> {
    let mut cfg = Config::load("figure2", a.config.as_deref())?;
    let params: MvParams = overlay(&mut cfg, "mv", MvParams::default())?;
    let t: f64 = cfg.get("t", 0.0)?;
    let (lo, hi, n): (f64, f64, usize) = cfg.opt("x_range")?.unwrap_or((-1.0, 3.0, 41));
    cfg.note("x_range", format!("{lo};{hi};{n}"));
    let x0s: Vec<f64> = cfg.opt("x0_list")?.unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
    let taus: Vec<f64> = cfg.opt("tau_list")?.unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
    cfg.note("x0_list", serde_json::to_string(&x0s)?);
    cfg.note("tau_list", serde_json::to_string(&taus)?);
    let fig = figure2_table(&params, t, (lo, hi, n), &x0s, &taus)?;

    let mut rows = Table::new(&["sweep", "value", "x", "k0", "k1"]);
    for r in &fig.rows {
        rows.push(vec![r.sweep.clone().into(), r.value.into(), r.x.into(), r.k0.into(), r.k1.into()])?;
    }
    let mut summary =
        Table::new(&["sweep", "value", "k0_x2", "k1_x2", "k1_root_low", "k1_root_high", "central_positive"]);
    for s in &fig.summary {
        let (r0, r1) = s.k1_roots.unwrap_or((f64::NAN, f64::NAN));
        summary.push(vec![
            s.sweep.clone().into(),
            s.value.into(),
            s.k0_x2.into(),
            s.k1_x2.into(),
            r0.into(),
            r1.into(),
            s.central_positive.into(),
        ])?;
    }
    let mut report = Report::new(cfg.header);
    report.add("rows", rows);
    report.add("summary", summary);
    report.emit(a.format.unwrap_or(Format::Csv), a.out.as_deref())
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let c = &a.common;
    let cfg = Config::load("verify", c.config.as_deref())?;
    let seed = match c.seed {
        Some(s) => s,
        None => cfg.opt("seed")?.unwrap_or(VerifyConfig::default().seed),
    };
    let max_paths = match c.paths {
        Some(n) => Some(n),
        None => cfg.opt("max_paths")?,
    };
    let filter = match &a.filter {
        Some(f) => Some(f.clone()),
        None => cfg.opt("filter")?,
    };
    let fault = match a.inject_fault.clone().or(cfg.opt("fault")?) {
        Some(name) => Some(Fault::parse(&name)?),
        None => None,
    };
    let vc = VerifyConfig { seed, max_paths, fault };
    let report = run_verify(&vc, filter.as_deref())?;
    for r in &report.checks {
        eprintln!("{} {:>2} {}{}", if r.passed { "PASS" } else { "FAIL" }, r.id, r.name, if r.detail.is_empty() { String::new() } else { format!(" ({})", r.detail) });
    }
    match c.format.unwrap_or(Format::Json) {
        Format::Json => with_output(c.out.as_deref(), |w| {
            serde_json::to_writer_pretty(&mut *w, &report)?;
            writeln!(w)?;
            Ok(())
        })?,
        Format::Csv => {
            let mut t = Table::new(&["id", "name", "suite", "passed", "detail"]);
            for r in &report.checks {
                t.push(vec![
                    Cell::Int(i64::from(r.id)),
                    r.name.clone().into(),
                    r.suite.clone().into(),
                    r.passed.into(),
                    r.detail.clone().into(),
                ])?;
            }
            let mut header = cfg.header;
            header.push(("seed".into(), seed.to_string()));
            header.push(("max_paths".into(), max_paths.map_or("none".into(), |n| n.to_string())));
            let mut rep = Report::new(header);
            rep.add("checks", t);
            rep.emit(Format::Csv, c.out.as_deref())?;
        }
    }
    if !report.passed {
        bail!(VerificationFailed(report.failed.join(", ")));
    }
    Ok(())
}

pub fn simulate(a: &CommonArgs) -> Result<()> {
    let mut cfg = Config::load("simulate", a.config.as_deref())?;
    let sim = Simulation::from_config(&mut cfg, a)?;
    let ens = materialize(sim.source.as_ref()).with_seed(sim.seed);
    let binary = a.out.as_ref().and_then(|p| p.extension()).is_some_and(|e| e == "bin");
    if a.format == Some(Format::Json) {
        return Err(bad("ensembles are written as CSV, or binary for a .bin output file"));
    }
    with_output(a.out.as_deref(), |w| {
        if binary {
            write_ensemble_binary(&ens, w)?;
        } else {
            for (k, v) in &cfg.header {
                writeln!(w, "# {k}={v}")?;
            }
            write_ensemble_csv(&ens, w)?;
        }
        Ok(())
    })
}
