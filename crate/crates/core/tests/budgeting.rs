use std::sync::Arc;

use riskflow::budgeting::{
    budget_residual, kl_divergence, solver_registry, BudgetProblem, BudgetRef, ConstantBudget, InformationClass,
    SolveOptions, StartRule,
};
use riskflow::contribution::ContributionProcess;
use riskflow::ensemble::PathEnsemble;
use riskflow::market::{simulate_gbm, GbmParams};
use riskflow::make_time_grid;
use riskflow::policy::StepContext;
use serde_json::Value;

fn driftless() -> PathEnsemble {
    let p = GbmParams {
        s0: vec![1.0, 1.0],
        drift: vec![0.0, 0.0],
        sigma: vec![vec![0.2, 0.0], vec![0.1, 0.25]],
    };
    simulate_gbm(&p, &make_time_grid(1.0, 10).unwrap(), 4_000, 12).unwrap()
}

fn solve(e: &PathEnsemble, beta: Vec<f64>, solver: &str, opts: SolveOptions) -> riskflow::budgeting::BudgetSolution {
    let budget: BudgetRef = Arc::new(ConstantBudget::new(beta).unwrap());
    let p = BudgetProblem::new(e, budget, InformationClass::Deterministic, 1.0).with_options(opts);
    solver_registry().build(solver, &Value::Null).unwrap().solve(&p).unwrap()
}

fn shares(sol: &riskflow::budgeting::BudgetSolution, e: &PathEnsemble, step: usize) -> Vec<f64> {
    let path = e.path(0);
    let ctx = StepContext::new(step, e.grid().t(step), 0, 1.0, 1.0, &path);
    let mut out = vec![0.0; 2];
    sol.policy.shares(&ctx, &mut out);
    out
}

#[test]
fn solvers_are_registered() {
    let names = solver_registry().names();
    for n in ["pointwise", "iterative", "embedding"] {
        assert!(names.contains(&n), "{names:?}");
    }
    assert!(solver_registry().build("simplex", &Value::Null).is_err());
}

#[test]
fn deterministic_solution_meets_budget() {
    let e = driftless();
    let sol = solve(&e, vec![0.02, 0.05], "iterative", SolveOptions::default());
    assert!(sol.converged);
    let cp = ContributionProcess::with_mean(sol.policy.clone(), &e, 1.0, sol.mean_gain).unwrap();
    let budget = ConstantBudget::new(vec![0.02, 0.05]).unwrap();
    let r = budget_residual(&cp, &budget, &InformationClass::Deterministic).unwrap();
    assert!(r.max <= 1e-9, "{r:?}");
}

#[test]
fn scale_law_without_drift() {
    // u ⊙ c = β with c linear in u, so scaling β by a scales u by √a
    let e = driftless();
    let a = 3.7;
    let s1 = solve(&e, vec![0.02, 0.05], "iterative", SolveOptions::default());
    let s2 = solve(&e, vec![0.02 * a, 0.05 * a], "iterative", SolveOptions::default());
    for step in [0, 4, 9] {
        for (x, y) in shares(&s1, &e, step).iter().zip(shares(&s2, &e, step)) {
            assert!((a.sqrt() * x - y).abs() <= 1e-8 * y.abs(), "step {step}: {x} {y}");
        }
    }
}

#[test]
fn solution_does_not_depend_on_start() {
    let e = driftless();
    let s1 = solve(&e, vec![0.03, 0.01], "iterative", SolveOptions::default());
    let s2 = solve(&e, vec![0.03, 0.01], "iterative", SolveOptions { start: StartRule::Uniform, ..Default::default() });
    for step in 0..10 {
        for (x, y) in shares(&s1, &e, step).iter().zip(shares(&s2, &e, step)) {
            assert!((x - y).abs() <= 1e-8 * x.abs(), "step {step}: {x} {y}");
        }
    }
}

#[test]
fn kl_vanishes_when_policy_equals_budget() {
    let e = driftless();
    let beta = vec![0.3, 0.6];
    let budget = ConstantBudget::new(beta.clone()).unwrap();
    let u = riskflow::policy::ConstantPolicy::new(beta);
    let kl = kl_divergence(&budget, &u, &e, 1.0).unwrap();
    assert!(kl.abs() < 1e-12, "{kl}");
}

#[test]
fn budget_dimension_mismatch_is_rejected() {
    let e = driftless();
    let budget: BudgetRef = Arc::new(ConstantBudget::new(vec![0.1]).unwrap());
    let p = BudgetProblem::new(&e, budget, InformationClass::Deterministic, 1.0);
    assert!(solver_registry().build("iterative", &Value::Null).unwrap().solve(&p).is_err());
    assert!(ConstantBudget::new(vec![0.1, 0.0]).is_err());
}
