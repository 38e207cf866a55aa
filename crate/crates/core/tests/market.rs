use std::sync::Arc;

use riskflow::ensemble::{LazyEnsemble, PathEnsemble, PathSource};
use riskflow::market::{bond_path, simulate, simulate_gbm, simulate_sabr, BondParams, BondStock, GbmParams, MarketModel, Sabr, SabrParams};
use riskflow::rng::gaussian_increments;
use riskflow::stats::Moments;
use riskflow::{make_time_grid, mean_and_stderr};

fn terminal(e: &PathEnsemble, asset: usize) -> Vec<f64> {
    let n = e.grid().n_steps();
    (0..e.n_paths()).map(|p| e.value(p, n, asset)).collect()
}

#[test]
fn zero_volatility_is_deterministic() {
    let grid = make_time_grid(2.0, 40).unwrap();
    let e = simulate_gbm(&GbmParams::scalar(1.5, 0.03, 0.0), &grid, 50, 4).unwrap();
    for p in 0..e.n_paths() {
        for k in 0..grid.n_nodes() {
            let exact = 1.5 * (0.03 * grid.t(k)).exp();
            assert!((e.value(p, k, 0) - exact).abs() <= 1e-13 * exact);
        }
    }
}

#[test]
fn gbm_moments() {
    let (s0, mu, sigma, t) = (1.0, 0.08, 0.3, 1.5);
    let grid = make_time_grid(t, 10).unwrap();
    let e = simulate_gbm(&GbmParams::scalar(s0, mu, sigma), &grid, 200_000, 11).unwrap();
    let x = terminal(&e, 0);
    let mut m = Moments::default();
    x.iter().for_each(|v| m.push(*v));
    let mean = m.mean_estimate().unwrap();
    let var = m.variance_estimate().unwrap();
    let exact_mean = s0 * (mu * t).exp();
    let exact_var = s0 * s0 * (2.0 * mu * t).exp() * ((sigma * sigma * t).exp() - 1.0);
    assert!((mean.mean - exact_mean).abs() <= 4.0 * mean.stderr, "{mean:?} vs {exact_mean}");
    assert!((var.mean - exact_var).abs() <= 4.0 * var.stderr, "{var:?} vs {exact_var}");
}

#[test]
fn correlated_gbm_log_covariance() {
    let p = GbmParams {
        s0: vec![1.0, 2.0],
        drift: vec![0.0, 0.0],
        sigma: vec![vec![0.2, 0.0], vec![0.15, 0.1]],
    };
    let grid = make_time_grid(1.0, 4).unwrap();
    let e = simulate_gbm(&p, &grid, 100_000, 2).unwrap();
    let a: Vec<f64> = terminal(&e, 0).iter().map(|v| v.ln()).collect();
    let b: Vec<f64> = terminal(&e, 1).iter().map(|v| v.ln()).collect();
    let est = riskflow::stats::covariance_estimate(&a, &b).unwrap();
    let exact = 0.2 * 0.15;
    assert!((est.mean - exact).abs() <= 4.0 * est.stderr, "{est:?}");
}

#[test]
fn sabr_degenerates_to_gbm() {
    // alpha = 0 and beta = 1: the forward is driftless with constant volatility s
    let params = SabrParams { f0: 1.0, s: 0.25, alpha: 0.0, beta: 1.0, rho: 0.3 };
    let grid = make_time_grid(1.0, 200).unwrap();
    let e = simulate_sabr(&params, &grid, 40_000, 6).unwrap();
    for p in 0..100 {
        assert_eq!(e.aux_value(p, grid.n_steps(), 0), 0.25);
    }
    let x = terminal(&e, 0);
    let mut m = Moments::default();
    x.iter().for_each(|v| m.push(*v));
    let exact_var = (0.25f64 * 0.25).exp() - 1.0;
    let var = m.variance_estimate().unwrap();
    // Euler bias on the variance is O(dt)
    assert!((var.mean - exact_var).abs() <= 4.0 * var.stderr + 1e-3, "{var:?} vs {exact_var}");
    let mean = m.mean_estimate().unwrap();
    assert!((mean.mean - 1.0).abs() <= 4.0 * mean.stderr);
}

#[test]
fn sabr_volatility_is_a_martingale() {
    let params = SabrParams { f0: 1.0, s: 0.2, alpha: 0.6, beta: 0.5, rho: -0.5 };
    let grid = make_time_grid(1.0, 50).unwrap();
    let e = simulate_sabr(&params, &grid, 100_000, 21).unwrap();
    let n = grid.n_steps();
    let sig: Vec<f64> = (0..e.n_paths()).map(|p| e.aux_value(p, n, 0)).collect();
    let est = mean_and_stderr(&sig).unwrap();
    assert!((est.mean - 0.2).abs() <= 4.0 * est.stderr, "{est:?}");
    let f = mean_and_stderr(&terminal(&e, 0)).unwrap();
    // absorption at zero makes the forward a supermartingale
    assert!(f.mean <= 1.0 + 3.0 * f.stderr, "{f:?}");
    assert!(e.values().iter().all(|v| *v >= 0.0));
}

#[test]
fn sabr_uncorrelated_drivers() {
    let params = SabrParams { f0: 1.0, s: 0.2, alpha: 0.5, beta: 0.7, rho: 0.0 };
    let grid = make_time_grid(1.0, 20).unwrap();
    let e = simulate_sabr(&params, &grid, 50_000, 8).unwrap();
    let n = grid.n_steps();
    let df: Vec<f64> = (0..e.n_paths()).map(|p| e.value(p, n, 0) - 1.0).collect();
    let dsig: Vec<f64> = (0..e.n_paths()).map(|p| e.aux_value(p, n, 0).ln()).collect();
    // B1 and B2 are independent, so the correlation is zero
    let b1: Vec<f64> = (0..e.n_paths()).map(|p| (0..n).map(|k| e.increment(p, k, 0)).sum()).collect();
    let b2: Vec<f64> = (0..e.n_paths()).map(|p| (0..n).map(|k| e.increment(p, k, 1)).sum()).collect();
    let c = riskflow::stats::covariance_estimate(&b1, &b2).unwrap();
    assert!(c.mean.abs() <= 4.0 * c.stderr, "{c:?}");
    // forward and volatility martingale parts have zero covariation
    let fc = riskflow::stats::covariance_estimate(&df, &dsig).unwrap();
    assert!(fc.mean.abs() <= 4.0 * fc.stderr, "{fc:?}");
}

#[test]
fn bond_path_is_exponential() {
    let grid = make_time_grid(3.0, 12).unwrap();
    let b = BondParams { rate: 0.04, s0: 2.0 };
    let path = bond_path(&b, &grid);
    assert_eq!(path.len(), 13);
    for (k, v) in path.iter().enumerate() {
        assert!((v - 2.0 * (0.04 * grid.t(k)).exp()).abs() < 1e-14);
    }
    let model: Arc<dyn MarketModel> = Arc::new(BondStock::new(b, 1.0, 0.05, 0.2).unwrap());
    let e = simulate(model, &grid, 20, 1).unwrap();
    for p in 0..20 {
        for k in 0..13 {
            assert!((e.value(p, k, 0) - path[k]).abs() < 1e-14);
        }
    }
}

fn endpoint(model: &dyn MarketModel, fine: &[f64], n_fine: usize, block: usize, horizon: f64) -> f64 {
    let m = model.n_drivers();
    let n = n_fine / block;
    let dt = horizon / n as f64;
    let mut s = vec![0.0; model.n_assets()];
    let mut aux = vec![0.0; model.n_aux()];
    model.initial_state(&mut s, &mut aux);
    let (mut s1, mut aux1) = (s.clone(), aux.clone());
    let mut db = vec![0.0; m];
    for k in 0..n {
        for (j, x) in db.iter_mut().enumerate() {
            *x = (0..block).map(|b| fine[(k * block + b) * m + j]).sum();
        }
        model.step(k as f64 * dt, (k + 1) as f64 * dt, &s, &aux, &db, &mut s1, &mut aux1);
        s.copy_from_slice(&s1);
        aux.copy_from_slice(&aux1);
    }
    s[0]
}

#[test]
fn sabr_strong_convergence_order() {
    let model = Sabr::new(SabrParams { f0: 1.0, s: 0.3, alpha: 0.5, beta: 0.5, rho: -0.4 }).unwrap();
    let (horizon, n_fine, n_paths) = (1.0, 1024, 2000);
    let blocks = [64, 32, 16, 8];
    let mut sq = vec![0.0; blocks.len()];
    for p in 0..n_paths {
        let fine = gaussian_increments(77, p, n_fine, 2, horizon / n_fine as f64);
        let reference = endpoint(&model, &fine, n_fine, 1, horizon);
        for (i, b) in blocks.iter().enumerate() {
            sq[i] += (endpoint(&model, &fine, n_fine, *b, horizon) - reference).powi(2);
        }
    }
    let rms: Vec<f64> = sq.iter().map(|s| (s / n_paths as f64).sqrt()).collect();
    // three halvings of dt; each should shrink the error by about 1/sqrt(2)
    for w in rms.windows(2) {
        let ratio = w[1] / w[0];
        assert!(ratio < 0.85 && ratio > 0.4, "rms {rms:?}");
    }
}

#[test]
fn ensembles_are_bit_identical_across_pools() {
    let model: Arc<dyn MarketModel> =
        Arc::new(Sabr::new(SabrParams { f0: 1.0, s: 0.3, alpha: 0.4, beta: 0.5, rho: 0.2 }).unwrap());
    let grid = make_time_grid(1.0, 30).unwrap();
    let lazy = LazyEnsemble::new(model, grid, 500, 13);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| PathEnsemble::from(&lazy))
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.values(), b.values());
    assert_eq!(a.increments(), b.increments());
    assert_eq!(a.aux_values(), b.aux_values());
    // any path can be regenerated alone
    let mut buf = lazy.new_buffer();
    lazy.load_path(321, &mut buf);
    assert_eq!(buf.value(30)[0], a.value(321, 30, 0));
}
