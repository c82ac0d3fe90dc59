//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `ACCEPTANCE_ONLY=1,7 cargo test -p exdf-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;
mod common;

use std::time::{Duration, Instant};

use exdf_core::archive::McmcConfig;
use exdf_core::data::{CollocatedPair, GridSeries, Location, StationSeries};
use exdf_core::diagnostics::all_group_rhat;
use exdf_core::extremes::{dgpd_loglik, gpd_cdf, gpd_quantile, DeltaGpdParams, GpdParams};
use exdf_core::metrics::{classification_metrics, crps, mae, rmse};
use exdf_core::model::{ModelSpec, ParamGroup};
use exdf_core::numeric::{quantile, quantile_sorted};
use exdf_core::posterior::FusionData;
use exdf_core::predict::{predict_fitted_site, PredictConfig};
use exdf_core::rng::{stream, Purpose};
use exdf_core::sampler::run_mcmc;
use exdf_core::simulate::{simulate, SyntheticScenario};
use exdf_core::spatial::{distance_matrix, exp_covariance};
use exdf_core::validate::{loso_cv, LosoConfig, ModelChoice};
use exdf_core::variogram::{prefit_decay, VariogramConfig};
use rand::Rng;
use rand_distr::StandardNormal;

/// Outcome of one criterion: pass flag and a one-line measurement summary.
type Outcome = (bool, String);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 9] = [
        (1, "delta-GPD total mass", Duration::from_secs(5), mass),
        (2, "quantile round-trip", Duration::from_secs(1), round_trip),
        (3, "simulation-based calibration", Duration::from_secs(30 * 60), calibration),
        (4, "two-chain convergence", Duration::from_secs(10 * 60), convergence),
        (5, "LOSO ordering vs Gaussian baseline", Duration::MAX, ordering),
        (6, "in-sample predictive coverage", Duration::MAX, coverage),
        (7, "metric hand values", Duration::from_secs(1), metric_values),
        (8, "variogram decay recovery", Duration::from_secs(60), variogram),
        (9, "thread-count determinism", Duration::MAX, determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = run();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = ok && in_time;
        failed += usize::from(!pass);
        let budget_note = if budget == Duration::MAX { String::new() } else { format!(" (budget {:.0?})", budget) };
        println!(
            "criterion {id} {name} ... {} [{detail}; {:.2?}{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            took
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn mass() -> Outcome {
    let shapes = [-0.4, -0.2, 0.0, 0.2, 0.4];
    let configs = [(0.0, 1.0), (0.2, 0.5), (0.8, 2.0), (1.0, 1.0), (0.2, 5.0)];
    let mut worst = 0.0f64;
    for &shape in &shapes {
        for &(p, scale) in &configs {
            let params = DeltaGpdParams::new(GpdParams::new(scale, shape).unwrap(), p).unwrap();
            let point = dgpd_loglik(0.0, &params).unwrap().exp();
            let f = |z: f64| if z > 0.0 { dgpd_loglik(z, &params).unwrap().exp() } else { 0.0 };
            let total = point + oracle::integrate_half_line(&f, scale, 1e-10);
            worst = worst.max((total - 1.0).abs());
        }
    }
    (worst < 1e-6, format!("25 combinations, max |mass - 1| = {worst:.1e}, tol 1e-6"))
}

fn round_trip() -> Outcome {
    let mut rng = stream(2, Purpose::Replicate, &[]);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = GpdParams::new(rng.gen_range(0.1..5.0), rng.gen_range(-0.45..0.45)).unwrap();
        let q = rng.gen_range(0.001..0.999);
        let z = gpd_quantile(q, &p).unwrap();
        worst = worst.max((gpd_quantile(gpd_cdf(z, &p), &p).unwrap() - z).abs());
    }
    (worst < 1e-10, format!("10^4 points, max error {worst:.1e}, tol 1e-10"))
}

fn in_interval(draws: &mut [f64], truth: f64) -> bool {
    draws.sort_by(f64::total_cmp);
    quantile_sorted(draws, 0.025) <= truth && truth <= quantile_sorted(draws, 0.975)
}

fn calibration() -> Outcome {
    let (mut hits, mut total) = ([0usize; 3], [0usize; 3]);
    for rep in 0..100u64 {
        let sc = SyntheticScenario::exceedance(6, 365, 10, 100 + rep);
        let sim = simulate(&sc).unwrap();
        let data = FusionData::new(&sim.pairs, &sc.spec, None).unwrap();
        let cfg = McmcConfig { n_iter: 50_000, burn_in: 12_500, thin: 10, n_chains: 1, seed: rep };
        let archive = run_mcmc(&data, &sc.spec, &cfg).unwrap();
        let truth = sim.truth.state.flatten();
        let layout = &archive.header.layout;
        let c_range = layout.range(ParamGroup::C).unwrap();
        let mut rng = stream(rep, Purpose::Subsample, &[]);
        let c_pick = rand::seq::index::sample(&mut rng, c_range.len(), c_range.len() / 10);
        let xi_y = layout.range(ParamGroup::XiY).unwrap().start;
        let xi_x = layout.range(ParamGroup::XiX).unwrap().start;
        let checks = [(0, xi_y), (1, xi_x)]
            .into_iter()
            .chain(c_pick.into_iter().map(|j| (2, c_range.start + j)));
        for (k, idx) in checks {
            hits[k] += usize::from(in_interval(&mut archive.series(0, idx), truth[idx]));
            total[k] += 1;
        }
    }
    let rate = |k: usize| hits[k] as f64 / total[k] as f64;
    let ok = (0..3).all(|k| (0.88..=0.99).contains(&rate(k)));
    (
        ok,
        format!(
            "coverage xi_y {:.3}, xi_x {:.3}, c {:.3} ({} coefficients); band [0.88, 0.99]",
            rate(0),
            rate(1),
            rate(2),
            total[2]
        ),
    )
}

fn convergence() -> Outcome {
    let sc = SyntheticScenario::exceedance(6, 365, 10, 4242);
    let sim = simulate(&sc).unwrap();
    let data = FusionData::new(&sim.pairs, &sc.spec, None).unwrap();
    let cfg = McmcConfig { n_iter: 500_000, burn_in: 100_000, thin: 100, n_chains: 2, seed: 11 };
    let archive = run_mcmc(&data, &sc.spec, &cfg).unwrap();
    let groups = all_group_rhat(&archive).unwrap();
    let worst = groups.iter().max_by(|a, b| a.max_rhat.total_cmp(&b.max_rhat)).unwrap();
    let degenerate: usize = groups.iter().map(|g| g.degenerate.len()).sum();
    let ok = degenerate == 0 && groups.iter().all(|g| g.max_rhat < 1.05);
    (ok, format!("{} groups, worst split-R-hat {:.4} ({}), tol < 1.05", groups.len(), worst.max_rhat, worst.worst_param))
}

fn loso_wins(gaussian: bool, rep: u64) -> usize {
    let (n_days, m) = (730, 8);
    let sc = if gaussian {
        SyntheticScenario::gaussian(6, n_days, m, 500 + rep)
    } else {
        let mut sc = SyntheticScenario::exceedance(6, n_days, m, 500 + rep);
        sc.xi_y = Some(0.2);
        sc.xi_x = Some(0.2);
        sc.spec.mu_lambda = [-2.5, 0.5, 3.0, 0.5];
        sc
    };
    let sim = simulate(&sc).unwrap();
    let spec = ModelSpec::with_defaults(m);
    let mut cfg = LosoConfig::default();
    cfg.mcmc = McmcConfig { n_iter: 10_000, burn_in: 2_500, thin: 10, n_chains: 1, seed: rep };
    cfg.predict.n_draws = 500;
    let exdf = loso_cv(&sim.pairs, &sim.grids, &spec, ModelChoice::Exdf, &cfg).unwrap();
    let gaus = loso_cv(&sim.pairs, &sim.grids, &spec, ModelChoice::Gaussian, &cfg).unwrap();
    exdf.iter()
        .zip(&gaus)
        .filter(|(a, b)| match (&a.report, &b.report) {
            (Some(a), Some(b)) if gaussian => b.rmse < a.rmse,
            (Some(a), Some(b)) => a.crps < b.crps,
            _ => false,
        })
        .count()
}

fn ordering() -> Outcome {
    let heavy = (0..10).filter(|&rep| loso_wins(false, rep) >= 4).count();
    let gauss = (0..10).filter(|&rep| loso_wins(true, rep) >= 4).count();
    (
        heavy >= 8 && gauss >= 8,
        format!(
            "heavy-tailed: exceedance model lower CRPS at >=4/6 sites in {heavy}/10; \
             Gaussian data: baseline lower RMSE at >=4/6 sites in {gauss}/10; need >=8/10"
        ),
    )
}

fn coverage() -> Outcome {
    let sc = SyntheticScenario::exceedance(6, 365, 10, 606);
    let sim = simulate(&sc).unwrap();
    let data = FusionData::new(&sim.pairs, &sc.spec, None).unwrap();
    let cfg = McmcConfig { n_iter: 50_000, burn_in: 12_500, thin: 25, n_chains: 2, seed: 6 };
    let archive = run_mcmc(&data, &sc.spec, &cfg).unwrap();
    let (mut inside, mut total) = (0usize, 0usize);
    for (i, pair) in sim.pairs.iter().enumerate() {
        let pred = predict_fitted_site(&archive, i, pair, &PredictConfig { n_draws: 1000, seed: 60 + i as u64 }).unwrap();
        for ((lo, hi), (_, y)) in pred.interval(0.95).into_iter().zip(pair.station.observed()) {
            inside += usize::from(lo <= y && y <= hi);
            total += 1;
        }
    }
    let rate = inside as f64 / total as f64;
    ((0.93..=0.99).contains(&rate), format!("{inside}/{total} = {rate:.4} inside 95% intervals; band [0.93, 0.99]"))
}

fn metric_values() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    expect("crps point", crps(&[3.0, 3.0, 3.0], 3.0).unwrap(), 0.0, 0.0);
    expect("crps pair", crps(&[0.0, 2.0], 1.0).unwrap(), 0.5, 0.0);
    expect("crps shifted", crps(&[4.5, 4.5], 1.25).unwrap(), 3.25, 0.0);
    let obs = [0.0, 1.0, 4.0, 2.5];
    let pred = [1.0, 1.0, 2.0, 2.5];
    expect("rmse", rmse(&pred, &obs).unwrap(), 1.25f64.sqrt(), 1e-12);
    expect("mae", mae(&pred, &obs).unwrap(), 0.75, 0.0);
    let prob = [0.9, 0.7, 0.6, 0.2, 0.1, 0.3, 0.0, 0.4, 0.2, 0.45];
    let seen = [true, true, false, true, false, false, false, false, false, false];
    let m = classification_metrics(&prob, &seen, 0.5).unwrap();
    expect("accuracy", m.accuracy, 0.8, 0.0);
    expect("precision", m.precision.unwrap(), 2.0 / 3.0, 0.0);
    expect("recall", m.recall.unwrap(), 2.0 / 3.0, 0.0);
    expect("specificity", m.specificity.unwrap(), 6.0 / 7.0, 0.0);
    expect("f1", m.f1.unwrap(), 2.0 / 3.0, 1e-12);
    let n = failures.len();
    (n == 0, if n == 0 { "13 values exact (reals within 1e-12)".into() } else { failures.join("; ") })
}

/// Fifty stations whose log-scale regression intercepts and slopes are
/// Gaussian-process fields with decay `phi`; the regressions are exact.
fn gp_field_pairs(rep: u64, phi: f64) -> Vec<CollocatedPair> {
    let mut rng = stream(rep, Purpose::Replicate, &[8]);
    let locs: Vec<Location> = (0..50).map(|_| Location::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0))).collect();
    let l = exp_covariance(&distance_matrix(&locs), phi, 1.0).unwrap().cholesky().unwrap().l();
    let mut field = |mean: f64, sd: f64| -> Vec<f64> {
        let z: Vec<f64> = (0..locs.len()).map(|_| rng.sample(StandardNormal)).collect();
        (0..locs.len()).map(|i| mean + sd * (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>()).collect()
    };
    let a = field(10.0, 1.0);
    let b = field(1.0, 0.2);
    let days: Vec<i64> = (0..40).collect();
    let x: Vec<f64> = days.iter().map(|t| 1.0 + (t % 7) as f64 / 3.0).collect();
    locs.iter()
        .enumerate()
        .map(|(i, loc)| {
            let grid = GridSeries::new(i as u64 + 1, *loc, days.clone(), x.iter().map(|v| 50.0 + v).collect(), 50.0).unwrap();
            let ys = x.iter().map(|v| Some(20.0 + a[i] + b[i] * v)).collect();
            let st = StationSeries::new(format!("V{i:02}"), *loc, days.clone(), ys, 20.0).unwrap();
            CollocatedPair::new(st, grid).unwrap()
        })
        .collect()
}

fn variogram() -> Outcome {
    let phi = 2.0;
    let (mut signed_a, mut signed_b) = (Vec::new(), Vec::new());
    for rep in 0..100 {
        let fit = prefit_decay(&gp_field_pairs(rep, phi), &VariogramConfig::default()).unwrap();
        let (da, db) = fit.decays();
        signed_a.push((da - phi) / phi);
        signed_b.push((db - phi) / phi);
    }
    let median = |v: &[f64]| quantile(v, 0.5);
    let abs = |v: &[f64]| v.iter().map(|e| e.abs()).collect::<Vec<_>>();
    let (ma, mb) = (median(&signed_a), median(&signed_b));
    (
        ma.abs() <= 0.3 && mb.abs() <= 0.3,
        format!(
            "median signed relative error: intercept field {ma:+.3}, slope field {mb:+.3}; tol ±0.30 \
             (median absolute relative error {:.3} / {:.3}, not gated)",
            median(&abs(&signed_a)),
            median(&abs(&signed_b))
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    common::simulate_into(dir.path(), 5, 200, 6, 9);
    let cfg = common::write_config(dir.path(), 6, 4_000, "");
    let mut sums = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("posterior_{threads}.bin"));
        common::check(common::exdf().env("EXDF_THREADS", threads).arg("fit").arg("--config").arg(&cfg).arg("--out").arg(&out));
        sums.push(common::sha256_file(&out));
    }
    (sums[0] == sums[1], format!("sha256 with 1 thread {}…, with 3 threads {}…", &sums[0][..12], &sums[1][..12]))
}
