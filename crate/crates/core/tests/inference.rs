mod common;

use exdf_core::archive::McmcConfig;
use exdf_core::data::{CollocatedPair, GridSeries, Location, StationSeries};
use exdf_core::diagnostics::split_rhat;
use exdf_core::mh::{accept, AdaptiveProposal};
use exdf_core::model::{ModelSpec, ParameterState};
use exdf_core::posterior::{log_posterior, FusionData};
use exdf_core::rng::{stream, Purpose};
use exdf_core::sampler::{initial_state, run_mcmc, Chain};
use exdf_core::simulate::{simulate, SyntheticScenario};
use exdf_core::spatial::JITTER;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use common::{de_boor, integrate, ks_one_sample, normal_cdf};

// ---------------------------------------------------------------------------
// Independent plain-sum evaluation of the joint log density.

fn ln_norm(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

fn ln_gpd(z: f64, sigma: f64, xi: f64) -> f64 {
    let t = 1.0 + xi * z / sigma;
    if t <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -sigma.ln() - (1.0 / xi + 1.0) * t.ln()
}

fn ln_laplace_trunc(x: f64, mu: f64, b: f64) -> f64 {
    if x.abs() >= 0.5 {
        return f64::NEG_INFINITY;
    }
    let z = b * (2.0 - (-(0.5 - mu) / b).exp() - (-(0.5 + mu) / b).exp());
    -(x - mu).abs() / b - z.ln()
}

/// Variance whose inverse is Gamma(a, b) with integer a ≤ 3.
fn ln_inv_gamma(v: f64, a: f64, b: f64) -> f64 {
    let gamma_a: f64 = match a as u32 {
        1 | 2 => 1.0,
        3 => 2.0,
        _ => unreachable!(),
    };
    a * b.ln() - gamma_a.ln() - (a + 1.0) * v.ln() - b / v
}

fn ln_mvn(v: &[f64], mean: f64, cov: &DMatrix<f64>) -> f64 {
    let n = v.len();
    let x = nalgebra::DVector::from_iterator(n, v.iter().map(|a| a - mean));
    let quad = x.dot(&(cov.clone().try_inverse().unwrap() * &x));
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
}

fn knots(m: usize, lo: f64, hi: f64) -> Vec<f64> {
    let inner = m - 4;
    let mut k = vec![lo; 4];
    for j in 1..=inner {
        k.push(lo + (hi - lo) * j as f64 / (inner + 1) as f64);
    }
    k.extend([hi; 4]);
    k
}

fn spline(coef: &[f64], knots: &[f64], t: f64) -> f64 {
    coef.iter().enumerate().map(|(i, c)| c * de_boor(i, 3, knots, t)).sum()
}

fn oracle(pairs: &[CollocatedPair], s: &ParameterState, spec: &ModelSpec, domain: (f64, f64)) -> f64 {
    let kn = knots(spec.m, domain.0, domain.1);
    let n = pairs.len();
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let g = &p.grid;
        for (k, &t) in p.station.timestamps.iter().enumerate() {
            let Some(v) = p.station.censored[k] else { continue };
            let ind = |d: i64| g.timestamps.iter().position(|x| *x == d).map_or(0.0, |j| if g.values[j] > g.threshold { 1.0 } else { 0.0 });
            let w = [1.0, if t > g.timestamps[0] { ind(t - 1) } else { 0.0 }, ind(t), ind(t + 1)];
            let eta: f64 = w.iter().zip(&s.lambda[i]).map(|(a, b)| a * b).sum();
            let prob = 1.0 / (1.0 + (-eta).exp());
            total += if v > 0.0 {
                prob.ln() + ln_gpd(v, spline(&s.c[i], &kn, t as f64).exp(), s.xi_y)
            } else {
                (1.0 - prob).ln()
            };
        }
        for (k, &t) in g.timestamps.iter().enumerate() {
            let x = g.values[k] - g.threshold;
            if x > 0.0 {
                total += ln_gpd(x, spline(&s.d[i], &kn, t as f64).exp(), s.xi_x);
            }
        }
        for r in 0..spec.m {
            total += ln_norm(s.c[i][r], s.alpha[i][r] + s.beta[i][r] * s.d[i][r], s.sigma2_c);
            total += ln_norm(s.d[i][r], spec.mu_d[r], spec.kappa_d);
        }
        for l in 0..4 {
            total += ln_norm(s.lambda[i][l], spec.mu_lambda[l], spec.sigma2_lambda[l]);
        }
    }
    let locs: Vec<Location> = pairs.iter().map(|p| p.station.location).collect();
    let corr = |phi: f64, var: f64| {
        DMatrix::from_fn(n, n, |a, b| {
            let d = ((locs[a].x - locs[b].x).powi(2) + (locs[a].y - locs[b].y).powi(2)).sqrt();
            var * ((-phi * d).exp() + if a == b { JITTER } else { 0.0 })
        })
    };
    for r in 0..spec.m {
        let a: Vec<f64> = s.alpha.iter().map(|row| row[r]).collect();
        let b: Vec<f64> = s.beta.iter().map(|row| row[r]).collect();
        total += ln_mvn(&a, 0.0, &corr(spec.phi_alpha, s.sigma2_alpha));
        total += ln_mvn(&b, 1.0, &corr(spec.phi_beta, s.sigma2_beta));
    }
    total += ln_laplace_trunc(s.xi_y, spec.xi_y_prior.location, spec.xi_y_prior.scale);
    total += ln_laplace_trunc(s.xi_x, spec.xi_x_prior.location, spec.xi_x_prior.scale);
    total += ln_inv_gamma(s.sigma2_c, spec.a_c, spec.b_c);
    total += ln_inv_gamma(s.sigma2_alpha, spec.a_alpha, spec.b_alpha);
    total += ln_inv_gamma(s.sigma2_beta, spec.a_beta, spec.b_beta);
    total
}

fn tiny_pair(id: &str, loc: Location, ys: &[Option<f64>], xs: &[f64]) -> CollocatedPair {
    let days: Vec<i64> = (0..ys.len() as i64).collect();
    let grid = GridSeries::new(7, loc, (0..xs.len() as i64).collect(), xs.to_vec(), 10.0).unwrap();
    let st = StationSeries::new(id, loc, days, ys.to_vec(), 10.0).unwrap();
    CollocatedPair::new(st, grid).unwrap()
}

fn tiny_spec() -> ModelSpec {
    let mut spec = ModelSpec::with_defaults(4);
    spec.a_alpha = 3.0;
    spec.b_alpha = 0.7;
    spec.a_c = 1.0;
    spec.b_c = 2.5;
    spec.mu_d = vec![0.1, -0.2, 0.3, 0.0];
    spec.kappa_d = 4.0;
    spec.mu_lambda = [-1.0, 0.5, 0.2, 0.0];
    spec.sigma2_lambda = [1.0, 2.0, 0.5, 1.5];
    spec.xi_y_prior.location = 0.05;
    spec.xi_x_prior.scale = 0.2;
    spec.phi_alpha = 0.8;
    spec.phi_beta = 2.1;
    spec
}

fn tiny_state(n: usize) -> ParameterState {
    let row = |k: usize, off: f64| (0..4).map(|r| off + 0.1 * (r as f64) - 0.05 * k as f64).collect::<Vec<f64>>();
    ParameterState {
        c: (0..n).map(|k| row(k, 0.4)).collect(),
        d: (0..n).map(|k| row(k, 0.2)).collect(),
        alpha: (0..n).map(|k| row(k, 0.05)).collect(),
        beta: (0..n).map(|k| row(k, 0.9)).collect(),
        lambda: (0..n).map(|k| [-0.8 + 0.1 * k as f64, 0.4, 0.9, -0.3]).collect(),
        xi_y: 0.13,
        xi_x: -0.07,
        sigma2_c: 0.3,
        sigma2_alpha: 0.6,
        sigma2_beta: 0.2,
    }
}

const YS_A: [Option<f64>; 6] = [Some(11.5), Some(9.0), None, Some(10.0), Some(13.2), Some(7.0)];
const XS_A: [f64; 6] = [12.0, 10.5, 9.0, 9.5, 14.0, 10.0];

#[test]
fn log_posterior_matches_plain_sum_oracle() {
    let spec = tiny_spec();
    let pairs = [tiny_pair("A", Location::new(0.0, 0.0), &YS_A, &XS_A)];
    let data = FusionData::new(&pairs, &spec, None).unwrap();
    let state = tiny_state(1);
    let got = log_posterior(&state, &data, &spec).unwrap();
    let want = oracle(&pairs, &state, &spec, (0.0, 5.0));
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");

    let two = [pairs[0].clone(), tiny_pair("B", Location::new(0.7, -0.4), &[Some(12.0), Some(3.0), Some(10.2), Some(8.0), None, Some(19.0)], &[9.0, 11.0, 10.5, 13.0, 12.0, 8.0])];
    let data = FusionData::new(&two, &spec, None).unwrap();
    let state = tiny_state(2);
    let got = log_posterior(&state, &data, &spec).unwrap();
    let want = oracle(&two, &state, &spec, (0.0, 5.0));
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn shape_outside_prior_support_is_minus_infinity() {
    let spec = tiny_spec();
    let pairs = [tiny_pair("A", Location::new(0.0, 0.0), &YS_A, &XS_A)];
    let data = FusionData::new(&pairs, &spec, None).unwrap();
    let mut state = tiny_state(1);
    state.xi_y = 0.6;
    assert_eq!(log_posterior(&state, &data, &spec).unwrap(), f64::NEG_INFINITY);
    // An exceedance beyond the upper endpoint implied by a negative shape.
    let mut state = tiny_state(1);
    state.xi_y = -0.45;
    state.c[0] = vec![-2.0; 4];
    assert_eq!(log_posterior(&state, &data, &spec).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn lone_non_exceedance_contributes_log_one_minus_probability() {
    let spec = tiny_spec();
    let ys = [None, None, Some(4.0), None, None, None];
    let xs = [12.0, 9.0, 9.0, 9.0, 9.0, 12.0];
    let pairs = [tiny_pair("A", Location::new(0.0, 0.0), &ys, &xs)];
    let data = FusionData::new(&pairs, &spec, None).unwrap();
    let s1 = tiny_state(1);
    let mut s2 = s1.clone();
    s2.lambda[0][0] += 0.7;
    // Day 2 has no grid exceedance on days 1..=3, so W = [1, 0, 0, 0].
    let eta1 = s1.lambda[0][0];
    let eta2 = s2.lambda[0][0];
    let lik = |eta: f64| (1.0 - 1.0 / (1.0 + (-eta).exp())).ln();
    let prior = |eta: f64| ln_norm(eta, spec.mu_lambda[0], spec.sigma2_lambda[0]);
    let diff = log_posterior(&s2, &data, &spec).unwrap() - log_posterior(&s1, &data, &spec).unwrap();
    assert!((diff - (lik(eta2) + prior(eta2) - lik(eta1) - prior(eta1))).abs() < 1e-12);
}

#[test]
fn site_terms_are_additive() {
    let spec = tiny_spec();
    let a = tiny_pair("A", Location::new(0.0, 0.0), &YS_A, &XS_A);
    let b_short = tiny_pair("B", Location::new(1.0, 0.5), &[Some(12.0), Some(3.0), Some(10.2), None, None, None], &XS_A);
    let b_long = tiny_pair("B", Location::new(1.0, 0.5), &[Some(12.0), Some(3.0), Some(10.2), Some(15.0), Some(1.0), Some(11.0)], &XS_A);
    let lp = |pairs: &[CollocatedPair], n: usize| {
        let data = FusionData::new(pairs, &spec, Some((0.0, 5.0))).unwrap();
        let mut state = tiny_state(n);
        // Give B the same parameters in the one- and two-site states.
        let src = tiny_state(2);
        let k = n - 1;
        state.c[k] = src.c[1].clone();
        state.d[k] = src.d[1].clone();
        state.alpha[k] = src.alpha[1].clone();
        state.beta[k] = src.beta[1].clone();
        state.lambda[k] = src.lambda[1];
        log_posterior(&state, &data, &spec).unwrap()
    };
    let joint = lp(&[a.clone(), b_long.clone()], 2) - lp(&[a, b_short.clone()], 2);
    let alone = lp(&[b_long], 1) - lp(&[b_short], 1);
    assert!((joint - alone).abs() < 1e-9, "{joint} vs {alone}");
}

// ---------------------------------------------------------------------------
// Metropolis–Hastings kernels on targets with known answers.

fn run_kernel<F: Fn(&[f64]) -> f64>(logp: F, dim: usize, burn: usize, n: usize, thin: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Purpose::Chain, &[0]);
    let mut prop = AdaptiveProposal::new(dim, 0.5);
    let mut x = vec![0.0; dim];
    let mut lp = logp(&x);
    let mut y = vec![0.0; dim];
    let mut out = Vec::with_capacity(n);
    for it in 0..burn + n * thin {
        if it == burn {
            prop.freeze();
        }
        prop.propose(&x, &mut rng, &mut y);
        let lq = logp(&y);
        let ok = accept(lq - lp, &mut rng);
        if ok {
            x.copy_from_slice(&y);
            lp = lq;
        }
        prop.record(ok, &x);
        if it >= burn && (it - burn + 1) % thin == 0 {
            out.push(x.clone());
        }
    }
    out
}

#[test]
fn conjugate_gaussian_target_has_closed_form_moments() {
    // Prior N(0, 4) on theta, ten observations with unit noise.
    let obs = [1.2, 0.4, 2.1, 1.7, 0.9, 1.1, 1.6, 0.3, 1.4, 2.0];
    let post_var = 1.0 / (1.0 / 4.0 + obs.len() as f64);
    let post_mean = post_var * obs.iter().sum::<f64>();
    let logp = |t: &[f64]| -t[0] * t[0] / 8.0 - obs.iter().map(|y| (y - t[0]).powi(2) / 2.0).sum::<f64>();
    let draws: Vec<f64> = run_kernel(logp, 1, 5_000, 40_000, 5, 21).into_iter().map(|v| v[0]).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Generous Monte Carlo allowance for residual autocorrelation.
    assert!((mean - post_mean).abs() < 5.0 * (post_var / n).sqrt() * 2.0, "{mean} vs {post_mean}");
    assert!((var / post_var - 1.0).abs() < 0.05, "{var} vs {post_var}");
}

#[test]
fn two_parameter_marginals_match_quadrature() {
    // Banana-shaped target: x ~ N(0, 1), y | x ~ N(x²/2, 1/2).
    let logp = |v: &[f64]| -v[0] * v[0] / 2.0 - (v[1] - 0.5 * v[0] * v[0]).powi(2);
    let draws = run_kernel(logp, 2, 20_000, 100_000, 10, 5);
    let xs: Vec<f64> = draws.iter().map(|v| v[0]).collect();
    let ys: Vec<f64> = draws.iter().map(|v| v[1]).collect();

    let dx = ks_one_sample(&xs, normal_cdf);
    assert!(dx <= 0.02, "x marginal KS {dx}");

    // Marginal of y by nested quadrature, tabulated as a CDF.
    let dens = |y: f64| integrate(&|x: f64| (-x * x / 2.0 - (y - 0.5 * x * x).powi(2)).exp(), -9.0, 9.0, 1e-10);
    let (lo, hi, k) = (-4.0, 25.0, 5800);
    let h = (hi - lo) / k as f64;
    let mut cdf = vec![0.0; k + 1];
    let mut prev = dens(lo);
    for j in 1..=k {
        let cur = dens(lo + h * j as f64);
        cdf[j] = cdf[j - 1] + 0.5 * h * (prev + cur);
        prev = cur;
    }
    let z = cdf[k];
    let y_cdf = |y: f64| {
        if y <= lo {
            return 0.0;
        }
        if y >= hi {
            return 1.0;
        }
        let f = (y - lo) / h;
        let j = f.floor() as usize;
        (cdf[j] + (f - j as f64) * (cdf[j + 1] - cdf[j])) / z
    };
    let dy = ks_one_sample(&ys, y_cdf);
    assert!(dy <= 0.02, "y marginal KS {dy}");
}

// ---------------------------------------------------------------------------
// Split R-hat.

#[test]
fn identical_chains_give_the_zero_between_variance_value() {
    let mut rng = stream(1, Purpose::Replicate, &[0]);
    let half: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
    let chain: Vec<f64> = half.iter().chain(&half).copied().collect();
    let r = split_rhat(&[chain.clone(), chain]).unwrap();
    let n = half.len() as f64;
    assert!((r - ((n - 1.0) / n).sqrt()).abs() < 1e-12, "{r}");
}

#[test]
fn independent_gaussian_chains_look_converged() {
    let mut rng = stream(2, Purpose::Replicate, &[0]);
    let chains: Vec<Vec<f64>> = (0..2).map(|_| (0..10_000).map(|_| rng.sample(StandardNormal)).collect()).collect();
    assert!(split_rhat(&chains).unwrap() < 1.01);
}

#[test]
fn chains_at_zero_and_ten_have_hand_computed_rhat() {
    let a: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
    // Half-chain means -0.2, 0.2, 9.8, 10.2; every half has variance 1.2.
    let w: f64 = 1.2;
    let between = 5.0 * 100.16 / 3.0;
    let want = ((4.0 / 5.0 * w + between / 5.0) / w).sqrt();
    let r = split_rhat(&[a, b]).unwrap();
    assert!((r - want).abs() < 1e-12 && r > 5.0, "{r} vs {want}");
}

// ---------------------------------------------------------------------------
// The full sampler.

fn small_fit_data(seed: u64) -> (exdf_core::simulate::Simulation, FusionData, ModelSpec) {
    let sc = SyntheticScenario::exceedance(4, 200, 6, seed);
    let sim = simulate(&sc).unwrap();
    let data = FusionData::new(&sim.pairs, &sc.spec, None).unwrap();
    (sim, data, sc.spec)
}

#[test]
fn same_seed_gives_identical_archives() {
    let (_, data, spec) = small_fit_data(3);
    let cfg = McmcConfig { n_iter: 600, burn_in: 200, thin: 4, n_chains: 2, seed: 17 };
    let a = run_mcmc(&data, &spec, &cfg).unwrap();
    let b = run_mcmc(&data, &spec, &cfg).unwrap();
    assert_eq!(a.chains, b.chains);
    let mut bytes_a = Vec::new();
    let mut bytes_b = Vec::new();
    a.write_to(&mut bytes_a).unwrap();
    b.write_to(&mut bytes_b).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert_ne!(a.chains[0], a.chains[1]);
    let c = run_mcmc(&data, &spec, &McmcConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.chains, c.chains);
}

#[test]
fn proposals_are_bitwise_frozen_after_burn_in() {
    let (_, data, spec) = small_fit_data(4);
    let start = initial_state(&data).unwrap();
    let mut chain = Chain::new(&data, &spec, start, stream(5, Purpose::Chain, &[0])).unwrap();
    for _ in 0..400 {
        chain.sweep();
    }
    let before = chain.proposal_snapshot();
    chain.freeze();
    for _ in 0..300 {
        chain.sweep();
    }
    let after = chain.proposal_snapshot();
    assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn fitted_exceedance_frequency_matches_observed() {
    let (sim, data, spec) = small_fit_data(6);
    let cfg = McmcConfig { n_iter: 6_000, burn_in: 2_000, thin: 10, n_chains: 1, seed: 9 };
    let archive = run_mcmc(&data, &spec, &cfg).unwrap();
    for (i, pair) in sim.pairs.iter().enumerate() {
        let pcfg = exdf_core::predict::PredictConfig { n_draws: 400, seed: 2 };
        let pred = exdf_core::predict::predict_fitted_site(&archive, i, pair, &pcfg).unwrap();
        let observed: Vec<(usize, f64)> = pair
            .station
            .censored
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.map(|v| (k, v)))
            .collect();
        let n_obs = observed.len() as f64;
        let freq_obs = observed.iter().filter(|(_, v)| *v > 0.0).count() as f64 / n_obs;
        let p_pred = pred.exceed_prob.iter().sum::<f64>() / pred.exceed_prob.len() as f64;
        let band = 1.96 * (p_pred * (1.0 - p_pred) / n_obs).sqrt();
        assert!((freq_obs - p_pred).abs() <= band, "site {i}: observed {freq_obs}, predicted {p_pred} ± {band}");
    }
}
