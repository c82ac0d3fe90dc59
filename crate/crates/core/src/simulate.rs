//! Synthetic datasets drawn from the hierarchical model itself.
//!
//! Cells sit on a regular lattice over a square domain; stations are placed
//! uniformly and paired with their nearest cell. Coefficient fields, curves,
//! exceedance probabilities and exceedances are drawn layer by layer, and raw
//! series are rebuilt as `threshold + exceedance`, with non-exceedance days
//! filled uniformly below the threshold so the Gaussian baseline can be fitted
//! to the same files.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{collocate, CollocatedPair, GridSeries, Location, StationSeries};
use crate::error::{Error, Result};
use crate::extremes::{dgpd_sample, gpd_sample, logistic, DeltaGpdParams, GpdParams, LaplacePrior};
use crate::model::{ModelSpec, ParameterState};
use crate::rng::{stream, Purpose, StreamRng};
use crate::spatial::{distance_matrix, exp_covariance};

/// How raw values are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Zero-inflated GPD exceedances over fixed thresholds.
    Exceedance { station_threshold: f64, grid_threshold: f64, grid_exceed_prob: f64 },
    /// Gaussian observations around spline curves (`d` shifted by `level`);
    /// thresholds are the `quantile` of each simulated series.
    Gaussian { level: f64, sigma2_y: f64, sigma2_x: f64, quantile: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub n_sites: usize,
    /// Rounded up to a square lattice.
    pub n_cells: usize,
    pub n_days: usize,
    /// Side length of the square domain, km.
    pub domain_km: f64,
    /// First day (days since 1970-01-01).
    pub start_day: i64,
    /// Generating hyperparameters (also a sensible fitting spec).
    pub spec: ModelSpec,
    /// Fixed true shapes; drawn from their priors when absent.
    pub xi_y: Option<f64>,
    pub xi_x: Option<f64>,
    /// Fixed true variances; drawn from their priors when absent.
    pub sigma2_c: Option<f64>,
    pub sigma2_alpha: Option<f64>,
    pub sigma2_beta: Option<f64>,
    /// Fixed exceedance-regression coefficients for every site.
    pub lambda: Option<[f64; 4]>,
    /// Probability that a station day is missing.
    pub missing_rate: f64,
    pub generator: Generator,
    pub seed: u64,
}

impl SyntheticScenario {
    /// A small, well-behaved exceedance scenario.
    pub fn exceedance(n_sites: usize, n_days: usize, m: usize, seed: u64) -> Self {
        let mut spec = ModelSpec::with_defaults(m);
        spec.a_alpha = 10.0;
        spec.b_alpha = 1.0;
        spec.a_beta = 20.0;
        spec.b_beta = 1.0;
        spec.a_c = 20.0;
        spec.b_c = 1.0;
        spec.mu_d = vec![1.0; m];
        spec.kappa_d = 0.1;
        spec.mu_lambda = [-1.5, 0.5, 1.0, 0.5];
        spec.sigma2_lambda = [0.25; 4];
        Self {
            n_sites,
            n_cells: 25,
            n_days,
            domain_km: 2.0,
            start_day: crate::data::day_index(chrono::NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")),
            spec,
            xi_y: None,
            xi_x: None,
            sigma2_c: None,
            sigma2_alpha: None,
            sigma2_beta: None,
            lambda: None,
            missing_rate: 0.0,
            generator: Generator::Exceedance { station_threshold: 10.0, grid_threshold: 10.0, grid_exceed_prob: 0.2 },
            seed,
        }
    }

    /// Gaussian-generated counterpart of [`exceedance`](Self::exceedance).
    pub fn gaussian(n_sites: usize, n_days: usize, m: usize, seed: u64) -> Self {
        let mut s = Self::exceedance(n_sites, n_days, m, seed);
        s.spec.mu_d = vec![0.0; m];
        s.spec.kappa_d = 4.0;
        s.sigma2_alpha = Some(0.25);
        s.sigma2_beta = Some(0.01);
        s.sigma2_c = Some(0.05);
        s.generator = Generator::Gaussian { level: 0.0, sigma2_y: 4.0, sigma2_x: 4.0, quantile: 0.8 };
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.n_sites == 0 || self.n_cells == 0 {
            return Err(Error::Config("scenario needs at least one site and one cell".into()));
        }
        if self.n_days < 2 * self.spec.m {
            return Err(Error::Config(format!("n_days {} too short for m = {}", self.n_days, self.spec.m)));
        }
        if !(self.domain_km > 0.0) || !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("domain_km must be positive and missing_rate in [0, 1)".into()));
        }
        for xi in [self.xi_y, self.xi_x].into_iter().flatten() {
            if !(xi > -0.5 && xi < 0.5) {
                return Err(Error::Config(format!("true shape {xi} outside (-0.5, 0.5)")));
            }
        }
        match self.generator {
            Generator::Exceedance { station_threshold, grid_threshold, grid_exceed_prob } => {
                if !(station_threshold > 0.0 && grid_threshold > 0.0 && (0.0..=1.0).contains(&grid_exceed_prob)) {
                    return Err(Error::Config("thresholds must be positive, grid_exceed_prob in [0, 1]".into()));
                }
            }
            Generator::Gaussian { sigma2_y, sigma2_x, quantile, .. } => {
                if !(sigma2_y > 0.0 && sigma2_x > 0.0 && quantile > 0.0 && quantile < 1.0) {
                    return Err(Error::Config("Gaussian generator needs positive variances, quantile in (0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// True parameter values behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub site_ids: Vec<String>,
    pub site_cells: Vec<u64>,
    pub basis: BasisSpec,
    /// Parameters of the collocated sites, in site order.
    pub state: ParameterState,
    /// Coefficients of every cell's curve, by cell id order.
    pub cell_ids: Vec<u64>,
    pub cell_d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub stations: Vec<StationSeries>,
    pub grids: Vec<GridSeries>,
    pub pairs: Vec<CollocatedPair>,
    pub truth: Truth,
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn inverse_gamma(shape: f64, rate: f64, rng: &mut StreamRng) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("validated hyperparameters");
    1.0 / g.sample(rng)
}

/// Laplace draw restricted to (-0.5, 0.5) by rejection.
fn truncated_laplace(prior: &LaplacePrior, rng: &mut StreamRng) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let x = prior.location - prior.scale * u.signum() * (-2.0 * u.abs()).ln_1p();
        if x > -0.5 && x < 0.5 {
            return x;
        }
    }
}

/// Draw `N(mean, variance * corr)` over `locations`.
fn gp_draw(locations: &[Location], decay: f64, variance: f64, mean: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let cov: DMatrix<f64> = exp_covariance(&distance_matrix(locations), decay, variance)?;
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("simulation covariance not positive definite".into()))?
        .l();
    let z: Vec<f64> = (0..locations.len()).map(|_| normal(rng)).collect();
    Ok((0..locations.len()).map(|i| mean + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>()).collect())
}

/// Generate a dataset. The same scenario always gives the same output.
pub fn simulate(sc: &SyntheticScenario) -> Result<Simulation> {
    sc.validate()?;
    let spec = &sc.spec;
    let m = spec.m;
    let mut rng = stream(sc.seed, Purpose::Simulate, &[]);

    let side = (sc.n_cells as f64).sqrt().ceil() as usize;
    let h = sc.domain_km / side as f64;
    let cell_locs: Vec<Location> = (0..side * side)
        .map(|k| Location::new((k / side) as f64 * h + 0.5 * h, (k % side) as f64 * h + 0.5 * h))
        .collect();
    let cell_ids: Vec<u64> = (1..=cell_locs.len() as u64).collect();
    let site_locs: Vec<Location> = (0..sc.n_sites)
        .map(|_| Location::new(rng.gen::<f64>() * sc.domain_km, rng.gen::<f64>() * sc.domain_km))
        .collect();
    let site_ids: Vec<String> = (0..sc.n_sites).map(|i| format!("S{:02}", i + 1)).collect();
    let nearest = |loc: &Location| -> usize {
        (0..cell_locs.len())
            .min_by(|&a, &b| loc.distance_sq(&cell_locs[a]).total_cmp(&loc.distance_sq(&cell_locs[b])))
            .expect("at least one cell")
    };
    let site_cell: Vec<usize> = site_locs.iter().map(nearest).collect();

    let times: Vec<i64> = (0..sc.n_days as i64).map(|k| sc.start_day + k).collect();
    let basis = BasisSpec::new(m, times[0] as f64, *times.last().expect("n_days > 0") as f64)?;
    let rows = basis.rows(&times.iter().map(|&t| t as f64).collect::<Vec<_>>())?;

    // Parameters.
    let xi_y = sc.xi_y.unwrap_or_else(|| truncated_laplace(&spec.xi_y_prior, &mut rng));
    let xi_x = sc.xi_x.unwrap_or_else(|| truncated_laplace(&spec.xi_x_prior, &mut rng));
    let sigma2_c = sc.sigma2_c.unwrap_or_else(|| inverse_gamma(spec.a_c, spec.b_c, &mut rng));
    let sigma2_alpha = sc.sigma2_alpha.unwrap_or_else(|| inverse_gamma(spec.a_alpha, spec.b_alpha, &mut rng));
    let sigma2_beta = sc.sigma2_beta.unwrap_or_else(|| inverse_gamma(spec.a_beta, spec.b_beta, &mut rng));
    let mut alpha = vec![vec![0.0; m]; sc.n_sites];
    let mut beta = vec![vec![0.0; m]; sc.n_sites];
    for r in 0..m {
        let a = gp_draw(&site_locs, spec.phi_alpha, sigma2_alpha, 0.0, &mut rng)?;
        let b = gp_draw(&site_locs, spec.phi_beta, sigma2_beta, 1.0, &mut rng)?;
        for i in 0..sc.n_sites {
            alpha[i][r] = a[i];
            beta[i][r] = b[i];
        }
    }
    let (d_shift, gaussian) = match sc.generator {
        Generator::Gaussian { level, .. } => (level, true),
        Generator::Exceedance { .. } => (0.0, false),
    };
    let cell_d: Vec<Vec<f64>> = (0..cell_locs.len())
        .map(|_| (0..m).map(|r| d_shift + spec.mu_d[r] + spec.kappa_d.sqrt() * normal(&mut rng)).collect())
        .collect();
    let lambda: Vec<[f64; 4]> = (0..sc.n_sites)
        .map(|_| {
            sc.lambda.unwrap_or_else(|| {
                let mut l = [0.0; 4];
                for (k, v) in l.iter_mut().enumerate() {
                    *v = spec.mu_lambda[k] + spec.sigma2_lambda[k].sqrt() * normal(&mut rng);
                }
                l
            })
        })
        .collect();
    let d: Vec<Vec<f64>> = site_cell.iter().map(|&k| cell_d[k].clone()).collect();
    let c: Vec<Vec<f64>> = (0..sc.n_sites)
        .map(|i| (0..m).map(|r| alpha[i][r] + beta[i][r] * d[i][r] + sigma2_c.sqrt() * normal(&mut rng)).collect())
        .collect();

    // Grid series.
    let mut grids = Vec::with_capacity(cell_locs.len());
    for (k, loc) in cell_locs.iter().enumerate() {
        let values: Vec<f64> = match sc.generator {
            Generator::Exceedance { grid_threshold, grid_exceed_prob, .. } => rows
                .iter()
                .map(|row| {
                    if rng.gen::<f64>() < grid_exceed_prob {
                        let g = GpdParams { scale: row.dot(&cell_d[k]).exp(), shape: xi_x };
                        grid_threshold + gpd_sample(&g, &mut rng).max(f64::MIN_POSITIVE)
                    } else {
                        rng.gen::<f64>() * grid_threshold
                    }
                })
                .collect(),
            Generator::Gaussian { sigma2_x, .. } => {
                rows.iter().map(|row| row.dot(&cell_d[k]) + sigma2_x.sqrt() * normal(&mut rng)).collect()
            }
        };
        let u = match sc.generator {
            Generator::Exceedance { grid_threshold, .. } => grid_threshold,
            Generator::Gaussian { quantile, .. } => crate::numeric::quantile(&values, quantile),
        };
        grids.push(GridSeries::new(cell_ids[k], *loc, times.clone(), values, u)?);
    }

    // Station series.
    let mut stations = Vec::with_capacity(sc.n_sites);
    for i in 0..sc.n_sites {
        let grid = &grids[site_cell[i]];
        let w = grid.covariate_rows(&times);
        let mut values: Vec<Option<f64>> = Vec::with_capacity(times.len());
        for (row, wt) in rows.iter().zip(&w) {
            let v = match sc.generator {
                Generator::Exceedance { station_threshold, .. } => {
                    let eta: f64 = wt.iter().zip(&lambda[i]).map(|(a, b)| a * b).sum();
                    let p = DeltaGpdParams {
                        gpd: GpdParams { scale: row.dot(&c[i]).exp(), shape: xi_y },
                        exceed_prob: logistic(eta),
                    };
                    let z = dgpd_sample(&p, &mut rng);
                    let fill = rng.gen::<f64>() * station_threshold;
                    if z > 0.0 {
                        station_threshold + z
                    } else {
                        fill
                    }
                }
                Generator::Gaussian { sigma2_y, .. } => row.dot(&c[i]) + sigma2_y.sqrt() * normal(&mut rng),
            };
            let missing = sc.missing_rate > 0.0 && rng.gen::<f64>() < sc.missing_rate;
            values.push((!missing).then_some(v));
        }
        let u = match sc.generator {
            Generator::Exceedance { station_threshold, .. } => station_threshold,
            Generator::Gaussian { quantile, .. } => {
                let present: Vec<f64> = values.iter().flatten().copied().collect();
                crate::numeric::quantile(&present, quantile)
            }
        };
        stations.push(StationSeries::new(site_ids[i].clone(), site_locs[i], times.clone(), values, u)?);
    }
    let pairs = collocate(&stations, &grids)?;
    if gaussian {
        log::debug!("simulated Gaussian-generated dataset with {} sites", sc.n_sites);
    }
    let truth = Truth {
        site_ids,
        site_cells: site_cell.iter().map(|&k| cell_ids[k]).collect(),
        basis,
        state: ParameterState { c, d, alpha, beta, lambda, xi_y, xi_x, sigma2_c, sigma2_alpha, sigma2_beta },
        cell_ids,
        cell_d,
    };
    Ok(Simulation { stations, grids, pairs, truth })
}
