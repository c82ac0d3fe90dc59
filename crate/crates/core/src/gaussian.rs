//! The Gaussian fusion baseline: the same basis and spatial layers as the
//! exceedance model, but Gaussian likelihoods on the raw (uncensored) series.
//! Every full conditional is Gaussian or inverse-gamma, so it is sampled by
//! Gibbs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveHeader, McmcConfig, ModelKind, PosteriorArchive, FORMAT_VERSION};
use crate::basis::{least_squares, BasisRow, BasisSpec};
use crate::data::{CollocatedPair, Location};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamLayout, ParameterState};
use crate::par;
use crate::posterior::{data_domain, SiteMeta};
use crate::rng::{stream, Purpose, StreamRng};
use crate::spatial::GpFactor;

/// One point of the Gaussian baseline's parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub sigma2_y: f64,
    pub sigma2_x: f64,
    pub sigma2_c: f64,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
}

impl GaussianState {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for rows in [&self.c, &self.d, &self.alpha, &self.beta] {
            for r in rows {
                out.extend_from_slice(r);
            }
        }
        out.extend_from_slice(&[self.sigma2_y, self.sigma2_x, self.sigma2_c, self.sigma2_alpha, self.sigma2_beta]);
        out
    }

    pub fn unflatten(flat: &[f64], n: usize, m: usize) -> Result<Self> {
        if flat.len() != ParamLayout::gaussian(n, m).dim() {
            return Err(Error::Input("flattened Gaussian state has the wrong length".into()));
        }
        let nm = n * m;
        let rows = |k: usize| (0..n).map(|i| flat[k * nm + i * m..k * nm + (i + 1) * m].to_vec()).collect();
        let t = &flat[4 * nm..];
        Ok(Self {
            c: rows(0),
            d: rows(1),
            alpha: rows(2),
            beta: rows(3),
            sigma2_y: t[0],
            sigma2_x: t[1],
            sigma2_c: t[2],
            sigma2_alpha: t[3],
            sigma2_beta: t[4],
        })
    }
}

/// Normal–inverse-gamma update: shape and rate of the inverse-gamma full
/// conditional of a variance with prior IG(`a`, `b`) given residuals.
pub fn sigma2_conditional(a: f64, b: f64, residuals: &[f64]) -> (f64, f64) {
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    (a + 0.5 * residuals.len() as f64, b + 0.5 * ss)
}

/// Sufficient statistics of one site's raw series against the shared basis.
#[derive(Debug, Clone)]
pub struct GaussianSite {
    pub id: String,
    pub location: Location,
    pub cell_id: u64,
    pub threshold: f64,
    pub y_rows: Vec<(BasisRow, f64)>,
    pub x_rows: Vec<(BasisRow, f64)>,
    pub phi_tphi: DMatrix<f64>,
    pub phi_ty: DVector<f64>,
    pub psi_tpsi: DMatrix<f64>,
    pub psi_tx: DVector<f64>,
}

/// `(A'A, A'v)` for a sparse basis design.
pub fn normal_equations(rows: &[(BasisRow, f64)], m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut ata = DMatrix::zeros(m, m);
    let mut atv = DVector::zeros(m);
    for (r, v) in rows {
        for a in 0..4 {
            let ia = r.first + a;
            atv[ia] += r.w[a] * v;
            for b in 0..4 {
                ata[(ia, r.first + b)] += r.w[a] * r.w[b];
            }
        }
    }
    (ata, atv)
}

#[derive(Debug, Clone)]
pub struct GaussianData {
    pub sites: Vec<GaussianSite>,
    pub basis: BasisSpec,
    pub gp_alpha: GpFactor,
    pub gp_beta: GpFactor,
    prec_alpha: DMatrix<f64>,
    prec_beta: DMatrix<f64>,
}

impl GaussianData {
    pub fn new(pairs: &[CollocatedPair], spec: &ModelSpec, domain: Option<(f64, f64)>) -> Result<Self> {
        spec.validate()?;
        if pairs.is_empty() {
            return Err(Error::Input("no collocated sites to fit".into()));
        }
        let (lo, hi) = match domain {
            Some(d) => d,
            None => data_domain(pairs).ok_or_else(|| Error::Input("no timestamps in data".into()))?,
        };
        let basis = BasisSpec::new(spec.m, lo, hi)?;
        let m = spec.m;
        let mut sites = Vec::with_capacity(pairs.len());
        for p in pairs {
            let y_rows: Vec<(BasisRow, f64)> = p
                .station
                .timestamps
                .iter()
                .zip(&p.station.values)
                .filter_map(|(t, v)| v.map(|v| (*t, v)))
                .map(|(t, v)| Ok((basis.row(t as f64)?, v)))
                .collect::<Result<_>>()?;
            let x_rows: Vec<(BasisRow, f64)> = p
                .grid
                .timestamps
                .iter()
                .zip(&p.grid.values)
                .map(|(t, v)| Ok((basis.row(*t as f64)?, *v)))
                .collect::<Result<_>>()?;
            let (phi_tphi, phi_ty) = normal_equations(&y_rows, m);
            let (psi_tpsi, psi_tx) = normal_equations(&x_rows, m);
            sites.push(GaussianSite {
                id: p.station.id.clone(),
                location: p.station.location,
                cell_id: p.grid.cell_id,
                threshold: p.station.threshold,
                y_rows,
                x_rows,
                phi_tphi,
                phi_ty,
                psi_tpsi,
                psi_tx,
            });
        }
        let locs: Vec<Location> = sites.iter().map(|s| s.location).collect();
        let gp_alpha = GpFactor::new(&locs, spec.phi_alpha)?;
        let gp_beta = GpFactor::new(&locs, spec.phi_beta)?;
        let prec_alpha = gp_alpha.precision();
        let prec_beta = gp_beta.precision();
        Ok(Self { sites, basis, gp_alpha, gp_beta, prec_alpha, prec_beta })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site_meta(&self) -> Vec<SiteMeta> {
        self.sites
            .iter()
            .map(|s| SiteMeta { id: s.id.clone(), location: s.location, cell_id: s.cell_id, threshold: s.threshold })
            .collect()
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn inverse_gamma(shape: f64, rate: f64, rng: &mut StreamRng) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive shape and rate");
    1.0 / g.sample(rng)
}

/// Draw from `N(P^{-1} b, P^{-1})` for a symmetric positive-definite `P`.
pub fn draw_canonical(p: DMatrix<f64>, b: &DVector<f64>, rng: &mut StreamRng) -> Result<DVector<f64>> {
    let n = b.len();
    let chol = p.cholesky().ok_or_else(|| Error::Numerical("conditional precision not positive definite".into()))?;
    let mean = chol.solve(b);
    let z = DVector::from_iterator(n, (0..n).map(|_| normal(rng)));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(mean + noise)
}

fn residuals(rows: &[(BasisRow, f64)], coef: &[f64]) -> Vec<f64> {
    rows.iter().map(|(b, v)| v - b.dot(coef)).collect()
}

/// One Gibbs sweep.
pub fn gibbs_sweep(state: &mut GaussianState, data: &GaussianData, spec: &ModelSpec, rng: &mut StreamRng) -> Result<()> {
    let n = data.n_sites();
    let m = data.basis.m;
    let eye = DMatrix::<f64>::identity(m, m);
    for (i, site) in data.sites.iter().enumerate() {
        // c_i
        let mut p = &site.phi_tphi / state.sigma2_y + &eye / state.sigma2_c;
        let mut b = &site.phi_ty / state.sigma2_y;
        for r in 0..m {
            b[r] += (state.alpha[i][r] + state.beta[i][r] * state.d[i][r]) / state.sigma2_c;
        }
        state.c[i] = draw_canonical(p, &b, rng)?.iter().copied().collect();
        // d_i
        p = &site.psi_tpsi / state.sigma2_x + &eye / spec.kappa_d;
        b = &site.psi_tx / state.sigma2_x;
        for r in 0..m {
            let beta = state.beta[i][r];
            p[(r, r)] += beta * beta / state.sigma2_c;
            b[r] += beta * (state.c[i][r] - state.alpha[i][r]) / state.sigma2_c + spec.mu_d[r] / spec.kappa_d;
        }
        state.d[i] = draw_canonical(p, &b, rng)?.iter().copied().collect();
    }
    let eye_n = DMatrix::<f64>::identity(n, n);
    for r in 0..m {
        let p = &data.prec_alpha / state.sigma2_alpha + &eye_n / state.sigma2_c;
        let b = DVector::from_iterator(
            n,
            (0..n).map(|i| (state.c[i][r] - state.beta[i][r] * state.d[i][r]) / state.sigma2_c),
        );
        let a = draw_canonical(p, &b, rng)?;
        for i in 0..n {
            state.alpha[i][r] = a[i];
        }
        let mut p = &data.prec_beta / state.sigma2_beta;
        let ones = DVector::from_element(n, 1.0);
        let mut b = (&data.prec_beta * ones) / state.sigma2_beta;
        for i in 0..n {
            let d = state.d[i][r];
            p[(i, i)] += d * d / state.sigma2_c;
            b[i] += d * (state.c[i][r] - state.alpha[i][r]) / state.sigma2_c;
        }
        let bt = draw_canonical(p, &b, rng)?;
        for i in 0..n {
            state.beta[i][r] = bt[i];
        }
    }
    let ry: Vec<f64> = data.sites.iter().enumerate().flat_map(|(i, s)| residuals(&s.y_rows, &state.c[i])).collect();
    let (a, b) = sigma2_conditional(spec.a_obs, spec.b_obs, &ry);
    state.sigma2_y = inverse_gamma(a, b, rng);
    let rx: Vec<f64> = data.sites.iter().enumerate().flat_map(|(i, s)| residuals(&s.x_rows, &state.d[i])).collect();
    let (a, b) = sigma2_conditional(spec.a_obs, spec.b_obs, &rx);
    state.sigma2_x = inverse_gamma(a, b, rng);
    let rc: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |r| (i, r)))
        .map(|(i, r)| state.c[i][r] - state.alpha[i][r] - state.beta[i][r] * state.d[i][r])
        .collect();
    let (a, b) = sigma2_conditional(spec.a_c, spec.b_c, &rc);
    state.sigma2_c = inverse_gamma(a, b, rng);
    let mut qa = 0.0;
    let mut qb = 0.0;
    for r in 0..m {
        qa += data.gp_alpha.quad_form(&ParameterState::column(&state.alpha, r));
        let centred: Vec<f64> = state.beta.iter().map(|row| row[r] - 1.0).collect();
        qb += data.gp_beta.quad_form(&centred);
    }
    let count = 0.5 * (n * m) as f64;
    state.sigma2_alpha = inverse_gamma(spec.a_alpha + count, spec.b_alpha + 0.5 * qa, rng);
    state.sigma2_beta = inverse_gamma(spec.a_beta + count, spec.b_beta + 0.5 * qb, rng);
    Ok(())
}

/// Least-squares curves, `alpha = 0`, `beta = 1`, unit variances.
pub fn gaussian_initial_state(data: &GaussianData) -> Result<GaussianState> {
    let m = data.basis.m;
    let n = data.n_sites();
    let mut c = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for s in &data.sites {
        let (rows, vals): (Vec<BasisRow>, Vec<f64>) = s.y_rows.iter().copied().unzip();
        c.push(least_squares(&rows, &vals, m, 1e-6)?);
        let (rows, vals): (Vec<BasisRow>, Vec<f64>) = s.x_rows.iter().copied().unzip();
        d.push(least_squares(&rows, &vals, m, 1e-6)?);
    }
    Ok(GaussianState {
        c,
        d,
        alpha: vec![vec![0.0; m]; n],
        beta: vec![vec![1.0; m]; n],
        sigma2_y: 1.0,
        sigma2_x: 1.0,
        sigma2_c: 1.0,
        sigma2_alpha: 1.0,
        sigma2_beta: 1.0,
    })
}

/// Fit the Gaussian baseline to raw series.
pub fn fit_gaussian(pairs: &[CollocatedPair], spec: &ModelSpec, cfg: &McmcConfig) -> Result<PosteriorArchive> {
    cfg.validate()?;
    let data = GaussianData::new(pairs, spec, None)?;
    fit_gaussian_data(&data, spec, cfg)
}

pub fn fit_gaussian_data(data: &GaussianData, spec: &ModelSpec, cfg: &McmcConfig) -> Result<PosteriorArchive> {
    cfg.validate()?;
    let base = gaussian_initial_state(data)?;
    let outputs: Vec<Result<Vec<f64>>> = par::map_range(cfg.n_chains, |c| {
        let mut init = stream(cfg.seed, Purpose::Init, &[c as u64]);
        let mut state = base.clone();
        for rows in [&mut state.c, &mut state.d] {
            for row in rows.iter_mut() {
                for v in row.iter_mut() {
                    *v += 0.1 * normal(&mut init);
                }
            }
        }
        let mut rng = stream(cfg.seed, Purpose::Chain, &[c as u64]);
        let mut draws = Vec::with_capacity(cfg.draws_per_chain() * ParamLayout::gaussian(data.n_sites(), data.basis.m).dim());
        for it in 0..cfg.n_iter {
            gibbs_sweep(&mut state, data, spec, &mut rng)?;
            if it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0 {
                draws.extend(state.flatten());
            }
        }
        Ok(draws)
    });
    let chains = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        model: ModelKind::Gaussian,
        spec: spec.clone(),
        basis: data.basis,
        sites: data.site_meta(),
        layout: ParamLayout::gaussian(data.n_sites(), data.basis.m),
        mcmc: *cfg,
        draws_per_chain: cfg.draws_per_chain(),
        acceptance: Vec::new(),
        warnings: Vec::new(),
    };
    let archive = PosteriorArchive { header, chains };
    archive.validate()?;
    Ok(archive)
}
