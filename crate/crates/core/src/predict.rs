//! Posterior prediction at unmonitored locations, in-sample predictive
//! replicates at fitted stations, and grid surfaces of predictive summaries.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::{ModelKind, PosteriorArchive};
use crate::basis::{BasisRow, BasisSpec};
use crate::data::{nearest_centroid, CollocatedPair, GridSeries, Location};
use crate::error::{Error, Result};
use crate::extremes::{dgpd_sample, logistic, DeltaGpdParams, GpdParams};
use crate::gaussian::{draw_canonical, normal_equations, GaussianState};
use crate::model::ParameterState;
use crate::numeric::quantile_sorted;
use crate::par;
use crate::posterior::fit_log_scale;
use crate::rng::{child_seed, stream, Purpose, StreamRng};
use crate::spatial::{GpFactor, Kriging};

/// Distance below which a target coincides with a fitted station.
const SAME_PLACE_KM: f64 = 1e-9;
/// Grid on which the grid-side shape is rounded before refitting a cell's curve.
const SHAPE_GRID: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Number of posterior draws pushed through the predictive.
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { n_draws: 1000, seed: 1 }
    }
}

/// Predictive replicates of the exceedance series at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub location: Location,
    pub cell_id: u64,
    pub timestamps: Vec<i64>,
    pub n_draws: usize,
    /// Row-major `n_draws x timestamps.len()`; zero means no exceedance.
    pub values: Vec<f64>,
    /// Predictive probability of an exceedance at each timestamp.
    pub exceed_prob: Vec<f64>,
}

impl PredictiveDraws {
    pub fn n_times(&self) -> usize {
        self.timestamps.len()
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        let t = self.n_times();
        &self.values[k * t..(k + 1) * t]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.n_draws).map(|k| self.values[k * self.n_times() + t]).collect()
    }

    /// Predictive mean at each timestamp.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.n_times()).map(|t| crate::numeric::mean(&self.column(t))).collect()
    }

    /// Pointwise central interval with probability `level`.
    pub fn interval(&self, level: f64) -> Vec<(f64, f64)> {
        let a = 0.5 * (1.0 - level);
        (0..self.n_times())
            .map(|t| {
                let mut c = self.column(t);
                c.sort_by(f64::total_cmp);
                (quantile_sorted(&c, a), quantile_sorted(&c, 1.0 - a))
            })
            .collect()
    }

    /// All strictly positive predictive values.
    pub fn positive_values(&self) -> Vec<f64> {
        self.values.iter().copied().filter(|v| *v > 0.0).collect()
    }
}

/// Evenly spaced indices into the pooled draws (cycling if more are asked for).
pub fn select_draws(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| if n <= total { k * total / n } else { k % total }).collect()
}

/// Spatial quantities shared by all draws at one target.
struct Target<'g> {
    location: Location,
    cell: &'g GridSeries,
    /// Fitted site at the same place, if any.
    same_site: Option<usize>,
    /// First fitted site collocated with the same cell, if any.
    cell_site: Option<usize>,
    kr_alpha: Kriging,
    kr_beta: Kriging,
    idw: Vec<f64>,
    times: Vec<i64>,
    rows: Vec<BasisRow>,
}

fn build_target<'g>(
    archive: &PosteriorArchive,
    location: Location,
    grids: &'g [GridSeries],
    timestamps: Option<&[i64]>,
) -> Result<Target<'g>> {
    if grids.is_empty() {
        return Err(Error::Input("no grid cells supplied for prediction".into()));
    }
    let h = &archive.header;
    let cell_id = nearest_centroid(&location, grids)?;
    let cell = grids.iter().find(|g| g.cell_id == cell_id).expect("id from the same slice");
    let basis = &h.basis;
    let times: Vec<i64> = match timestamps {
        Some(ts) => {
            if let Some(t) = ts.iter().find(|&&t| !basis.contains(t as f64)) {
                return Err(Error::Input(format!(
                    "prediction day {} lies outside the fitted basis domain [{}, {}]",
                    crate::data::date_of(*t),
                    crate::data::date_of(basis.t_min as i64),
                    crate::data::date_of(basis.t_max as i64)
                )));
            }
            ts.to_vec()
        }
        None => cell.timestamps.iter().copied().filter(|&t| basis.contains(t as f64)).collect(),
    };
    if times.is_empty() {
        return Err(Error::Input(format!("cell {cell_id} has no days inside the fitted basis domain")));
    }
    let rows = basis.rows(&times.iter().map(|&t| t as f64).collect::<Vec<_>>())?;
    let locs: Vec<Location> = h.sites.iter().map(|s| s.location).collect();
    let gp_alpha = GpFactor::new(&locs, h.spec.phi_alpha)?;
    let gp_beta = GpFactor::new(&locs, h.spec.phi_beta)?;
    let same_site = locs.iter().position(|l| l.distance(&location) < SAME_PLACE_KM);
    let cell_site = h.sites.iter().position(|s| s.cell_id == cell_id);
    let idw = match same_site {
        Some(i) => (0..locs.len()).map(|k| if k == i { 1.0 } else { 0.0 }).collect(),
        None => {
            let w: Vec<f64> = locs.iter().map(|l| 1.0 / l.distance_sq(&location)).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        }
    };
    Ok(Target {
        location,
        cell,
        same_site,
        cell_site,
        kr_alpha: gp_alpha.krige(&location),
        kr_beta: gp_beta.krige(&location),
        idw,
        times,
        rows,
    })
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Coefficients of the target's station curve for one draw, given `d0`.
#[allow(clippy::too_many_arguments)]
fn target_c(
    tg: &Target,
    alpha: &[Vec<f64>],
    beta: &[Vec<f64>],
    d0: &[f64],
    s2_alpha: f64,
    s2_beta: f64,
    s2_c: f64,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let m = d0.len();
    (0..m)
        .map(|r| {
            let a_col = ParameterState::column(alpha, r);
            let b_col = ParameterState::column(beta, r);
            let a0 = tg.kr_alpha.conditional_mean(&a_col, 0.0) + (s2_alpha * tg.kr_alpha.residual).sqrt() * normal(rng);
            let b0 = tg.kr_beta.conditional_mean(&b_col, 1.0) + (s2_beta * tg.kr_beta.residual).sqrt() * normal(rng);
            a0 + b0 * d0[r] + s2_c.sqrt() * normal(rng)
        })
        .collect()
}

/// Grid-side exceedance rows of a cell that fall inside the basis domain.
fn cell_exceedance_rows(cell: &GridSeries, basis: &BasisSpec) -> Vec<(BasisRow, f64)> {
    cell.timestamps
        .iter()
        .zip(&cell.censored)
        .filter(|(t, v)| **v > 0.0 && basis.contains(**t as f64))
        .map(|(t, v)| (basis.row(*t as f64).expect("inside domain"), *v))
        .collect()
}

/// Posterior-mode curves of a cell for every rounded grid-side shape in
/// `shapes`, fitted in ascending order with warm starts.
fn cell_curves(
    archive: &PosteriorArchive,
    cell: &GridSeries,
    shapes: impl Iterator<Item = f64>,
) -> Result<BTreeMap<i64, Vec<f64>>> {
    let h = &archive.header;
    let rows = cell_exceedance_rows(cell, &h.basis);
    let keys: std::collections::BTreeSet<i64> = shapes.map(|xi| (xi / SHAPE_GRID).round() as i64).collect();
    let mut out = BTreeMap::new();
    let mut warm: Option<Vec<f64>> = None;
    for key in keys {
        let xi = key as f64 * SHAPE_GRID;
        let coef = fit_log_scale(&rows, h.basis.m, xi, &h.spec.mu_d, h.spec.kappa_d, warm.as_deref())?;
        warm = Some(coef.clone());
        out.insert(key, coef);
    }
    Ok(out)
}

fn assemble(tg: &Target, n_draws: usize, rows: Vec<(Vec<f64>, Vec<f64>)>) -> PredictiveDraws {
    let nt = tg.times.len();
    let mut values = Vec::with_capacity(n_draws * nt);
    let mut prob = vec![0.0; nt];
    for (v, p) in &rows {
        values.extend_from_slice(v);
        for (acc, x) in prob.iter_mut().zip(p) {
            *acc += x;
        }
    }
    for p in &mut prob {
        *p /= n_draws as f64;
    }
    PredictiveDraws {
        location: tg.location,
        cell_id: tg.cell.cell_id,
        timestamps: tg.times.clone(),
        n_draws,
        values,
        exceed_prob: prob,
    }
}

/// Predictive exceedances at `location` from an exceedance-model archive.
/// Days default to the nearest cell's record inside the basis domain.
pub fn predict(
    archive: &PosteriorArchive,
    location: Location,
    grids: &[GridSeries],
    timestamps: Option<&[i64]>,
    cfg: &PredictConfig,
) -> Result<PredictiveDraws> {
    if archive.header.model != ModelKind::Exceedance {
        return Err(Error::Input("archive holds a Gaussian-baseline fit; use predict_gaussian".into()));
    }
    if cfg.n_draws == 0 || archive.total_draws() == 0 {
        return Err(Error::Input("prediction needs at least one draw".into()));
    }
    let tg = build_target(archive, location, grids, timestamps)?;
    let (n, m) = (archive.header.layout.n_sites, archive.header.layout.m);
    let picks = select_draws(archive.total_draws(), cfg.n_draws);
    let xi_x_index = archive.group_range(crate::model::ParamGroup::XiX).expect("layout").start;
    let curves = match tg.cell_site {
        Some(_) => BTreeMap::new(),
        None => cell_curves(archive, tg.cell, picks.iter().map(|&k| archive.pooled(k)[xi_x_index]))?,
    };
    let w0 = tg.cell.covariate_rows(&tg.times);
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = par::map_range(picks.len(), |k| {
        let s = ParameterState::unflatten(archive.pooled(picks[k]), n, m)?;
        let mut rng = stream(cfg.seed, Purpose::Predict, &[k as u64]);
        let (c0, lambda0) = match tg.same_site {
            Some(i) => (s.c[i].clone(), s.lambda[i]),
            None => {
                let d0 = match tg.cell_site {
                    Some(i) => s.d[i].clone(),
                    None => curves[&((s.xi_x / SHAPE_GRID).round() as i64)].clone(),
                };
                let c0 = target_c(&tg, &s.alpha, &s.beta, &d0, s.sigma2_alpha, s.sigma2_beta, s.sigma2_c, &mut rng);
                let mut l0 = [0.0; 4];
                for (i, w) in tg.idw.iter().enumerate() {
                    for l in 0..4 {
                        l0[l] += w * s.lambda[i][l];
                    }
                }
                (c0, l0)
            }
        };
        let mut vals = Vec::with_capacity(tg.times.len());
        let mut probs = Vec::with_capacity(tg.times.len());
        for (row, w) in tg.rows.iter().zip(&w0) {
            let p = logistic(w.iter().zip(&lambda0).map(|(a, b)| a * b).sum());
            let params = DeltaGpdParams { gpd: GpdParams { scale: row.dot(&c0).exp(), shape: s.xi_y }, exceed_prob: p };
            vals.push(dgpd_sample(&params, &mut rng));
            probs.push(p);
        }
        Ok((vals, probs))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble(&tg, picks.len(), rows))
}

/// Posterior predictive replicates of a fitted station's censored series on
/// its observed days.
pub fn predict_fitted_site(
    archive: &PosteriorArchive,
    site: usize,
    pair: &CollocatedPair,
    cfg: &PredictConfig,
) -> Result<PredictiveDraws> {
    let h = &archive.header;
    if h.model != ModelKind::Exceedance {
        return Err(Error::Input("in-sample replicates need an exceedance-model archive".into()));
    }
    if site >= h.sites.len() || h.sites[site].id != pair.station.id {
        return Err(Error::Input(format!("station {} is not fitted site {site}", pair.station.id)));
    }
    let (n, m) = (h.layout.n_sites, h.layout.m);
    let obs: Vec<(i64, [f64; 4])> = pair
        .station
        .timestamps
        .iter()
        .zip(&pair.station.censored)
        .zip(&pair.w)
        .filter(|((_, c), _)| c.is_some())
        .map(|((t, _), w)| (*t, *w))
        .collect();
    let times: Vec<i64> = obs.iter().map(|o| o.0).collect();
    let rows = h.basis.rows(&times.iter().map(|&t| t as f64).collect::<Vec<_>>())?;
    let picks = select_draws(archive.total_draws(), cfg.n_draws);
    let out: Vec<Result<(Vec<f64>, Vec<f64>)>> = par::map_range(picks.len(), |k| {
        let s = ParameterState::unflatten(archive.pooled(picks[k]), n, m)?;
        let mut rng = stream(cfg.seed, Purpose::Predict, &[k as u64]);
        let mut vals = Vec::with_capacity(times.len());
        let mut probs = Vec::with_capacity(times.len());
        for (row, (_, w)) in rows.iter().zip(&obs) {
            let p = logistic(w.iter().zip(&s.lambda[site]).map(|(a, b)| a * b).sum());
            let params = DeltaGpdParams { gpd: GpdParams { scale: row.dot(&s.c[site]).exp(), shape: s.xi_y }, exceed_prob: p };
            vals.push(dgpd_sample(&params, &mut rng));
            probs.push(p);
        }
        Ok((vals, probs))
    });
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let nt = times.len();
    let mut values = Vec::with_capacity(picks.len() * nt);
    let mut prob = vec![0.0; nt];
    for (v, p) in &out {
        values.extend_from_slice(v);
        for (a, x) in prob.iter_mut().zip(p) {
            *a += x / picks.len() as f64;
        }
    }
    Ok(PredictiveDraws {
        location: pair.station.location,
        cell_id: pair.grid.cell_id,
        timestamps: times,
        n_draws: picks.len(),
        values,
        exceed_prob: prob,
    })
}

/// Predictive exceedances at `location` from a Gaussian-baseline archive:
/// raw predictive draws minus `threshold`, floored at zero. Without a
/// threshold the inverse-distance-squared average of the fitted sites'
/// thresholds is used.
pub fn predict_gaussian(
    archive: &PosteriorArchive,
    location: Location,
    grids: &[GridSeries],
    timestamps: Option<&[i64]>,
    threshold: Option<f64>,
    cfg: &PredictConfig,
) -> Result<PredictiveDraws> {
    let h = &archive.header;
    if h.model != ModelKind::Gaussian {
        return Err(Error::Input("archive holds an exceedance-model fit; use predict".into()));
    }
    if cfg.n_draws == 0 || archive.total_draws() == 0 {
        return Err(Error::Input("prediction needs at least one draw".into()));
    }
    let tg = build_target(archive, location, grids, timestamps)?;
    let u = threshold.unwrap_or_else(|| tg.idw.iter().zip(&h.sites).map(|(w, s)| w * s.threshold).sum());
    let (n, m) = (h.layout.n_sites, h.layout.m);
    let x_rows: Vec<(BasisRow, f64)> = tg
        .cell
        .timestamps
        .iter()
        .zip(&tg.cell.values)
        .filter(|(t, _)| h.basis.contains(**t as f64))
        .map(|(t, v)| (h.basis.row(*t as f64).expect("inside domain"), *v))
        .collect();
    let (psi_tpsi, psi_tx) = normal_equations(&x_rows, m);
    let picks = select_draws(archive.total_draws(), cfg.n_draws);
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = par::map_range(picks.len(), |k| {
        let s = GaussianState::unflatten(archive.pooled(picks[k]), n, m)?;
        let mut rng = stream(cfg.seed, Purpose::Predict, &[k as u64]);
        let c0 = match tg.same_site {
            Some(i) => s.c[i].clone(),
            None => {
                let d0: Vec<f64> = match tg.cell_site {
                    Some(i) => s.d[i].clone(),
                    None => {
                        let mut p: DMatrix<f64> = &psi_tpsi / s.sigma2_x;
                        let mut b: DVector<f64> = &psi_tx / s.sigma2_x;
                        for r in 0..m {
                            p[(r, r)] += 1.0 / h.spec.kappa_d;
                            b[r] += h.spec.mu_d[r] / h.spec.kappa_d;
                        }
                        draw_canonical(p, &b, &mut rng)?.iter().copied().collect()
                    }
                };
                target_c(&tg, &s.alpha, &s.beta, &d0, s.sigma2_alpha, s.sigma2_beta, s.sigma2_c, &mut rng)
            }
        };
        let sd = s.sigma2_y.sqrt();
        let vals: Vec<f64> = tg.rows.iter().map(|row| (row.dot(&c0) + sd * normal(&mut rng) - u).max(0.0)).collect();
        let probs = vals.iter().map(|v| f64::from(u8::from(*v > 0.0))).collect();
        Ok((vals, probs))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble(&tg, picks.len(), rows))
}

/// Dispatch on the archive's model kind.
pub fn predict_any(
    archive: &PosteriorArchive,
    location: Location,
    grids: &[GridSeries],
    timestamps: Option<&[i64]>,
    threshold: Option<f64>,
    cfg: &PredictConfig,
) -> Result<PredictiveDraws> {
    match archive.header.model {
        ModelKind::Exceedance => predict(archive, location, grids, timestamps, cfg),
        ModelKind::Gaussian => predict_gaussian(archive, location, grids, timestamps, threshold, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceStat {
    /// Mean of strictly positive predictive exceedances.
    ExpectedShortfall,
    /// Max minus min of strictly positive predictive exceedances.
    ExceedanceRange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceCell {
    pub cell_id: u64,
    pub location: Location,
    /// Missing when no predictive exceedance occurred.
    pub value: Option<f64>,
}

/// Summary of positive values; `None` when there are none.
pub fn surface_value(values: &[f64], stat: SurfaceStat) -> Option<f64> {
    let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if pos.is_empty() {
        return None;
    }
    Some(match stat {
        SurfaceStat::ExpectedShortfall => crate::numeric::mean(&pos),
        SurfaceStat::ExceedanceRange => {
            let (lo, hi) = pos.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            hi - lo
        }
    })
}

/// Predict at every cell centroid and summarise. Cells are processed
/// independently with their own random streams.
pub fn shortfall_surface(
    archive: &PosteriorArchive,
    grids: &[GridSeries],
    stat: SurfaceStat,
    cfg: &PredictConfig,
) -> Result<Vec<SurfaceCell>> {
    let mut order: Vec<&GridSeries> = grids.iter().collect();
    order.sort_by_key(|g| g.cell_id);
    let out: Vec<Result<SurfaceCell>> = par::map_slice(&order, |cell| {
        let cell_cfg = PredictConfig { n_draws: cfg.n_draws, seed: child_seed(cfg.seed, Purpose::Predict, &[cell.cell_id]) };
        let basis = &archive.header.basis;
        let value = if cell.timestamps.iter().any(|&t| basis.contains(t as f64)) {
            let p = predict_any(archive, cell.location, grids, None, None, &cell_cfg)?;
            surface_value(&p.values, stat)
        } else {
            log::warn!("cell {} has no days inside the fitted period; value left missing", cell.cell_id);
            None
        };
        Ok(SurfaceCell { cell_id: cell.cell_id, location: cell.location, value })
    });
    out.into_iter().collect()
}
