//! Frequentist pre-fit of the spatial decay rates.
//!
//! Each site gets an ordinary least-squares line `y* = a + b x*`; exponential
//! variograms fitted to the intercepts and slopes give the decay rates that
//! stay fixed during sampling.

use serde::{Deserialize, Serialize};

use crate::data::{CollocatedPair, Location};
use crate::error::{Error, Result};
use crate::numeric::log_grid_min;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariogramConfig {
    pub n_bins: usize,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self { n_bins: 8, phi_min: 1e-3, phi_max: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariogramBin {
    pub distance: f64,
    pub semivariance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariogramFit {
    pub decay: f64,
    pub sill: f64,
    pub bins: Vec<VariogramBin>,
    /// The estimate sits on a search bound (typically: no spatial structure).
    pub at_bound: bool,
}

impl VariogramFit {
    pub fn model(&self, h: f64) -> f64 {
        self.sill * (1.0 - (-self.decay * h).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayPrefit {
    pub alpha: VariogramFit,
    pub beta: VariogramFit,
    /// Sites whose regression was singular.
    pub skipped: Vec<String>,
}

impl DecayPrefit {
    pub fn decays(&self) -> (f64, f64) {
        (self.alpha.decay, self.beta.decay)
    }
}

/// OLS intercept and slope of `y` on `x`; `None` when `x` is constant.
pub fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 1e-12 * (1.0 + mx * mx) * n as f64) {
        return None;
    }
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// Equal-count binned semivariogram of `values` observed at `locations`.
pub fn empirical_semivariogram(locations: &[Location], values: &[f64], n_bins: usize) -> Vec<VariogramBin> {
    let n = locations.len();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            let d = values[i] - values[j];
            pairs.push((locations[i].distance(&locations[j]), 0.5 * d * d));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total = pairs.len();
    let n_bins = n_bins.max(1);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for k in 0..n_bins {
        let size = total / n_bins + usize::from(k < total % n_bins);
        if size == 0 {
            continue;
        }
        let chunk = &pairs[start..start + size];
        start += size;
        bins.push(VariogramBin {
            distance: chunk.iter().map(|p| p.0).sum::<f64>() / size as f64,
            semivariance: chunk.iter().map(|p| p.1).sum::<f64>() / size as f64,
            count: size,
        });
    }
    bins
}

/// Weighted least-squares fit of `s (1 - exp(-phi h))` using Cressie's
/// weights. The sill is profiled out in closed form for each `phi`.
pub fn fit_exponential_variogram(bins: Vec<VariogramBin>, cfg: &VariogramConfig) -> Result<VariogramFit> {
    if bins.len() < 3 {
        return Err(Error::Input(format!(
            "variogram fit needs at least 3 distance bins, got {}",
            bins.len()
        )));
    }
    let max_gamma = bins.iter().map(|b| b.semivariance).fold(0.0, f64::max);
    if !(max_gamma > 0.0) {
        log::warn!("semivariogram is identically zero; no spatial structure, using decay {}", cfg.phi_min);
        return Ok(VariogramFit { decay: cfg.phi_min, sill: 0.0, bins, at_bound: true });
    }
    let profile = |phi: f64| -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        let ratios: Vec<f64> = bins
            .iter()
            .map(|b| {
                let g = -(-phi * b.distance).exp_m1();
                let r = if g > 0.0 { b.semivariance / g } else { 0.0 };
                num += b.count as f64 * r;
                den += b.count as f64 * r * r;
                r
            })
            .collect();
        let inv_sill = if den > 0.0 { num / den } else { 0.0 };
        let obj = bins
            .iter()
            .zip(&ratios)
            .map(|(b, r)| b.count as f64 * (inv_sill * r - 1.0).powi(2))
            .sum::<f64>();
        (obj, inv_sill)
    };
    let (phi, _) = log_grid_min(|phi| profile(phi).0, cfg.phi_min, cfg.phi_max, 400);
    let inv_sill = profile(phi).1;
    let at_bound = phi <= cfg.phi_min * (1.0 + 1e-6) || phi >= cfg.phi_max * (1.0 - 1e-6);
    if at_bound {
        log::warn!("variogram decay estimate {phi} is on the search bound");
    }
    Ok(VariogramFit { decay: phi, sill: if inv_sill > 0.0 { 1.0 / inv_sill } else { 0.0 }, bins, at_bound })
}

/// Per-site regression coefficients `(a_i, b_i)`; singular sites are skipped.
pub fn site_regressions(pairs: &[CollocatedPair]) -> (Vec<(Location, f64, f64)>, Vec<String>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for p in pairs {
        let (xs, ys): (Vec<f64>, Vec<f64>) = p
            .station
            .observed()
            .filter_map(|(t, y)| p.grid.index_of(t).map(|k| (p.grid.censored[k], y)))
            .unzip();
        match ols(&xs, &ys) {
            Some((a, b)) => out.push((p.station.location, a, b)),
            None => {
                log::warn!("site {}: singular regression on remote-sensing exceedances, skipped", p.station.id);
                skipped.push(p.station.id.clone());
            }
        }
    }
    (out, skipped)
}

/// Coefficients that agree up to round-off carry no spatial signal; make them
/// exactly equal so the semivariogram is identically zero.
fn flatten_roundoff(mut v: Vec<f64>) -> Vec<f64> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    if hi - lo <= 1e-9 * (1.0 + lo.abs().max(hi.abs())) {
        v.iter_mut().for_each(|x| *x = lo);
    }
    v
}

pub fn prefit_decay(pairs: &[CollocatedPair], cfg: &VariogramConfig) -> Result<DecayPrefit> {
    if pairs.len() < 4 {
        return Err(Error::Input(format!("decay pre-fit needs at least 4 stations, got {}", pairs.len())));
    }
    let (coefs, skipped) = site_regressions(pairs);
    let locs: Vec<Location> = coefs.iter().map(|c| c.0).collect();
    let a = flatten_roundoff(coefs.iter().map(|c| c.1).collect());
    let b = flatten_roundoff(coefs.iter().map(|c| c.2).collect());
    let alpha = fit_exponential_variogram(empirical_semivariogram(&locs, &a, cfg.n_bins), cfg)?;
    let beta = fit_exponential_variogram(empirical_semivariogram(&locs, &b, cfg.n_bins), cfg)?;
    Ok(DecayPrefit { alpha, beta, skipped })
}
