//! Probability kernels for threshold exceedances.
//!
//! Everything here works in log space. Values outside a distribution's support
//! give `-inf` rather than an error so that Metropolis proposals landing there
//! are simply rejected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{golden_min, ln_gamma};

/// Below this magnitude the shape is treated as zero and the exponential
/// limit of the GPD is used.
pub const XI_ZERO_TOL: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Generalised Pareto distribution of excesses over a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub scale: f64,
    pub shape: f64,
}

impl GpdParams {
    pub fn new(scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Input(format!("GPD scale must be positive and finite, got {scale}")));
        }
        if !shape.is_finite() {
            return Err(Error::Input(format!("GPD shape must be finite, got {shape}")));
        }
        Ok(Self { scale, shape })
    }

    /// Upper end of the support (`scale / |shape|` for negative shape).
    pub fn upper_endpoint(&self) -> f64 {
        if self.shape < -XI_ZERO_TOL {
            self.scale / -self.shape
        } else {
            f64::INFINITY
        }
    }

    /// Mean `scale / (1 - shape)`; infinite for shape >= 1.
    pub fn mean(&self) -> f64 {
        if self.shape >= 1.0 {
            f64::INFINITY
        } else {
            self.scale / (1.0 - self.shape)
        }
    }
}

/// Zero-inflated GPD: point mass `1 - exceed_prob` at zero and
/// `exceed_prob` times a GPD on the positive half-line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaGpdParams {
    pub gpd: GpdParams,
    pub exceed_prob: f64,
}

impl DeltaGpdParams {
    pub fn new(gpd: GpdParams, exceed_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&exceed_prob) {
            return Err(Error::Input(format!(
                "exceedance probability must lie in [0, 1], got {exceed_prob}"
            )));
        }
        Ok(Self { gpd, exceed_prob })
    }
}

/// Laplace density truncated to (-0.5, 0.5) and renormalised; prior for the
/// GPD shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacePrior {
    pub location: f64,
    pub scale: f64,
}

impl LaplacePrior {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !(location > -0.5 && location < 0.5) {
            return Err(Error::Config(format!(
                "Laplace prior location must lie in (-0.5, 0.5), got {location}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("Laplace prior scale must be positive, got {scale}")));
        }
        Ok(Self { location, scale })
    }
}

/// GPD log density with the scale given on the log scale. No validation;
/// this is the hot path of the sampler.
#[inline]
pub fn gpd_logpdf_log_scale(z: f64, log_scale: f64, shape: f64) -> f64 {
    if z < 0.0 {
        return f64::NEG_INFINITY;
    }
    let inv_scale = (-log_scale).exp();
    if shape.abs() < XI_ZERO_TOL {
        return -log_scale - z * inv_scale;
    }
    let arg = shape * z * inv_scale;
    if arg <= -1.0 {
        return f64::NEG_INFINITY;
    }
    -log_scale - (1.0 / shape + 1.0) * arg.ln_1p()
}

/// Log density of the GPD at `z >= 0`.
pub fn gpd_logpdf(z: f64, p: &GpdParams) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Input(format!("GPD argument must be finite, got {z}")));
    }
    Ok(gpd_logpdf_log_scale(z, p.scale.ln(), p.shape))
}

pub fn gpd_cdf(z: f64, p: &GpdParams) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    let t = z / p.scale;
    if p.shape.abs() < XI_ZERO_TOL {
        return -(-t).exp_m1();
    }
    let arg = p.shape * t;
    if arg <= -1.0 {
        return 1.0;
    }
    -(-arg.ln_1p() / p.shape).exp_m1()
}

/// Inverse of [`gpd_cdf`]. At `q = 1` a bounded tail returns its endpoint
/// and an unbounded one is an error.
pub fn gpd_quantile(q: f64, p: &GpdParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Input(format!("quantile level must lie in [0, 1], got {q}")));
    }
    if q >= 1.0 {
        if p.shape < -XI_ZERO_TOL {
            return Ok(p.upper_endpoint());
        }
        return Err(Error::Unbounded(q));
    }
    let log_surv = (-q).ln_1p();
    if p.shape.abs() < XI_ZERO_TOL {
        return Ok(-p.scale * log_surv);
    }
    Ok(p.scale / p.shape * (-p.shape * log_surv).exp_m1())
}

/// Log-likelihood of one censored value under the zero-inflated GPD.
pub fn dgpd_loglik(z: f64, p: &DeltaGpdParams) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Input(format!("censored value must be finite, got {z}")));
    }
    if z <= 0.0 {
        return Ok((-p.exceed_prob).ln_1p());
    }
    if p.exceed_prob <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(p.exceed_prob.ln() + gpd_logpdf(z, &p.gpd)?)
}

/// Draw from the zero-inflated GPD by inverse CDF.
pub fn dgpd_sample<R: Rng + ?Sized>(p: &DeltaGpdParams, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    if u >= p.exceed_prob {
        return 0.0;
    }
    gpd_sample(&p.gpd, rng)
}

pub fn gpd_sample<R: Rng + ?Sized>(p: &GpdParams, rng: &mut R) -> f64 {
    let v: f64 = rng.gen();
    // v in [0, 1) so the quantile is always finite.
    gpd_quantile(v, p).unwrap_or(0.0)
}

pub fn laplace_logprior(xi: f64, prior: &LaplacePrior) -> Result<f64> {
    let (mu, b) = (prior.location, prior.scale);
    if !(b > 0.0) {
        return Err(Error::Config(format!("Laplace prior scale must be positive, got {b}")));
    }
    if !(xi > -0.5 && xi < 0.5) {
        return Ok(f64::NEG_INFINITY);
    }
    let norm = 2.0 - ((-0.5 - mu) / b).exp() - ((mu - 0.5) / b).exp();
    Ok(-b.ln() - (xi - mu).abs() / b - norm.ln())
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse logit, stable for large |x|.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln logistic(x)`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 - logistic(x))`.
#[inline]
pub fn log1m_logistic(x: f64) -> f64 {
    -softplus(x)
}

#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log density of `v` when `1/v ~ Gamma(shape, rate)`.
pub fn inverse_gamma_logpdf(v: f64, shape: f64, rate: f64) -> f64 {
    if !(v > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * v.ln() - rate / v
}

/// Maximum-likelihood GPD fit to positive excesses, with the shape confined
/// to `[xi_lo, xi_hi]`. Used for sampler initialisation.
pub fn fit_gpd(excesses: &[f64], xi_lo: f64, xi_hi: f64) -> Result<GpdParams> {
    let z: Vec<f64> = excesses.iter().copied().filter(|v| *v > 0.0).collect();
    if z.len() < 2 {
        return Err(Error::Input(format!(
            "GPD fit needs at least two positive excesses, got {}",
            z.len()
        )));
    }
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let max = z.iter().copied().fold(0.0, f64::max);
    let nll = |log_scale: f64, xi: f64| -> f64 {
        let s: f64 = z.iter().map(|&v| gpd_logpdf_log_scale(v, log_scale, xi)).sum();
        if s.is_finite() {
            -s
        } else {
            f64::INFINITY
        }
    };
    let profile = |xi: f64| -> (f64, f64) {
        // For negative shape the scale must exceed -xi * max.
        let lo = if xi < 0.0 { (-xi * max).max(1e-12).ln() + 1e-9 } else { (mean * 1e-3).ln() };
        let hi = (mean * 1e3).ln().max(lo + 1.0);
        golden_min(|ls| nll(ls, xi), lo, hi, 1e-9)
    };
    let (xi, _) = golden_min(|xi| profile(xi).1, xi_lo, xi_hi, 1e-7);
    let (ls, _) = profile(xi);
    GpdParams::new(ls.exp(), xi)
}
