//! Adaptive random-walk Metropolis–Hastings for one parameter block.
//!
//! During burn-in each block tunes a global log step size by Robbins–Monro
//! towards a target acceptance rate and learns a proposal covariance from its
//! own history. When burn-in ends the proposal is frozen; after that the block
//! is an ordinary, time-homogeneous random-walk kernel.

use rand::Rng;
use rand_distr::StandardNormal;

/// Target acceptance rates for scalar and multivariate blocks.
pub const TARGET_SCALAR: f64 = 0.44;
pub const TARGET_MULTI: f64 = 0.25;

/// Iterations of pure step-size tuning before the learned covariance is used.
const COV_WARMUP: u64 = 200;
/// How often the Cholesky factor of the learned covariance is refreshed.
const COV_REFRESH: u64 = 100;

#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    target: f64,
    log_scale: f64,
    /// Row-major lower-triangular factor of the unscaled proposal covariance.
    chol: Vec<f64>,
    frozen: bool,
    n_adapt: u64,
    n_cov: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    using_cov: bool,
    accepted: u64,
    proposed: u64,
}

impl AdaptiveProposal {
    /// Proposal with isotropic initial step `initial_step`.
    pub fn new(dim: usize, initial_step: f64) -> Self {
        let mut chol = vec![0.0; dim * dim];
        for k in 0..dim {
            chol[k * dim + k] = 1.0;
        }
        Self {
            dim,
            target: if dim == 1 { TARGET_SCALAR } else { TARGET_MULTI },
            log_scale: initial_step.ln(),
            chol,
            frozen: false,
            n_adapt: 0,
            n_cov: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            using_cov: false,
            accepted: 0,
            proposed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stop adapting and reset the acceptance counters.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.accepted = 0;
        self.proposed = 0;
    }

    /// Acceptance rate since the last [`freeze`](Self::freeze) (or since creation).
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.accepted, self.proposed)
    }

    /// Everything that determines future proposals, for reproducibility checks.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.chol.len());
        v.push(self.log_scale);
        v.extend_from_slice(&self.chol);
        v
    }

    /// Write `current + exp(log_scale) L z` into `out`.
    pub fn propose<R: Rng + ?Sized>(&self, current: &[f64], rng: &mut R, out: &mut [f64]) {
        let s = self.log_scale.exp();
        let d = self.dim;
        if d == 1 {
            let z: f64 = rng.sample(StandardNormal);
            out[0] = current[0] + s * self.chol[0] * z;
            return;
        }
        let mut z = [0.0f64; 32];
        let mut zv;
        let z: &mut [f64] = if d <= 32 {
            &mut z[..d]
        } else {
            zv = vec![0.0; d];
            &mut zv
        };
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for r in 0..d {
            let row = &self.chol[r * d..r * d + r + 1];
            let mut acc = 0.0;
            for (k, l) in row.iter().enumerate() {
                acc += l * z[k];
            }
            out[r] = current[r] + s * acc;
        }
    }

    /// Record the outcome of one step; `state` is the block value after it.
    pub fn record(&mut self, accepted: bool, state: &[f64]) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
        if self.frozen {
            return;
        }
        self.n_adapt += 1;
        let gain = (self.n_adapt as f64).powf(-0.6).min(1.0);
        let a = if accepted { 1.0 } else { 0.0 };
        self.log_scale = (self.log_scale + gain * (a - self.target)).clamp(-30.0, 10.0);

        if self.n_adapt > COV_WARMUP / 2 {
            self.n_cov += 1;
            let n = self.n_cov as f64;
            let d = self.dim;
            let mut delta = [0.0f64; 32];
            let mut dv;
            let delta: &mut [f64] = if d <= 32 {
                &mut delta[..d]
            } else {
                dv = vec![0.0; d];
                &mut dv
            };
            for k in 0..d {
                delta[k] = state[k] - self.mean[k];
                self.mean[k] += delta[k] / n;
            }
            for r in 0..d {
                for c in 0..=r {
                    self.comoment[r * d + c] += delta[r] * (state[c] - self.mean[c]);
                }
            }
        }
        if self.n_adapt >= COV_WARMUP && self.n_adapt % COV_REFRESH == 0 && self.n_cov > 2 * self.dim as u64 {
            self.refresh_factor();
        }
    }

    fn refresh_factor(&mut self) {
        let d = self.dim;
        let n = self.n_cov as f64;
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        let mut mean_diag = 0.0;
        for r in 0..d {
            for c in 0..=r {
                let v = self.comoment[r * d + c] / (n - 1.0);
                cov[(r, c)] = v;
                cov[(c, r)] = v;
            }
            mean_diag += cov[(r, r)] / d as f64;
        }
        if !(mean_diag > 0.0) || !mean_diag.is_finite() {
            return;
        }
        for r in 0..d {
            cov[(r, r)] += 1e-6 * mean_diag + 1e-12;
        }
        let Some(ch) = cov.cholesky() else { return };
        let l = ch.l();
        for r in 0..d {
            for c in 0..d {
                self.chol[r * d + c] = if c <= r { l[(r, c)] } else { 0.0 };
            }
        }
        if !self.using_cov {
            self.using_cov = true;
            self.log_scale = (2.38 / (d as f64).sqrt()).ln();
        }
    }
}

/// Metropolis acceptance for a log density ratio; NaN (e.g. `-inf - -inf`)
/// rejects.
#[inline]
pub fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 {
        // Still consume a uniform so the stream position does not depend on
        // the sign of the ratio.
        let _: f64 = rng.gen();
        return true;
    }
    let u: f64 = rng.gen();
    u.ln() < log_ratio
}
