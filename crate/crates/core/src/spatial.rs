//! Distance matrices, exponential-decay covariances and the Gaussian
//! conditioning used to carry site coefficients to new locations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::Location;
use crate::error::{Error, Result};

/// Relative diagonal jitter added before factorisation.
pub const JITTER: f64 = 1e-8;

pub fn distance_matrix(locations: &[Location]) -> DMatrix<f64> {
    let n = locations.len();
    DMatrix::from_fn(n, n, |i, j| locations[i].distance(&locations[j]))
}

#[derive(Debug, Clone)]
pub struct SpatialKernel {
    pub dist: DMatrix<f64>,
    pub decay: f64,
}

impl SpatialKernel {
    pub fn new(dist: DMatrix<f64>, decay: f64) -> Result<Self> {
        check_distance(&dist)?;
        if !(decay > 0.0) {
            return Err(Error::Config(format!("decay must be positive, got {decay}")));
        }
        Ok(Self { dist, decay })
    }

    /// Unit-variance correlation matrix `exp(-decay * dist)`.
    pub fn correlation(&self) -> DMatrix<f64> {
        self.dist.map(|d| (-self.decay * d).exp())
    }
}

fn check_distance(dist: &DMatrix<f64>) -> Result<()> {
    if !dist.is_square() {
        return Err(Error::Input("distance matrix must be square".into()));
    }
    let n = dist.nrows();
    for i in 0..n {
        if dist[(i, i)] != 0.0 {
            return Err(Error::Input(format!("distance matrix diagonal entry {i} is non-zero")));
        }
        for j in 0..i {
            let (a, b) = (dist[(i, j)], dist[(j, i)]);
            if a != b {
                return Err(Error::Input(format!("distance matrix is not symmetric at ({i}, {j})")));
            }
            if !(a >= 0.0) {
                return Err(Error::Input(format!("negative or NaN distance at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `variance * exp(-decay * dist)` with `JITTER * variance` on the diagonal.
pub fn exp_covariance(dist: &DMatrix<f64>, decay: f64, variance: f64) -> Result<DMatrix<f64>> {
    check_distance(dist)?;
    if !(decay > 0.0) {
        return Err(Error::Config(format!("decay must be positive, got {decay}")));
    }
    if !(variance > 0.0) {
        return Err(Error::Config(format!("variance must be positive, got {variance}")));
    }
    let mut cov = dist.map(|d| variance * (-decay * d).exp());
    for i in 0..cov.nrows() {
        cov[(i, i)] += JITTER * variance;
    }
    Ok(cov)
}

/// Factorised unit-variance exponential correlation for a fixed site layout.
/// Densities with variance `s2` reuse the factor: `K(s2) = s2 * corr`.
#[derive(Debug, Clone)]
pub struct GpFactor {
    pub decay: f64,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    locations: Vec<Location>,
}

impl GpFactor {
    pub fn new(locations: &[Location], decay: f64) -> Result<Self> {
        let dist = distance_matrix(locations);
        let corr = exp_covariance(&dist, decay, 1.0)?;
        let chol = corr
            .cholesky()
            .ok_or_else(|| Error::Numerical("spatial correlation matrix is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { decay, chol, log_det, locations: locations.to_vec() })
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn log_det_corr(&self) -> f64 {
        self.log_det
    }

    /// `v' corr^{-1} v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        let x = self.chol.solve(&v);
        v.dot(&x)
    }

    /// Log density of `v ~ N(mean * 1, variance * corr)`.
    pub fn log_density(&self, v: &[f64], mean: f64, variance: f64) -> f64 {
        let centred: Vec<f64> = v.iter().map(|x| x - mean).collect();
        self.log_density_from_quad(self.quad_form(&centred), variance)
    }

    pub fn log_density_from_quad(&self, quad: f64, variance: f64) -> f64 {
        let n = self.n() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + n * variance.ln() + self.log_det + quad / variance)
    }

    /// Inverse of the correlation matrix.
    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    /// Lower Cholesky factor of the correlation matrix.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Weights for conditioning a new location on the fitted sites.
    pub fn krige(&self, target: &Location) -> Kriging {
        let k = DVector::from_iterator(
            self.n(),
            self.locations.iter().map(|l| (-self.decay * l.distance(target)).exp()),
        );
        let w = self.chol.solve(&k);
        let explained = k.dot(&w);
        Kriging { weights: w.iter().copied().collect(), residual: (1.0 + JITTER - explained).max(0.0) }
    }
}

/// Conditional-Gaussian weights: for `v ~ N(mean, s2 * corr)` observed at the
/// sites, the value at the target is `N(mean + w'(v - mean), s2 * residual)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kriging {
    pub weights: Vec<f64>,
    pub residual: f64,
}

impl Kriging {
    pub fn conditional_mean(&self, v: &[f64], prior_mean: f64) -> f64 {
        prior_mean + self.weights.iter().zip(v).map(|(w, x)| w * (x - prior_mean)).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_values() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let c = exp_covariance(&d, 1.6, 1.0).unwrap();
        assert!((c[(0, 1)] - (-1.6f64).exp()).abs() < 1e-15);
        assert!((c[(0, 1)] - 0.201_897).abs() < 1e-6);
        assert!((c[(0, 0)] - (1.0 + 1e-8)).abs() < 1e-15);
        let far = exp_covariance(&d, 1e4, 2.0).unwrap();
        assert!(far[(0, 1)] < 1e-300);
        assert!((far[(1, 1)] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(exp_covariance(&asym, 1.0, 1.0).is_err());
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(exp_covariance(&d, 0.0, 1.0).is_err());
        assert!(exp_covariance(&d, 1.0, -1.0).is_err());
    }

    #[test]
    fn krige_at_site_and_far_field() {
        let locs = [Location::new(0.0, 0.0), Location::new(1.0, 0.0)];
        let gp = GpFactor::new(&locs, 1.6).unwrap();
        let at = gp.krige(&locs[1]);
        assert!((at.weights[1] - 1.0).abs() < 1e-6 && at.weights[0].abs() < 1e-6);
        assert!(at.residual < 1e-6);
        let far = gp.krige(&Location::new(1e4, 0.0));
        assert!(far.weights.iter().all(|w| w.abs() < 1e-12));
        assert!((far.residual - 1.0).abs() < 1e-6);
        assert!((far.conditional_mean(&[3.0, 4.0], 1.0) - 1.0).abs() < 1e-10);
    }
}
