//! Hyperparameters and the joint parameter vector of the fusion model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremes::LaplacePrior;

/// Hyperparameters and fixed quantities of the hierarchical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Basis dimension shared by station and grid curves.
    pub m: usize,
    pub phi_alpha: f64,
    pub phi_beta: f64,
    pub xi_y_prior: LaplacePrior,
    pub xi_x_prior: LaplacePrior,
    /// Gamma(shape, rate) priors on the precisions 1/sigma2.
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_beta: f64,
    pub b_beta: f64,
    pub a_c: f64,
    pub b_c: f64,
    /// Prior mean of each grid coefficient vector (length `m`).
    pub mu_d: Vec<f64>,
    /// Prior covariance of `d_i` is `kappa_d * I`.
    pub kappa_d: f64,
    pub mu_lambda: [f64; 4],
    pub sigma2_lambda: [f64; 4],
    /// Gamma(shape, rate) prior on the observation precisions of the
    /// Gaussian baseline; unused by the exceedance model.
    pub a_obs: f64,
    pub b_obs: f64,
}

impl ModelSpec {
    pub fn with_defaults(m: usize) -> Self {
        Self {
            m,
            phi_alpha: 1.6,
            phi_beta: 1.6,
            xi_y_prior: LaplacePrior { location: 0.0, scale: 0.05 },
            xi_x_prior: LaplacePrior { location: 0.0, scale: 0.05 },
            a_alpha: 2.0,
            b_alpha: 1.0,
            a_beta: 2.0,
            b_beta: 1.0,
            a_c: 2.0,
            b_c: 1.0,
            mu_d: vec![0.0; m],
            kappa_d: 100.0,
            mu_lambda: [0.0; 4],
            sigma2_lambda: [1.0; 4],
            a_obs: 2.0,
            b_obs: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 4 {
            return Err(Error::Config(format!("basis dimension m must be at least 4, got {}", self.m)));
        }
        if self.mu_d.len() != self.m {
            return Err(Error::Config(format!("mu_d has length {}, expected m = {}", self.mu_d.len(), self.m)));
        }
        LaplacePrior::new(self.xi_y_prior.location, self.xi_y_prior.scale)?;
        LaplacePrior::new(self.xi_x_prior.location, self.xi_x_prior.scale)?;
        let positive = [
            ("phi_alpha", self.phi_alpha),
            ("phi_beta", self.phi_beta),
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
            ("a_beta", self.a_beta),
            ("b_beta", self.b_beta),
            ("a_c", self.a_c),
            ("b_c", self.b_c),
            ("kappa_d", self.kappa_d),
            ("a_obs", self.a_obs),
            ("b_obs", self.b_obs),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (l, v) in self.sigma2_lambda.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sigma2_lambda[{l}] must be positive, got {v}")));
            }
        }
        if self.mu_d.iter().chain(&self.mu_lambda).any(|v| !v.is_finite()) {
            return Err(Error::Config("prior means must be finite".into()));
        }
        Ok(())
    }
}

/// One point in the joint parameter space. Per-site rows are indexed by site
/// then basis coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub lambda: Vec<[f64; 4]>,
    pub xi_y: f64,
    pub xi_x: f64,
    pub sigma2_c: f64,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    C,
    D,
    Alpha,
    Beta,
    Lambda,
    XiY,
    XiX,
    Sigma2C,
    Sigma2Alpha,
    Sigma2Beta,
    // Gaussian baseline only.
    Sigma2Y,
    Sigma2X,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::C => "c",
            ParamGroup::D => "d",
            ParamGroup::Alpha => "alpha",
            ParamGroup::Beta => "beta",
            ParamGroup::Lambda => "lambda",
            ParamGroup::XiY => "xi_y",
            ParamGroup::XiX => "xi_x",
            ParamGroup::Sigma2C => "sigma2_c",
            ParamGroup::Sigma2Alpha => "sigma2_alpha",
            ParamGroup::Sigma2Beta => "sigma2_beta",
            ParamGroup::Sigma2Y => "sigma2_y",
            ParamGroup::Sigma2X => "sigma2_x",
        }
    }
}

/// Where each parameter group lives inside a flattened draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub n_sites: usize,
    pub m: usize,
    pub groups: Vec<(ParamGroup, usize, usize)>,
}

impl ParamLayout {
    fn build(n: usize, m: usize, groups: &[(ParamGroup, usize)]) -> Self {
        let mut offset = 0;
        let groups = groups
            .iter()
            .map(|&(g, len)| {
                let e = (g, offset, len);
                offset += len;
                e
            })
            .collect();
        Self { n_sites: n, m, groups }
    }

    /// Layout of [`ParameterState`].
    pub fn exceedance(n: usize, m: usize) -> Self {
        Self::build(
            n,
            m,
            &[
                (ParamGroup::C, n * m),
                (ParamGroup::D, n * m),
                (ParamGroup::Alpha, n * m),
                (ParamGroup::Beta, n * m),
                (ParamGroup::Lambda, n * 4),
                (ParamGroup::XiY, 1),
                (ParamGroup::XiX, 1),
                (ParamGroup::Sigma2C, 1),
                (ParamGroup::Sigma2Alpha, 1),
                (ParamGroup::Sigma2Beta, 1),
            ],
        )
    }

    /// Layout of the Gaussian baseline state.
    pub fn gaussian(n: usize, m: usize) -> Self {
        Self::build(
            n,
            m,
            &[
                (ParamGroup::C, n * m),
                (ParamGroup::D, n * m),
                (ParamGroup::Alpha, n * m),
                (ParamGroup::Beta, n * m),
                (ParamGroup::Sigma2Y, 1),
                (ParamGroup::Sigma2X, 1),
                (ParamGroup::Sigma2C, 1),
                (ParamGroup::Sigma2Alpha, 1),
                (ParamGroup::Sigma2Beta, 1),
            ],
        )
    }

    pub fn dim(&self) -> usize {
        self.groups.last().map_or(0, |g| g.1 + g.2)
    }

    pub fn range(&self, group: ParamGroup) -> Option<std::ops::Range<usize>> {
        self.groups.iter().find(|g| g.0 == group).map(|g| g.1..g.1 + g.2)
    }

    /// Human-readable parameter names, e.g. `c[A,3]` or `lambda[B,0]`.
    pub fn names(&self, site_ids: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for &(g, _, len) in &self.groups {
            match g {
                ParamGroup::C | ParamGroup::D | ParamGroup::Alpha | ParamGroup::Beta => {
                    for i in 0..self.n_sites {
                        for r in 0..self.m {
                            out.push(format!("{}[{}][{}]", g.name(), site_ids[i], r + 1));
                        }
                    }
                }
                ParamGroup::Lambda => {
                    for i in 0..self.n_sites {
                        for l in 0..4 {
                            out.push(format!("lambda[{}][{}]", site_ids[i], l));
                        }
                    }
                }
                _ => {
                    debug_assert_eq!(len, 1);
                    out.push(g.name().to_string());
                }
            }
        }
        out
    }
}

fn push_rows(out: &mut Vec<f64>, rows: &[Vec<f64>]) {
    for r in rows {
        out.extend_from_slice(r);
    }
}

fn take_rows(flat: &[f64], n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| flat[i * m..(i + 1) * m].to_vec()).collect()
}

impl ParameterState {
    pub fn n_sites(&self) -> usize {
        self.c.len()
    }

    pub fn m(&self) -> usize {
        self.c.first().map_or(0, Vec::len)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let (n, m) = (self.n_sites(), self.m());
        let mut out = Vec::with_capacity(4 * n * m + 4 * n + 5);
        push_rows(&mut out, &self.c);
        push_rows(&mut out, &self.d);
        push_rows(&mut out, &self.alpha);
        push_rows(&mut out, &self.beta);
        for l in &self.lambda {
            out.extend_from_slice(l);
        }
        out.extend_from_slice(&[self.xi_y, self.xi_x, self.sigma2_c, self.sigma2_alpha, self.sigma2_beta]);
        out
    }

    pub fn unflatten(flat: &[f64], n: usize, m: usize) -> Result<Self> {
        let layout = ParamLayout::exceedance(n, m);
        if flat.len() != layout.dim() {
            return Err(Error::Input(format!(
                "flattened state has {} values, expected {}",
                flat.len(),
                layout.dim()
            )));
        }
        let nm = n * m;
        let lam_off = 4 * nm;
        let tail = &flat[lam_off + 4 * n..];
        Ok(Self {
            c: take_rows(&flat[..nm], n, m),
            d: take_rows(&flat[nm..2 * nm], n, m),
            alpha: take_rows(&flat[2 * nm..3 * nm], n, m),
            beta: take_rows(&flat[3 * nm..4 * nm], n, m),
            lambda: (0..n)
                .map(|i| {
                    let s = &flat[lam_off + 4 * i..lam_off + 4 * i + 4];
                    [s[0], s[1], s[2], s[3]]
                })
                .collect(),
            xi_y: tail[0],
            xi_x: tail[1],
            sigma2_c: tail[2],
            sigma2_alpha: tail[3],
            sigma2_beta: tail[4],
        })
    }

    /// Check the shape and support invariants.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let ok_rows = |rows: &Vec<Vec<f64>>| rows.len() == n && rows.iter().all(|r| r.len() == m);
        if !(ok_rows(&self.c) && ok_rows(&self.d) && ok_rows(&self.alpha) && ok_rows(&self.beta))
            || self.lambda.len() != n
        {
            return Err(Error::Input(format!("parameter state does not have {n} sites x {m} coefficients")));
        }
        Ok(())
    }

    /// Column `r` of a per-site matrix.
    pub fn column(rows: &[Vec<f64>], r: usize) -> Vec<f64> {
        rows.iter().map(|row| row[r]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_layout_matches_groups() {
        let s = ParameterState {
            c: vec![vec![1.0, 2.0, 3.0, 4.0]; 2],
            d: vec![vec![5.0; 4]; 2],
            alpha: vec![vec![6.0; 4]; 2],
            beta: vec![vec![7.0; 4]; 2],
            lambda: vec![[8.0, 9.0, 10.0, 11.0]; 2],
            xi_y: 0.1,
            xi_x: -0.2,
            sigma2_c: 0.3,
            sigma2_alpha: 0.4,
            sigma2_beta: 0.5,
        };
        let flat = s.flatten();
        let layout = ParamLayout::exceedance(2, 4);
        assert_eq!(flat.len(), layout.dim());
        assert_eq!(flat[layout.range(ParamGroup::XiX).unwrap()][0], -0.2);
        assert_eq!(flat[layout.range(ParamGroup::Lambda).unwrap()][5], 9.0);
        assert_eq!(ParameterState::unflatten(&flat, 2, 4).unwrap(), s);
        let names = layout.names(&["A".into(), "B".into()]);
        assert_eq!(names[1], "c[A][2]");
        assert_eq!(names.last().unwrap(), "sigma2_beta");
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::with_defaults(10);
        assert!(s.validate().is_ok());
        s.b_c = 0.0;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::with_defaults(10);
        s.xi_y_prior.location = 0.5;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::with_defaults(10);
        s.mu_d.pop();
        assert!(s.validate().is_err());
    }
}
