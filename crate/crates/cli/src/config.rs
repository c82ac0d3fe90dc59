//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use exdf_core::archive::McmcConfig;
use exdf_core::data::DataConfig;
use exdf_core::extremes::LaplacePrior;
use exdf_core::model::ModelSpec;
use exdf_core::predict::PredictConfig;
use exdf_core::validate::ModelChoice;
use exdf_core::variogram::VariogramConfig;

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub stations: PathBuf,
    pub grid: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A prior mean for the grid coefficients: one value for every coefficient
/// or a full vector of length `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuD {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Overrides of the default hyperparameters. Decay rates that are left
/// unset are estimated by the variogram pre-fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub phi_alpha: Option<f64>,
    pub phi_beta: Option<f64>,
    pub xi_y_location: Option<f64>,
    pub xi_y_scale: Option<f64>,
    pub xi_x_location: Option<f64>,
    pub xi_x_scale: Option<f64>,
    pub a_alpha: Option<f64>,
    pub b_alpha: Option<f64>,
    pub a_beta: Option<f64>,
    pub b_beta: Option<f64>,
    pub a_c: Option<f64>,
    pub b_c: Option<f64>,
    pub mu_d: Option<MuD>,
    pub kappa_d: Option<f64>,
    pub mu_lambda: Option<[f64; 4]>,
    pub sigma2_lambda: Option<[f64; 4]>,
    pub a_obs: Option<f64>,
    pub b_obs: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Validation {
    /// Probability cutoff for exceedance classification.
    pub cutoff: f64,
    /// Refits with a worse split-R̂ are flagged and their metrics withheld.
    pub rhat_max: f64,
}

impl Default for Validation {
    fn default() -> Self {
        Self { cutoff: 0.5, rhat_max: 1.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default = "default_model")]
    pub model: ModelChoice,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Threshold quantile applied to every station and cell.
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    /// Stations with this fraction of days or fewer present are dropped.
    #[serde(default = "default_coverage")]
    pub coverage_min: f64,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub validation: Validation,
    #[serde(default)]
    pub variogram: VariogramConfig,
}

fn default_model() -> ModelChoice {
    ModelChoice::Exdf
}

fn default_m() -> usize {
    10
}

fn default_quantile() -> f64 {
    DataConfig::default().quantile
}

fn default_coverage() -> f64 {
    DataConfig::default().coverage_min
}

impl RunConfig {
    /// Parse, resolve relative paths against the file's directory and
    /// validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = std::path::absolute(&base).with_context(|| format!("resolving {}", base.display()))?;
        for p in [&mut cfg.paths.stations, &mut cfg.paths.grid, &mut cfg.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every invariant that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Invalid(format!("quantile must lie in (0, 1), got {}", self.quantile)).into());
        }
        if !(0.0..=1.0).contains(&self.coverage_min) {
            return Err(Invalid(format!("coverage_min must lie in [0, 1], got {}", self.coverage_min)).into());
        }
        self.mcmc.validate()?;
        self.spec(1.0, 1.0)?.validate()?;
        if self.predict.n_draws == 0 {
            return Err(Invalid("predict.n_draws must be positive".into()).into());
        }
        if !(0.0..=1.0).contains(&self.validation.cutoff) || !(self.validation.rhat_max >= 1.0) {
            return Err(Invalid("validation.cutoff must lie in [0, 1] and rhat_max be at least 1".into()).into());
        }
        if self.variogram.n_bins < 3 || !(self.variogram.phi_min > 0.0 && self.variogram.phi_max > self.variogram.phi_min)
        {
            return Err(Invalid("variogram needs n_bins >= 3 and 0 < phi_min < phi_max".into()).into());
        }
        for p in [&self.paths.stations, &self.paths.grid] {
            if !p.is_file() {
                return Err(Invalid(format!("input file {} does not exist", p.display())).into());
            }
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { coverage_min: self.coverage_min, quantile: self.quantile }
    }

    /// Decay rates fixed in the config, if both are.
    pub fn fixed_decays(&self) -> Option<(f64, f64)> {
        Some((self.hyper.phi_alpha?, self.hyper.phi_beta?))
    }

    /// The model specification with the given decay rates for any rate the
    /// config leaves open.
    pub fn spec(&self, phi_alpha: f64, phi_beta: f64) -> Result<ModelSpec> {
        let h = &self.hyper;
        let mut s = ModelSpec::with_defaults(self.m);
        s.phi_alpha = h.phi_alpha.unwrap_or(phi_alpha);
        s.phi_beta = h.phi_beta.unwrap_or(phi_beta);
        let laplace = |p: &LaplacePrior, loc: Option<f64>, scale: Option<f64>| LaplacePrior {
            location: loc.unwrap_or(p.location),
            scale: scale.unwrap_or(p.scale),
        };
        s.xi_y_prior = laplace(&s.xi_y_prior, h.xi_y_location, h.xi_y_scale);
        s.xi_x_prior = laplace(&s.xi_x_prior, h.xi_x_location, h.xi_x_scale);
        for (dst, src) in [
            (&mut s.a_alpha, h.a_alpha),
            (&mut s.b_alpha, h.b_alpha),
            (&mut s.a_beta, h.a_beta),
            (&mut s.b_beta, h.b_beta),
            (&mut s.a_c, h.a_c),
            (&mut s.b_c, h.b_c),
            (&mut s.kappa_d, h.kappa_d),
            (&mut s.a_obs, h.a_obs),
            (&mut s.b_obs, h.b_obs),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        match &h.mu_d {
            Some(MuD::Scalar(v)) => s.mu_d = vec![*v; self.m],
            Some(MuD::Vector(v)) => s.mu_d = v.clone(),
            None => {}
        }
        if let Some(v) = h.mu_lambda {
            s.mu_lambda = v;
        }
        if let Some(v) = h.sigma2_lambda {
            s.sigma2_lambda = v;
        }
        s.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(s)
    }

    pub fn posterior_path(&self) -> PathBuf {
        self.paths.output_dir.join("posterior.bin")
    }
}
