//! Leave-one-site-out cross-validation.

use serde::{Deserialize, Serialize};

use crate::archive::{McmcConfig, PosteriorArchive};
use crate::data::{CollocatedPair, GridSeries};
use crate::diagnostics::max_rhat;
use crate::error::{Error, Result};
use crate::gaussian::{fit_gaussian_data, GaussianData};
use crate::metrics::{score, MetricReport};
use crate::model::ModelSpec;
use crate::par;
use crate::posterior::{data_domain, FusionData};
use crate::predict::{predict, predict_gaussian, PredictConfig};
use crate::rng::{child_seed, Purpose};
use crate::sampler::run_mcmc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Exdf,
    Gaussian,
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exdf" => Ok(Self::Exdf),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!("unknown model '{other}' (expected exdf or gaussian)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosoConfig {
    pub mcmc: McmcConfig,
    pub predict: PredictConfig,
    /// Probability cutoff for the exceedance classification metrics.
    pub cutoff: f64,
    /// Refits whose worst split-R̂ exceeds this are flagged (only checked
    /// with two or more chains).
    pub rhat_max: f64,
}

impl Default for LosoConfig {
    fn default() -> Self {
        Self { mcmc: McmcConfig::default(), predict: PredictConfig::default(), cutoff: 0.5, rhat_max: 1.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub site: String,
    pub converged: bool,
    pub max_rhat: Option<f64>,
    /// Withheld when the refit did not converge.
    pub report: Option<MetricReport>,
}

/// Fit one model to `pairs` on a fixed basis domain.
pub fn fit_model(
    pairs: &[CollocatedPair],
    spec: &ModelSpec,
    model: ModelChoice,
    mcmc: &McmcConfig,
    domain: Option<(f64, f64)>,
) -> Result<PosteriorArchive> {
    match model {
        ModelChoice::Exdf => run_mcmc(&FusionData::new(pairs, spec, domain)?, spec, mcmc),
        ModelChoice::Gaussian => fit_gaussian_data(&GaussianData::new(pairs, spec, domain)?, spec, mcmc),
    }
}

/// For each station: refit without it, predict its observed days from the
/// remaining stations and the grid, and score against its censored series.
/// All folds share the basis domain of the full data set.
pub fn loso_cv(
    pairs: &[CollocatedPair],
    grids: &[GridSeries],
    spec: &ModelSpec,
    model: ModelChoice,
    cfg: &LosoConfig,
) -> Result<Vec<FoldResult>> {
    if pairs.len() < 3 {
        return Err(Error::Input(format!("leave-one-site-out needs at least 3 sites, got {}", pairs.len())));
    }
    let domain = data_domain(pairs);
    let folds: Vec<Result<FoldResult>> = par::map_range(pairs.len(), |i| {
        let held = &pairs[i];
        let train: Vec<CollocatedPair> =
            pairs.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, p)| p.clone()).collect();
        let mcmc = McmcConfig { seed: child_seed(cfg.mcmc.seed, Purpose::Fold, &[i as u64]), ..cfg.mcmc };
        let archive = fit_model(&train, spec, model, &mcmc, domain)?;
        let rhat = if mcmc.n_chains >= 2 { Some(max_rhat(&archive)?) } else { None };
        let converged = rhat.map_or(true, |r| !(r > cfg.rhat_max));
        if !converged {
            log::warn!("fold {}: refit did not converge (max R-hat {:.3}); metrics withheld", held.station.id, rhat.unwrap_or(f64::NAN));
            return Ok(FoldResult { site: held.station.id.clone(), converged, max_rhat: rhat, report: None });
        }
        let (days, obs): (Vec<i64>, Vec<f64>) = held.station.observed().unzip();
        let pcfg = PredictConfig { seed: child_seed(cfg.predict.seed, Purpose::Fold, &[i as u64]), ..cfg.predict };
        let pred = match model {
            ModelChoice::Exdf => predict(&archive, held.station.location, grids, Some(&days), &pcfg)?,
            ModelChoice::Gaussian => predict_gaussian(
                &archive,
                held.station.location,
                grids,
                Some(&days),
                Some(held.station.threshold),
                &pcfg,
            )?,
        };
        let report = score(&held.station.id, &pred, &obs, cfg.cutoff)?;
        Ok(FoldResult { site: held.station.id.clone(), converged, max_rhat: rhat, report: Some(report) })
    });
    folds.into_iter().collect()
}
