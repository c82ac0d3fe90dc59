//! Scores for predictive distributions and exceedance classification.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{quantile_sorted, stable_sum};
use crate::predict::PredictiveDraws;

/// Sample CRPS, `mean|X - y| - 0.5 mean|X - X'|` with the second mean over
/// all ordered pairs (including `X = X'`). Uses the sorted-sample identity
/// `sum_{i,j} |x_i - x_j| = 2 sum_k (2k - n + 1) x_(k)`, so it is exact for
/// any ensemble size in `O(n log n)`.
pub fn crps(draws: &[f64], y: f64) -> Result<f64> {
    let n = draws.len();
    if n < 2 {
        return Err(Error::Input(format!("CRPS needs at least 2 draws, got {n}")));
    }
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let abs_err = stable_sum(x.iter().map(|v| (v - y).abs())) / nf;
    let pair = 2.0 * stable_sum(x.iter().enumerate().map(|(k, v)| (2.0 * k as f64 - nf + 1.0) * v)) / (nf * nf);
    Ok((abs_err - 0.5 * pair).max(0.0))
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok((stable_sum(pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o))) / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(stable_sum(pred.iter().zip(obs).map(|(p, o)| (p - o).abs())) / pred.len() as f64)
}

fn check_pair(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::Input(format!(
            "predictions ({}) and observations ({}) must be equal-length and non-empty",
            pred.len(),
            obs.len()
        )));
    }
    Ok(())
}

/// Confusion-matrix summaries. Ratios with an empty denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl ClassificationMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = tp + fp + fn_ + tn;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_).filter(|_| precision.is_some() && recall.is_some());
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy: if total > 0 { (tp + tn) as f64 / total as f64 } else { f64::NAN },
            precision,
            recall,
            specificity: ratio(tn, tn + fp),
            f1,
        }
    }
}

/// Classify `prob >= cutoff` as a predicted exceedance.
pub fn classification_metrics(prob: &[f64], observed: &[bool], cutoff: f64) -> Result<ClassificationMetrics> {
    if prob.len() != observed.len() {
        return Err(Error::Input("probabilities and indicators differ in length".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, o) in prob.iter().zip(observed) {
        match (*p >= cutoff, *o) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fn_ == 0 {
        log::warn!("no observed exceedances: recall is undefined");
    }
    Ok(ClassificationMetrics::from_counts(tp, fp, fn_, tn))
}

/// One point of a quantile–quantile comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqRow {
    pub prob: f64,
    pub observed: f64,
    pub predicted: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Observed exceedance quantiles against predictive ones, at plotting
/// positions `(k - 0.5) / n`. Bands are the pointwise 2.5% and 97.5%
/// quantiles over draws of each draw's own quantile curve.
pub fn qq_table(replicates: &[Vec<f64>], observations: &[f64]) -> Result<Vec<QqRow>> {
    let mut obs: Vec<f64> = observations.iter().copied().filter(|v| *v > 0.0).collect();
    if obs.len() < 10 {
        return Err(Error::Input(format!("Q-Q table needs at least 10 observed exceedances, got {}", obs.len())));
    }
    obs.sort_by(f64::total_cmp);
    let n = obs.len();
    let probs: Vec<f64> = (1..=n).map(|k| (k as f64 - 0.5) / n as f64).collect();
    let mut pooled: Vec<f64> = replicates.iter().flatten().copied().filter(|v| *v > 0.0).collect();
    if pooled.is_empty() {
        return Err(Error::Input("predictive draws contain no exceedances".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let curves: Vec<Vec<f64>> = replicates
        .iter()
        .filter_map(|r| {
            let mut pos: Vec<f64> = r.iter().copied().filter(|v| *v > 0.0).collect();
            (pos.len() >= 2).then(|| {
                pos.sort_by(f64::total_cmp);
                probs.iter().map(|&p| quantile_sorted(&pos, p)).collect()
            })
        })
        .collect();
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let (lower, upper) = if curves.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let mut col: Vec<f64> = curves.iter().map(|c| c[k]).collect();
                col.sort_by(f64::total_cmp);
                (quantile_sorted(&col, 0.025), quantile_sorted(&col, 0.975))
            };
            QqRow { prob: p, observed: obs[k], predicted: quantile_sorted(&pooled, p), lower, upper }
        })
        .collect())
}

/// Scores of one site's predictive against its observed censored series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub site: String,
    pub n_obs: usize,
    pub n_exceedances: usize,
    /// Scores over all observed days (zeros included).
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
    /// Scores over observed exceedance days only (`None` without any).
    pub rmse_exceedances: Option<f64>,
    pub mae_exceedances: Option<f64>,
    pub crps_exceedances: Option<f64>,
    pub classification: ClassificationMetrics,
    /// Fraction of days whose observation lies in the central 95% predictive interval.
    pub coverage95: f64,
}

/// Score predictive draws against observations on the same days.
pub fn score(site: &str, pred: &PredictiveDraws, observed: &[f64], cutoff: f64) -> Result<MetricReport> {
    if observed.len() != pred.n_times() {
        return Err(Error::Input("observations and predictive days differ in length".into()));
    }
    let means = pred.mean();
    let crps_t: Vec<f64> = (0..pred.n_times()).map(|t| crps(&pred.column(t), observed[t])).collect::<Result<_>>()?;
    let exc: Vec<usize> = (0..observed.len()).filter(|&t| observed[t] > 0.0).collect();
    let sub = |v: &[f64]| exc.iter().map(|&t| v[t]).collect::<Vec<f64>>();
    let (rmse_e, mae_e, crps_e) = if exc.is_empty() {
        (None, None, None)
    } else {
        let (m, o) = (sub(&means), sub(observed));
        (Some(rmse(&m, &o)?), Some(mae(&m, &o)?), Some(crate::numeric::mean(&sub(&crps_t))))
    };
    let intervals = pred.interval(0.95);
    let covered = intervals.iter().zip(observed).filter(|((lo, hi), o)| **o >= *lo && **o <= *hi).count();
    let indicators: Vec<bool> = observed.iter().map(|v| *v > 0.0).collect();
    Ok(MetricReport {
        site: site.to_string(),
        n_obs: observed.len(),
        n_exceedances: exc.len(),
        rmse: rmse(&means, observed)?,
        mae: mae(&means, observed)?,
        crps: crate::numeric::mean(&crps_t),
        rmse_exceedances: rmse_e,
        mae_exceedances: mae_e,
        crps_exceedances: crps_e,
        classification: classification_metrics(&pred.exceed_prob, &indicators, cutoff)?,
        coverage95: covered as f64 / observed.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_crps(x: &[f64], y: f64) -> f64 {
        let n = x.len() as f64;
        let a: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
        let b: f64 = x.iter().flat_map(|u| x.iter().map(move |v| (u - v).abs())).sum::<f64>() / (n * n);
        a - 0.5 * b
    }

    #[test]
    fn crps_matches_pair_sum() {
        let x = [3.0, -1.0, 0.5, 7.25, 2.0, 2.0];
        for y in [-2.0, 0.0, 2.0, 10.0] {
            assert!((crps(&x, y).unwrap() - brute_crps(&x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_draws() {
        assert!(crps(&[1.0], 0.0).is_err());
    }
}
