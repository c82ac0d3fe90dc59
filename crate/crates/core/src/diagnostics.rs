//! Convergence diagnostics across chains.

use serde::Serialize;

use crate::archive::PosteriorArchive;
use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::numeric::{mean, sample_variance};

/// Potential scale reduction of already-split sequences of equal length.
fn rhat_of_sequences(seqs: &[&[f64]]) -> Result<f64> {
    let k = seqs.len();
    let n = seqs[0].len();
    if k < 2 || n < 2 || seqs.iter().any(|s| s.len() != n) {
        return Err(Error::Input("R-hat needs at least two sequences of equal length >= 2".into()));
    }
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let w = mean(&seqs.iter().map(|s| sample_variance(s)).collect::<Vec<_>>());
    if !(w > 0.0) {
        return Err(Error::Degenerate("zero within-chain variance".into()));
    }
    let b = n as f64 * sample_variance(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Ok((var_plus / w).sqrt())
}

/// Split-R̂: every chain is cut into its first and second half (a middle
/// draw is dropped when the length is odd) and the between/within variance
/// ratio is computed over the halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Input(format!("R-hat needs at least 2 chains, got {}", chains.len())));
    }
    let len = chains[0].len();
    if len < 10 || chains.iter().any(|c| c.len() != len) {
        return Err(Error::Input("R-hat needs chains of equal length >= 10".into()));
    }
    let half = len / 2;
    let seqs: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[len - half..]]).collect();
    rhat_of_sequences(&seqs)
}

/// Split-R̂ of parameter `index` of an archive.
pub fn gelman_rubin(archive: &PosteriorArchive, index: usize) -> Result<f64> {
    if index >= archive.dim() {
        return Err(Error::Input(format!("parameter index {index} out of range")));
    }
    let chains: Vec<Vec<f64>> = (0..archive.n_chains()).map(|c| archive.series(c, index)).collect();
    split_rhat(&chains)
}

/// Worst R̂ over one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRhat {
    pub group: String,
    pub n_params: usize,
    pub max_rhat: f64,
    pub worst_param: String,
    /// Parameters whose chains never moved.
    pub degenerate: Vec<String>,
}

pub fn group_rhat(archive: &PosteriorArchive, group: ParamGroup) -> Result<GroupRhat> {
    let range = archive
        .group_range(group)
        .ok_or_else(|| Error::Input(format!("archive has no parameter group {}", group.name())))?;
    let names = archive.header.layout.names(&archive.site_ids());
    let mut out = GroupRhat {
        group: group.name().to_string(),
        n_params: range.len(),
        max_rhat: f64::NAN,
        worst_param: String::new(),
        degenerate: Vec::new(),
    };
    for idx in range {
        match gelman_rubin(archive, idx) {
            Ok(r) => {
                if !(r <= out.max_rhat) {
                    out.max_rhat = r;
                    out.worst_param = names[idx].clone();
                }
            }
            Err(Error::Degenerate(_)) => out.degenerate.push(names[idx].clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// R̂ summaries for every group of the archive's layout.
pub fn all_group_rhat(archive: &PosteriorArchive) -> Result<Vec<GroupRhat>> {
    archive.header.layout.groups.iter().map(|g| group_rhat(archive, g.0)).collect()
}

/// Largest finite R̂ over all parameters (NaN when none is finite).
pub fn max_rhat(archive: &PosteriorArchive) -> Result<f64> {
    let groups = all_group_rhat(archive)?;
    Ok(groups.iter().map(|g| g.max_rhat).filter(|r| r.is_finite()).fold(f64::NAN, f64::max))
}
