//! Multi-chain adaptive block Metropolis–Hastings for the exceedance model.
//!
//! Blocks per sweep: `c_i`, `d_i`, `lambda_i` for every site, the `alpha` and
//! `beta` columns for every basis coordinate, the two shapes, then the three
//! variances on the log scale. Each block keeps cached log-density pieces so
//! that a proposal only re-evaluates the terms it touches.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::archive::{ArchiveHeader, BlockAcceptance, McmcConfig, ModelKind, PosteriorArchive, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::extremes::{fit_gpd, inverse_gamma_logpdf, laplace_logprior, normal_logpdf};
use crate::mh::{accept, AdaptiveProposal};
use crate::model::{ModelSpec, ParamLayout, ParameterState};
use crate::numeric::stable_sum;
use crate::par;
use crate::posterior::{
    bernoulli_sum, d_prior_sum, exceedance_gpd_sum, fit_log_scale, lambda_prior_sum, link_sum, FusionData,
};
use crate::rng::{stream, Purpose, StreamRng};

const SHAPE_CLIP: f64 = 0.45;

/// Deterministic starting point: per-site maximum-likelihood scales refined
/// to time-varying curves at a pooled shape; `alpha = 0`, `beta = 1`,
/// `lambda = 0`.
pub fn initial_state(data: &FusionData) -> Result<ParameterState> {
    let m = data.basis.m;
    let pooled = |side_y: bool| -> (f64, f64) {
        let z: Vec<f64> = data
            .sites
            .iter()
            .flat_map(|s| if side_y { &s.y_exc } else { &s.x_exc }.iter().map(|r| r.1))
            .collect();
        match fit_gpd(&z, -SHAPE_CLIP, SHAPE_CLIP) {
            Ok(p) => (p.scale, p.shape.clamp(-SHAPE_CLIP, SHAPE_CLIP)),
            Err(_) => (crate::numeric::mean(&z).max(1e-3).min(1e6).max(1.0), 0.0),
        }
    };
    let (scale_y, xi_y) = pooled(true);
    let (scale_x, xi_x) = pooled(false);
    let curve = |rows: &[(crate::basis::BasisRow, f64)], pooled_scale: f64, xi: f64| -> Result<Vec<f64>> {
        let z: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let level = if z.len() >= 10 {
            fit_gpd(&z, -SHAPE_CLIP, SHAPE_CLIP).map(|p| p.scale).unwrap_or(pooled_scale)
        } else {
            pooled_scale
        };
        let centre = vec![level.ln(); m];
        fit_log_scale(rows, m, xi, &centre, 1.0, Some(&centre))
    };
    let mut c = Vec::with_capacity(data.n_sites());
    let mut d = Vec::with_capacity(data.n_sites());
    for s in &data.sites {
        c.push(curve(&s.y_exc, scale_y, xi_y)?);
        d.push(curve(&s.x_exc, scale_x, xi_x)?);
    }
    let n = data.n_sites();
    let resid: Vec<f64> = c.iter().zip(&d).flat_map(|(ci, di)| ci.iter().zip(di).map(|(a, b)| (a - b) * (a - b))).collect();
    let sigma2_c = crate::numeric::mean(&resid).max(0.01);
    let state = ParameterState {
        c,
        d,
        alpha: vec![vec![0.0; m]; n],
        beta: vec![vec![1.0; m]; n],
        lambda: vec![[0.0; 4]; n],
        xi_y,
        xi_x,
        sigma2_c,
        sigma2_alpha: 1.0,
        sigma2_beta: 1.0,
    };
    Ok(state)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Randomised chain start around `base`, retried until the posterior is finite.
pub fn jittered_start(
    base: &ParameterState,
    data: &FusionData,
    spec: &ModelSpec,
    rng: &mut StreamRng,
) -> Result<ParameterState> {
    let mut scale = 1.0;
    for _ in 0..40 {
        let mut s = base.clone();
        let mut perturb = |rows: &mut Vec<Vec<f64>>, sd: f64| {
            for row in rows.iter_mut() {
                for v in row.iter_mut() {
                    *v += sd * scale * normal(rng);
                }
            }
        };
        perturb(&mut s.c, 0.1);
        perturb(&mut s.d, 0.1);
        perturb(&mut s.alpha, 0.1);
        perturb(&mut s.beta, 0.1);
        for l in s.lambda.iter_mut() {
            for v in l.iter_mut() {
                *v += 0.2 * scale * normal(rng);
            }
        }
        s.xi_y = (s.xi_y + 0.05 * scale * (2.0 * rng.gen::<f64>() - 1.0)).clamp(-SHAPE_CLIP, SHAPE_CLIP);
        s.xi_x = (s.xi_x + 0.05 * scale * (2.0 * rng.gen::<f64>() - 1.0)).clamp(-SHAPE_CLIP, SHAPE_CLIP);
        s.sigma2_c *= (0.2 * scale * normal(rng)).exp();
        s.sigma2_alpha *= (0.2 * scale * normal(rng)).exp();
        s.sigma2_beta *= (0.2 * scale * normal(rng)).exp();
        if crate::posterior::log_posterior(&s, data, spec)?.is_finite() {
            return Ok(s);
        }
        scale *= 0.7;
    }
    if crate::posterior::log_posterior(base, data, spec)?.is_finite() {
        Ok(base.clone())
    } else {
        Err(Error::Numerical("could not find a starting point with finite posterior density".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    C(usize),
    D(usize),
    Lambda(usize),
    Alpha(usize),
    Beta(usize),
    XiY,
    XiX,
    LogSigma2C,
    LogSigma2Alpha,
    LogSigma2Beta,
}

/// One chain: current state, cached log-density pieces, and per-block proposals.
pub struct Chain<'a> {
    data: &'a FusionData,
    spec: &'a ModelSpec,
    pub state: ParameterState,
    blocks: Vec<(Block, AdaptiveProposal)>,
    rng: StreamRng,
    y_gpd: Vec<f64>,
    x_gpd: Vec<f64>,
    bern: Vec<f64>,
    link: Vec<f64>,
    quad_alpha: Vec<f64>,
    quad_beta: Vec<f64>,
    cur: Vec<f64>,
    cand: Vec<f64>,
}

impl<'a> Chain<'a> {
    pub fn new(data: &'a FusionData, spec: &'a ModelSpec, state: ParameterState, rng: StreamRng) -> Result<Self> {
        let (n, m) = (data.n_sites(), data.basis.m);
        state.validate(n, m)?;
        let mut blocks = Vec::new();
        let step_m = 0.1 / (m as f64).sqrt();
        for i in 0..n {
            blocks.push((Block::C(i), AdaptiveProposal::new(m, step_m)));
            blocks.push((Block::D(i), AdaptiveProposal::new(m, step_m)));
            blocks.push((Block::Lambda(i), AdaptiveProposal::new(4, 0.1)));
        }
        for r in 0..m {
            blocks.push((Block::Alpha(r), AdaptiveProposal::new(n, 0.1 / (n as f64).sqrt())));
            blocks.push((Block::Beta(r), AdaptiveProposal::new(n, 0.1 / (n as f64).sqrt())));
        }
        blocks.push((Block::XiY, AdaptiveProposal::new(1, 0.02)));
        blocks.push((Block::XiX, AdaptiveProposal::new(1, 0.02)));
        blocks.push((Block::LogSigma2C, AdaptiveProposal::new(1, 0.2)));
        blocks.push((Block::LogSigma2Alpha, AdaptiveProposal::new(1, 0.2)));
        blocks.push((Block::LogSigma2Beta, AdaptiveProposal::new(1, 0.2)));
        let mut chain = Self {
            data,
            spec,
            state,
            blocks,
            rng,
            y_gpd: vec![0.0; n],
            x_gpd: vec![0.0; n],
            bern: vec![0.0; n],
            link: vec![0.0; n],
            quad_alpha: vec![0.0; m],
            quad_beta: vec![0.0; m],
            cur: Vec::with_capacity(n.max(m).max(4)),
            cand: Vec::with_capacity(n.max(m).max(4)),
        };
        chain.refresh_caches();
        Ok(chain)
    }

    fn refresh_caches(&mut self) {
        let s = &self.state;
        for (i, site) in self.data.sites.iter().enumerate() {
            self.y_gpd[i] = exceedance_gpd_sum(&site.y_exc, &s.c[i], s.xi_y);
            self.x_gpd[i] = exceedance_gpd_sum(&site.x_exc, &s.d[i], s.xi_x);
            self.bern[i] = bernoulli_sum(&site.pattern_counts, &s.lambda[i]);
            self.link[i] = link_sum(&s.c[i], &s.alpha[i], &s.beta[i], &s.d[i], s.sigma2_c);
        }
        for r in 0..self.data.basis.m {
            self.quad_alpha[r] = self.data.gp_alpha.quad_form(&ParameterState::column(&s.alpha, r));
            let b: Vec<f64> = s.beta.iter().map(|row| row[r] - 1.0).collect();
            self.quad_beta[r] = self.data.gp_beta.quad_form(&b);
        }
    }

    /// Proposal snapshots of every block, in sweep order.
    pub fn proposal_snapshot(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.1.snapshot()).collect()
    }

    pub fn freeze(&mut self) {
        for b in &mut self.blocks {
            b.1.freeze();
        }
    }

    /// Post-freeze acceptance rate of every block, labelled.
    pub fn acceptance(&self) -> Vec<(String, f64, u64)> {
        self.blocks
            .iter()
            .map(|(b, p)| (self.block_label(*b), p.acceptance_rate(), p.counts().1))
            .collect()
    }

    fn block_label(&self, b: Block) -> String {
        let id = |i: usize| &self.data.sites[i].id;
        match b {
            Block::C(i) => format!("c[{}]", id(i)),
            Block::D(i) => format!("d[{}]", id(i)),
            Block::Lambda(i) => format!("lambda[{}]", id(i)),
            Block::Alpha(r) => format!("alpha[,{}]", r + 1),
            Block::Beta(r) => format!("beta[,{}]", r + 1),
            Block::XiY => "xi_y".into(),
            Block::XiX => "xi_x".into(),
            Block::LogSigma2C => "sigma2_c".into(),
            Block::LogSigma2Alpha => "sigma2_alpha".into(),
            Block::LogSigma2Beta => "sigma2_beta".into(),
        }
    }

    /// One full sweep over all blocks.
    pub fn sweep(&mut self) {
        for k in 0..self.blocks.len() {
            let block = self.blocks[k].0;
            self.update(k, block);
        }
    }

    fn load_current(&mut self, block: Block) {
        let s = &self.state;
        self.cur.clear();
        match block {
            Block::C(i) => self.cur.extend_from_slice(&s.c[i]),
            Block::D(i) => self.cur.extend_from_slice(&s.d[i]),
            Block::Lambda(i) => self.cur.extend_from_slice(&s.lambda[i]),
            Block::Alpha(r) => self.cur.extend(s.alpha.iter().map(|row| row[r])),
            Block::Beta(r) => self.cur.extend(s.beta.iter().map(|row| row[r])),
            Block::XiY => self.cur.push(s.xi_y),
            Block::XiX => self.cur.push(s.xi_x),
            Block::LogSigma2C => self.cur.push(s.sigma2_c.ln()),
            Block::LogSigma2Alpha => self.cur.push(s.sigma2_alpha.ln()),
            Block::LogSigma2Beta => self.cur.push(s.sigma2_beta.ln()),
        }
    }

    fn update(&mut self, k: usize, block: Block) {
        self.load_current(block);
        self.cand.clear();
        self.cand.resize(self.cur.len(), 0.0);
        self.blocks[k].1.propose(&self.cur, &mut self.rng, &mut self.cand);
        let data = self.data;
        let spec = self.spec;
        let s = &self.state;
        let cand = &self.cand;
        let ok = match block {
            Block::C(i) => {
                let site = &data.sites[i];
                let ny = exceedance_gpd_sum(&site.y_exc, cand, s.xi_y);
                let nl = link_sum(cand, &s.alpha[i], &s.beta[i], &s.d[i], s.sigma2_c);
                let ratio = (ny + nl) - (self.y_gpd[i] + self.link[i]);
                let ok = accept(ratio, &mut self.rng);
                if ok {
                    self.y_gpd[i] = ny;
                    self.link[i] = nl;
                    self.state.c[i].copy_from_slice(cand);
                }
                ok
            }
            Block::D(i) => {
                let site = &data.sites[i];
                let nx = exceedance_gpd_sum(&site.x_exc, cand, s.xi_x);
                let nl = link_sum(&s.c[i], &s.alpha[i], &s.beta[i], cand, s.sigma2_c);
                let ratio = (nx + nl + d_prior_sum(cand, spec))
                    - (self.x_gpd[i] + self.link[i] + d_prior_sum(&s.d[i], spec));
                let ok = accept(ratio, &mut self.rng);
                if ok {
                    self.x_gpd[i] = nx;
                    self.link[i] = nl;
                    self.state.d[i].copy_from_slice(cand);
                }
                ok
            }
            Block::Lambda(i) => {
                let l = [cand[0], cand[1], cand[2], cand[3]];
                let nb = bernoulli_sum(&data.sites[i].pattern_counts, &l);
                let ratio = (nb + lambda_prior_sum(&l, spec)) - (self.bern[i] + lambda_prior_sum(&s.lambda[i], spec));
                let ok = accept(ratio, &mut self.rng);
                if ok {
                    self.bern[i] = nb;
                    self.state.lambda[i] = l;
                }
                ok
            }
            Block::Alpha(r) | Block::Beta(r) => {
                let is_alpha = matches!(block, Block::Alpha(_));
                let n = data.n_sites();
                let link_delta = stable_sum((0..n).map(|i| {
                    let (a_new, a_old, b_new, b_old) = if is_alpha {
                        (cand[i], s.alpha[i][r], s.beta[i][r], s.beta[i][r])
                    } else {
                        (s.alpha[i][r], s.alpha[i][r], cand[i], s.beta[i][r])
                    };
                    let (c, d) = (s.c[i][r], s.d[i][r]);
                    normal_logpdf(c, a_new + b_new * d, s.sigma2_c) - normal_logpdf(c, a_old + b_old * d, s.sigma2_c)
                }));
                let (q_new, q_old, var) = if is_alpha {
                    (data.gp_alpha.quad_form(cand), self.quad_alpha[r], s.sigma2_alpha)
                } else {
                    let centred: Vec<f64> = cand.iter().map(|v| v - 1.0).collect();
                    (data.gp_beta.quad_form(&centred), self.quad_beta[r], s.sigma2_beta)
                };
                let ratio = link_delta - 0.5 * (q_new - q_old) / var;
                let ok = accept(ratio, &mut self.rng);
                if ok {
                    for i in 0..n {
                        if is_alpha {
                            self.state.alpha[i][r] = cand[i];
                        } else {
                            self.state.beta[i][r] = cand[i];
                        }
                    }
                    if is_alpha {
                        self.quad_alpha[r] = q_new;
                    } else {
                        self.quad_beta[r] = q_new;
                    }
                    let st = &self.state;
                    for i in 0..n {
                        self.link[i] = link_sum(&st.c[i], &st.alpha[i], &st.beta[i], &st.d[i], st.sigma2_c);
                    }
                }
                ok
            }
            Block::XiY | Block::XiX => {
                let is_y = block == Block::XiY;
                let xi = cand[0];
                let prior = if is_y { &spec.xi_y_prior } else { &spec.xi_x_prior };
                let old_xi = if is_y { s.xi_y } else { s.xi_x };
                let lp_new = laplace_logprior(xi, prior).unwrap_or(f64::NEG_INFINITY);
                if lp_new == f64::NEG_INFINITY {
                    let _: f64 = self.rng.gen();
                    false
                } else {
                    let work = data.total_exceedances() * 20;
                    let terms: Vec<f64> = par::map_range_min_work(data.n_sites(), work, |i| {
                        let site = &data.sites[i];
                        if is_y {
                            exceedance_gpd_sum(&site.y_exc, &s.c[i], xi)
                        } else {
                            exceedance_gpd_sum(&site.x_exc, &s.d[i], xi)
                        }
                    });
                    let cache = if is_y { &self.y_gpd } else { &self.x_gpd };
                    let ratio = (stable_sum(terms.iter().copied()) + lp_new)
                        - (stable_sum(cache.iter().copied()) + laplace_logprior(old_xi, prior).unwrap_or(f64::NEG_INFINITY));
                    let ok = accept(ratio, &mut self.rng);
                    if ok {
                        if is_y {
                            self.state.xi_y = xi;
                            self.y_gpd = terms;
                        } else {
                            self.state.xi_x = xi;
                            self.x_gpd = terms;
                        }
                    }
                    ok
                }
            }
            Block::LogSigma2C => {
                let n = data.n_sites();
                let m = data.basis.m;
                let ss = stable_sum((0..n).flat_map(|i| {
                    (0..m).map(move |r| {
                        let e = s.c[i][r] - s.alpha[i][r] - s.beta[i][r] * s.d[i][r];
                        e * e
                    })
                }));
                let count = (n * m) as f64;
                let target = |t: f64| {
                    let v = t.exp();
                    -0.5 * count * t - 0.5 * ss / v + inverse_gamma_logpdf(v, spec.a_c, spec.b_c) + t
                };
                let ok = accept(target(cand[0]) - target(self.cur[0]), &mut self.rng);
                if ok {
                    self.state.sigma2_c = cand[0].exp();
                    let st = &self.state;
                    for i in 0..n {
                        self.link[i] = link_sum(&st.c[i], &st.alpha[i], &st.beta[i], &st.d[i], st.sigma2_c);
                    }
                }
                ok
            }
            Block::LogSigma2Alpha | Block::LogSigma2Beta => {
                let is_alpha = block == Block::LogSigma2Alpha;
                let q: f64 = stable_sum(if is_alpha { &self.quad_alpha } else { &self.quad_beta }.iter().copied());
                let count = (data.n_sites() * data.basis.m) as f64;
                let (a, b) = if is_alpha { (spec.a_alpha, spec.b_alpha) } else { (spec.a_beta, spec.b_beta) };
                let target = |t: f64| {
                    let v = t.exp();
                    -0.5 * count * t - 0.5 * q / v + inverse_gamma_logpdf(v, a, b) + t
                };
                let ok = accept(target(cand[0]) - target(self.cur[0]), &mut self.rng);
                if ok {
                    if is_alpha {
                        self.state.sigma2_alpha = cand[0].exp();
                    } else {
                        self.state.sigma2_beta = cand[0].exp();
                    }
                }
                ok
            }
        };
        if ok {
            std::mem::swap(&mut self.cur, &mut self.cand);
        }
        self.blocks[k].1.record(ok, &self.cur);
    }
}

/// Result of one chain run.
pub struct ChainOutput {
    pub draws: Vec<f64>,
    pub acceptance: Vec<(String, f64, u64)>,
    pub final_proposals: Vec<f64>,
}

/// Run one chain from `start`.
pub fn run_chain(
    data: &FusionData,
    spec: &ModelSpec,
    start: ParameterState,
    cfg: &McmcConfig,
    rng: StreamRng,
) -> Result<ChainOutput> {
    cfg.validate()?;
    let mut chain = Chain::new(data, spec, start, rng)?;
    let per_chain = cfg.draws_per_chain();
    let dim = ParamLayout::exceedance(data.n_sites(), data.basis.m).dim();
    let mut draws = Vec::with_capacity(per_chain * dim);
    let report = (cfg.n_iter / 10).max(1);
    for it in 0..cfg.n_iter {
        if it == cfg.burn_in {
            chain.freeze();
        }
        chain.sweep();
        if it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0 && draws.len() < per_chain * dim {
            draws.extend(chain.state.flatten());
        }
        if (it + 1) % report == 0 {
            log::info!("iteration {}/{}", it + 1, cfg.n_iter);
        }
    }
    Ok(ChainOutput { draws, acceptance: chain.acceptance(), final_proposals: chain.proposal_snapshot() })
}

/// Fit the exceedance model: `n_chains` independent chains, each with its
/// own random stream and randomised start.
pub fn run_mcmc(data: &FusionData, spec: &ModelSpec, cfg: &McmcConfig) -> Result<PosteriorArchive> {
    cfg.validate()?;
    spec.validate()?;
    if spec.m != data.basis.m {
        return Err(Error::Config(format!("spec m = {} but data basis has m = {}", spec.m, data.basis.m)));
    }
    let base = initial_state(data)?;
    let outputs: Vec<Result<ChainOutput>> = par::map_range(cfg.n_chains, |c| {
        let mut init_rng = stream(cfg.seed, Purpose::Init, &[c as u64]);
        let start = jittered_start(&base, data, spec, &mut init_rng)?;
        run_chain(data, spec, start, cfg, stream(cfg.seed, Purpose::Chain, &[c as u64]))
    });
    let mut chains = Vec::with_capacity(cfg.n_chains);
    let mut acceptance = Vec::new();
    let mut warnings = Vec::new();
    for (c, out) in outputs.into_iter().enumerate() {
        let out = out?;
        for (block, rate, proposed) in out.acceptance {
            if proposed > 0 && rate == 0.0 {
                let w = format!("chain {c}: block {block} rejected every proposal after adaptation");
                log::warn!("{w}");
                warnings.push(w);
            }
            acceptance.push(BlockAcceptance { chain: c, block, rate });
        }
        chains.push(out.draws);
    }
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        model: ModelKind::Exceedance,
        spec: spec.clone(),
        basis: data.basis,
        sites: data.site_meta(),
        layout: ParamLayout::exceedance(data.n_sites(), data.basis.m),
        mcmc: *cfg,
        draws_per_chain: cfg.draws_per_chain(),
        acceptance,
        warnings,
    };
    let archive = PosteriorArchive { header, chains };
    archive.validate()?;
    Ok(archive)
}
