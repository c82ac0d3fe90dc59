//! Posterior draw archives.
//!
//! Binary layout: the 8-byte magic `EXDFPOST`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! draw as little-endian `f64`, chain-major. The header holds everything a
//! later `predict` needs besides the draws themselves and nothing that varies
//! between identical runs (no timestamps, no thread counts).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamGroup, ParamLayout, ParameterState};
use crate::posterior::SiteMeta;

const MAGIC: &[u8; 8] = b"EXDFPOST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Exceedance,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    /// Total iterations per chain, burn-in included.
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { n_iter: 500_000, burn_in: 100_000, thin: 100, n_chains: 2, seed: 1 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.thin == 0 {
            return Err(Error::Config("n_chains and thin must be positive".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Post-burn-in acceptance rate of one block in one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub chain: usize,
    pub block: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    pub model: ModelKind,
    pub spec: ModelSpec,
    pub basis: BasisSpec,
    pub sites: Vec<SiteMeta>,
    pub layout: ParamLayout,
    pub mcmc: McmcConfig,
    pub draws_per_chain: usize,
    pub acceptance: Vec<BlockAcceptance>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorArchive {
    pub header: ArchiveHeader,
    /// One flat `draws_per_chain x dim` buffer per chain.
    pub chains: Vec<Vec<f64>>,
}

impl PosteriorArchive {
    pub fn dim(&self) -> usize {
        self.header.layout.dim()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.header.draws_per_chain
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains() * self.draws_per_chain()
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.header.sites.iter().map(|s| s.id.clone()).collect()
    }

    pub fn draw(&self, chain: usize, k: usize) -> &[f64] {
        let d = self.dim();
        &self.chains[chain][k * d..(k + 1) * d]
    }

    /// Pooled draw `k` in chain-major order.
    pub fn pooled(&self, k: usize) -> &[f64] {
        let n = self.draws_per_chain();
        self.draw(k / n, k % n)
    }

    pub fn state(&self, chain: usize, k: usize) -> Result<ParameterState> {
        if self.header.model != ModelKind::Exceedance {
            return Err(Error::Input("archive does not hold exceedance-model draws".into()));
        }
        ParameterState::unflatten(self.draw(chain, k), self.header.layout.n_sites, self.header.layout.m)
    }

    /// Trace of parameter `index` in one chain.
    pub fn series(&self, chain: usize, index: usize) -> Vec<f64> {
        let d = self.dim();
        self.chains[chain].iter().skip(index).step_by(d).copied().collect()
    }

    /// Posterior mean of parameter `index` over all chains.
    pub fn mean(&self, index: usize) -> f64 {
        let all: Vec<f64> = (0..self.n_chains()).flat_map(|c| self.series(c, index)).collect();
        crate::numeric::mean(&all)
    }

    pub fn group_range(&self, group: ParamGroup) -> Option<std::ops::Range<usize>> {
        self.header.layout.range(group)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.draws_per_chain() * self.dim();
        if self.chains.iter().any(|c| c.len() != expected) {
            return Err(Error::Archive("chain buffers do not match the header layout".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * 4096);
        for chain in &self.chains {
            for chunk in chain.chunks(4096) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::Archive("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Archive("not a posterior archive (bad magic)".into()));
        }
        let mut v4 = [0u8; 4];
        input.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != FORMAT_VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let mut v8 = [0u8; 8];
        input.read_exact(&mut v8)?;
        let len = u64::from_le_bytes(v8) as usize;
        if len > 1 << 30 {
            return Err(Error::Archive("implausible header length".into()));
        }
        let mut header = vec![0u8; len];
        input.read_exact(&mut header).map_err(|_| Error::Archive("truncated header".into()))?;
        let header: ArchiveHeader = serde_json::from_slice(&header)?;
        let per_chain = header.draws_per_chain * header.layout.dim();
        let mut chains = Vec::with_capacity(header.mcmc.n_chains);
        let mut bytes = vec![0u8; per_chain * 8];
        for _ in 0..header.mcmc.n_chains {
            input.read_exact(&mut bytes).map_err(|_| Error::Archive("truncated draw block".into()))?;
            chains.push(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect());
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Archive("trailing bytes after draws".into()));
        }
        Ok(Self { header, chains })
    }

    /// Write atomically: a sibling temporary file renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// CSV with columns `chain,draw,<parameter names>`.
    pub fn export_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["chain".to_string(), "draw".to_string()];
        head.extend(self.header.layout.names(&self.site_ids()));
        w.write_record(&head)?;
        for c in 0..self.n_chains() {
            for k in 0..self.draws_per_chain() {
                let mut rec = vec![c.to_string(), k.to_string()];
                rec.extend(self.draw(c, k).iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Run `write` against a temporary file next to `path`, then rename it into
/// place so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let f = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(f);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}
