//! Estimator files.
//!
//! little-endian:
//!   "MCRE" | version u32 | kind u8 (0 sentence, 1 prefix) | gamma_max f64
//!   | V u32 | embed_dim u32 | n_convs u32 | (filters u32, kernel u32) × n_convs
//!   | n_params u64 | params f64 × n_params (declaration order)

use std::fs;
use std::path::Path;

use super::cnn::{Arch, ConvSpec, Network};
use super::{PrefixRatioEstimator, RatioEstimator};
use crate::error::{Error, Result};
use crate::lm::Reader;

const MAGIC: &[u8; 4] = b"MCRE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Sentence,
    Prefix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorFile {
    Sentence(RatioEstimator),
    Prefix(PrefixRatioEstimator),
}

impl EstimatorFile {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            EstimatorFile::Sentence(_) => EstimatorKind::Sentence,
            EstimatorFile::Prefix(_) => EstimatorKind::Prefix,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, net, gamma_max) = match self {
            EstimatorFile::Sentence(e) => (0u8, e.network(), e.gamma_max()),
            EstimatorFile::Prefix(e) => (1u8, e.network(), e.gamma_max()),
        };
        let arch = net.arch();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(kind);
        out.extend_from_slice(&gamma_max.to_le_bytes());
        out.extend_from_slice(&(arch.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(arch.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&(arch.convs.len() as u32).to_le_bytes());
        for c in &arch.convs {
            out.extend_from_slice(&(c.filters as u32).to_le_bytes());
            out.extend_from_slice(&(c.kernel as u32).to_le_bytes());
        }
        out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4)? != MAGIC {
            return Err(Error::Format("not an estimator file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported estimator version {version}"
            )));
        }
        let kind = r.u8()?;
        let gamma_max = r.f64()?;
        let vocab_size = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let n_convs = r.u32()? as usize;
        if n_convs > 64 {
            return Err(Error::Format("implausible number of convolutions".into()));
        }
        let mut convs = Vec::with_capacity(n_convs);
        for _ in 0..n_convs {
            let filters = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            convs.push(ConvSpec { filters, kernel });
        }
        let arch = Arch {
            vocab_size,
            embed_dim,
            convs,
        };
        let n = r.u64()? as usize;
        if n != arch.param_count() {
            return Err(Error::Format(format!(
                "parameter count {n} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let net = Network::from_params(arch, params).expect("count checked");
        match kind {
            0 => Ok(EstimatorFile::Sentence(RatioEstimator::new(net, gamma_max))),
            1 => Ok(EstimatorFile::Prefix(PrefixRatioEstimator::new(
                net, gamma_max,
            ))),
            k => Err(Error::Format(format!("unknown estimator kind {k}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_estimator_file(path: impl AsRef<Path>) -> Result<EstimatorFile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    EstimatorFile::from_bytes(&buf)
}
