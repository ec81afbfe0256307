//! Flat binary weight files.
//!
//! ```text
//! "CAPS"  version:u32le
//! input_dim primary_caps k classes algorithm iterations loss   (u32le each)
//! f64le × (3 + feature + matrices + 4·(classes·k) + 2)
//! ```
//!
//! `algorithm` is 0 for FM agreement and 1 for dynamic routing; `loss` is 0
//! for softmax and 1 for margin. The floats are the margin parameters
//! (λ, m⁺, m⁻), then feature weights, transform matrices, γ, β, running mean,
//! running variance, momentum and ε, in that order.

use std::fs;
use std::path::{Path, PathBuf};

use capsroute_core::capsnet::{
    BatchNorm, CapsError, DeskModel, DeskModelConfig, LossMode, MarginLossParams, RoutingAlgorithm,
};
use capsroute_core::routing::DynamicRoutingConfig;
use capsroute_core::Tensor;

pub const MAGIC: &[u8; 4] = b"CAPS";
pub const VERSION: u32 = 1;
const HEADER_WORDS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{extra} unexpected bytes after the parameters")]
    TrailingBytes { extra: usize },
    #[error("unknown {field} tag {value}")]
    Tag { field: &'static str, value: u32 },
    #[error("dimension {0} does not fit in a u32")]
    Overflow(usize),
    #[error(transparent)]
    Model(#[from] CapsError),
}

fn u32_of(x: usize) -> Result<u32, CheckpointError> {
    u32::try_from(x).map_err(|_| CheckpointError::Overflow(x))
}

pub fn encode(model: &DeskModel) -> Result<Vec<u8>, CheckpointError> {
    let c = &model.config;
    let (algo, iters) = match c.algorithm {
        RoutingAlgorithm::Fm => (0, 0),
        RoutingAlgorithm::Dynamic(d) => (1, u32_of(d.iterations)?),
    };
    let (loss, margin) = match c.loss {
        LossMode::Softmax => (0, MarginLossParams::default()),
        LossMode::Margin(p) => (1, p),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for w in [
        u32_of(c.input_dim)?,
        u32_of(c.primary_caps)?,
        u32_of(c.k)?,
        u32_of(c.classes)?,
        algo,
        iters,
        loss,
    ] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let bn = &model.caps.bn;
    let head = [margin.lambda, margin.m_plus, margin.m_minus];
    let tail = [bn.momentum, bn.eps];
    let floats = head
        .iter()
        .chain(model.feature.data())
        .chain(&model.caps.matrices)
        .chain(&bn.gamma)
        .chain(&bn.beta)
        .chain(&bn.running_mean)
        .chain(&bn.running_var)
        .chain(&tail);
    for x in floats {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8], CheckpointError> {
        let needed = self.at.saturating_add(len);
        let s = self
            .bytes
            .get(self.at..needed)
            .ok_or(CheckpointError::Truncated {
                needed,
                have: self.bytes.len(),
            })?;
        self.at = needed;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, CheckpointError> {
        let b = self.take(count.saturating_mul(8))?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<DeskModel, CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut h = [0u32; HEADER_WORDS];
    for w in &mut h {
        *w = r.u32()?;
    }
    let [input_dim, primary_caps, k, classes, algo, iters, loss] = h;
    let (input_dim, primary_caps, k, classes) = (
        input_dim as usize,
        primary_caps as usize,
        k as usize,
        classes as usize,
    );
    let algorithm = match algo {
        0 => RoutingAlgorithm::Fm,
        1 => RoutingAlgorithm::Dynamic(
            DynamicRoutingConfig::new(iters as usize).map_err(CapsError::from)?,
        ),
        value => {
            return Err(CheckpointError::Tag {
                field: "algorithm",
                value,
            })
        }
    };
    let margin = r.f64s(3)?;
    let loss = match loss {
        0 => LossMode::Softmax,
        1 => LossMode::Margin(MarginLossParams::new(margin[0], margin[1], margin[2])?),
        value => {
            return Err(CheckpointError::Tag {
                field: "loss",
                value,
            })
        }
    };
    let config = DeskModelConfig {
        input_dim,
        primary_caps,
        k,
        classes,
        algorithm,
        loss,
    };
    let width = primary_caps.saturating_mul(k);
    let feature = r.f64s(input_dim.saturating_mul(width))?;
    let matrices = r.f64s(primary_caps.saturating_mul(classes).saturating_mul(k))?;
    let features = classes.saturating_mul(k);
    let gamma = r.f64s(features)?;
    let beta = r.f64s(features)?;
    let running_mean = r.f64s(features)?;
    let running_var = r.f64s(features)?;
    let tail = r.f64s(2)?;
    if r.at != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            extra: bytes.len() - r.at,
        });
    }
    let bn = BatchNorm {
        gamma,
        beta,
        running_mean,
        running_var,
        momentum: tail[0],
        eps: tail[1],
    };
    let feature = Tensor::new(vec![input_dim, width], feature).map_err(CapsError::from)?;
    Ok(DeskModel::from_parts(config, feature, matrices, bn)?)
}

pub fn save(model: &DeskModel, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(model)?).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<DeskModel, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
