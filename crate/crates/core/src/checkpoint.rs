//! Checkpoint file format.
//!
//! ```text
//! magic "BMNCK1"
//! version           u32
//! header length     u32, then that many bytes of JSON (configs, step, epoch)
//! tensor count      u32
//! per tensor        rows u32, cols u32, rows * cols f64
//! ```
//!
//! All integers and floats are little-endian. Tensors follow
//! [`ModelParams::tensors`] order. The loader rebuilds the expected shape
//! chain from the stored model config and rejects any deviation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::target::TargetSpec;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BMNCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub target: TargetSpec,
    pub train: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    /// The warm-up fallback was still in use when this was written.
    pub warmup_active: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    target: TargetSpec,
    train: TrainConfig,
    step: u64,
    epoch: u64,
    #[serde(default)]
    warmup_active: bool,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.params.config.clone(),
            target: self.target,
            train: self.train.clone(),
            step: self.step,
            epoch: self.epoch,
            warmup_active: self.warmup_active,
        })
        .map_err(|e| Error::Corrupt(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(18 + header.len() + 8 * self.params.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.tensors().count() as u32).to_le_bytes());
        for t in self.params.tensors() {
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(6, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:?}, expected \"BMNCK1\"", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header_offset = r.offset();
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Format {
            offset: header_offset,
            detail: format!("invalid header: {e}"),
        })?;
        header.model.validate()?;
        header.target.validate()?;

        let mut params = ModelParams::zeros(&header.model)?;
        let expected: Vec<(usize, usize)> = params.tensors().map(Matrix::shape).collect();
        let count = r.u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(Error::Corrupt(format!(
                "{count} tensors stored, the model config implies {}",
                expected.len()
            )));
        }
        for (i, slot) in params.tensors_mut().enumerate() {
            let rows = r.u32("tensor rows")? as usize;
            let cols = r.u32("tensor cols")? as usize;
            if (rows, cols) != expected[i] {
                return Err(Error::Corrupt(format!(
                    "tensor {i} is {rows}x{cols}, the shape chain requires {}x{}",
                    expected[i].0, expected[i].1
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f64(&format!("tensor {i}"))?);
            }
            *slot = Matrix::new(rows, cols, data)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.offset(),
                detail: format!("{} trailing bytes after the last tensor", r.remaining()),
            });
        }
        if let Some((i, t)) = params.tensors().enumerate().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Corrupt(format!(
                "tensor {i} holds a non-finite value at entry {}",
                t.first_non_finite().unwrap_or(0)
            )));
        }
        Ok(Self {
            params,
            target: header.target,
            train: header.train,
            step: header.step,
            epoch: header.epoch,
            warmup_active: header.warmup_active,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored architecture is the one `expected` describes.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let stored: Vec<_> = ckpt.params.tensors().map(Matrix::shape).collect();
        let wanted: Vec<_> = ModelParams::zeros(expected)?.tensors().map(Matrix::shape).collect();
        if stored != wanted {
            return Err(Error::shape(
                "load_checkpoint",
                format!(
                    "checkpoint has d = {}, p = {}, input_dim = {}; config demands d = {}, p = {}, input_dim = {}",
                    ckpt.params.config.d,
                    ckpt.params.config.p,
                    ckpt.params.config.input_dim,
                    expected.d,
                    expected.p,
                    expected.input_dim
                ),
            ));
        }
        Ok(ckpt)
    }
}
