//! Binary checkpoint format.
//!
//! ```text
//! "OMST" | version u32 | count u32 |
//!   count × { name_len u16 | name utf-8 | rank u8 | dims u64 × rank | dtype u8 | payload }
//! | config_len u32 | config json
//! ```
//!
//! Integers and payloads are little-endian. Dtype tag 0 is f32, 1 is f64.
//! The trailing config block is optional when reading (a file may end right
//! after the last tensor).

use std::collections::HashSet;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::{DType, Scalar, Tensor};
use crate::params::ParamTree;

use super::config::{EngineConfig, ModelParams};

pub const MAGIC: [u8; 4] = *b"OMST";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    /// Values widened to f64, which is exact for both stored dtypes.
    pub tensor: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
    pub config: Option<EngineConfig>,
}

pub fn encode<S: Scalar, P: ParamTree<S>>(params: &P, config: Option<&EngineConfig>) -> Result<Vec<u8>> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    let mut seen = HashSet::new();
    for (name, t) in named {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Name(format!("`{name}` is too long")))?;
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateTensor(name).into());
        }
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Name(format!("`{name}` has rank {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(S::DTYPE.tag());
        out.reserve(t.len() * S::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let json = config.map(|c| serde_json::to_string(c).expect("config serializes")).unwrap_or_default();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what()).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: impl FnOnce() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.try_into().expect("4 bytes")).into());
    }
    let version = r.u32(|| "version".into())?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let count = r.u32(|| "tensor count".into())? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u16(|| format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, || format!("name of tensor {i}"))?)
            .map_err(|_| CheckpointError::Name(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateTensor(name).into());
        }
        let rank = r.u8(|| format!("rank of `{name}`"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64(|| format!("dims of `{name}`"))?;
            dims.push(usize::try_from(d).map_err(|_| CheckpointError::Truncated(format!("dims of `{name}`")))?);
        }
        let tag = r.u8(|| format!("dtype of `{name}`"))?;
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Dtype { name: name.clone(), tag })?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| CheckpointError::Truncated(format!("payload of `{name}`")))?;
        let payload = r.take(n, || format!("payload of `{name}`"))?;
        let data: Vec<f64> = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => payload.chunks_exact(8).map(f64::read_le).collect(),
        };
        tensors.push(StoredTensor {
            tensor: Tensor::new(dims, data)?,
            name,
            dtype,
        });
    }
    let config = if r.pos == bytes.len() {
        None
    } else {
        let len = r.u32(|| "config length".into())? as usize;
        let text = r.take(len, || "config".into())?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Config(format!("{} stray bytes after the config", bytes.len() - r.pos)).into());
        }
        if len == 0 {
            None
        } else {
            let text = std::str::from_utf8(text).map_err(|_| CheckpointError::Config("not UTF-8".into()))?;
            Some(serde_json::from_str(text).map_err(|e| CheckpointError::Config(e.to_string()))?)
        }
    };
    Ok(Checkpoint { tensors, config })
}

impl Checkpoint {
    /// Copies the stored tensors into `template`, which fixes the expected
    /// names and shapes. Every expected tensor must be present exactly once.
    pub fn fill<S: Scalar, P: ParamTree<S>>(&self, mut template: P) -> Result<P> {
        let expected: HashSet<String> = template.named().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = self.tensors.iter().find(|t| !expected.contains(&t.name)) {
            return Err(CheckpointError::UnexpectedTensor(extra.name.clone()).into());
        }
        for (name, slot) in template.named_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if stored.tensor.dims() != slot.dims() {
                return Err(CheckpointError::TensorShape {
                    name,
                    found: stored.tensor.dims().to_vec(),
                    expected: slot.dims().to_vec(),
                }
                .into());
            }
            *slot = stored.tensor.cast();
        }
        Ok(template)
    }
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, params: &ModelParams<S>, config: &EngineConfig) -> Result<()> {
    params.validate(config)?;
    std::fs::write(path, encode(params, Some(config))?)?;
    Ok(())
}

/// Loads parameters shaped by `config`.
pub fn load<S: Scalar>(path: impl AsRef<Path>, config: &EngineConfig) -> Result<ModelParams<S>> {
    decode(&std::fs::read(path)?)?.fill(ModelParams::init(config, 0)?)
}

/// Loads parameters using the config stored in the file.
pub fn load_with_config<S: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<S>, EngineConfig)> {
    let ckpt = decode(&std::fs::read(path)?)?;
    let config = ckpt
        .config
        .clone()
        .ok_or_else(|| Error::from(CheckpointError::Config("file carries no config".into())))?;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok((ckpt.fill(ModelParams::init(&config, 0)?)?, config))
}
