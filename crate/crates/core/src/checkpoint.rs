//! Binary parameter checkpoints.
//!
//! Layout (little endian): the 8-byte magic, a `u32` format version, the run
//! configuration as UTF-8 TOML (`u32` length prefix), then a `u32` array count
//! and for each array its name (`u32` length prefix), `u32` rows, `u32` cols and
//! `rows * cols` `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::envs::EnvError;
use crate::linalg::Matrix;
use crate::policy::PolicyParams;

const MAGIC: &[u8; 8] = b"NTNNRCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint environment: {0}")]
    Env(#[from] EnvError),
    #[error("checkpoint does not match the network: {0}")]
    Shape(String),
}

pub struct Checkpoint {
    pub config: TrainConfig,
    pub arrays: Vec<(String, Matrix)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(config: &TrainConfig, params: &PolicyParams) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = config.to_toml_string();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, params.tensors().len())?;
    for (name, m) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = TrainConfig::from_toml_str(&c.string()?)?;
    let count = c.u32()?;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = c.string()?;
        let (rows, cols) = (c.u32()?, c.u32()?);
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Corrupt(format!("array `{name}` is too large")))?;
        let raw = c.take(len.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| CheckpointError::Corrupt(format!("array `{name}`: {e}")))?;
        arrays.push((name, m));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { config, arrays })
}

pub fn save(path: &Path, config: &TrainConfig, params: &PolicyParams) -> Result<(), CheckpointError> {
    let bytes = encode(config, params)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

impl Checkpoint {
    /// Builds the network described by `config` (the stored one when `None`) and
    /// fills it with the stored arrays.
    pub fn into_params(self, config: Option<&TrainConfig>) -> Result<(TrainConfig, PolicyParams), CheckpointError> {
        let config = config.cloned().unwrap_or(self.config);
        let env = config.env_config().build()?;
        let mut params = PolicyParams::init(config.policy_config(env.obs_dim(), env.n_actions()), 0);
        params.load_tensors(self.arrays).map_err(CheckpointError::Shape)?;
        Ok((config, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = TrainConfig::desk_pp();
        let mut params = PolicyParams::init(config.policy_config(20, 5), 3);
        params.tensors_mut()[0].set(0, 0, 0.1 + 0.2);
        params.tensors_mut()[1].set(0, 0, -0.0);
        let bytes = encode(&config, &params).unwrap();
        let (back_cfg, back) = decode(&bytes).unwrap().into_params(None).unwrap();
        assert_eq!(back_cfg, config);
        for (a, b) in params.tensors().iter().zip(back.tensors()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn detects_corruption_and_mismatch() {
        let config = TrainConfig::desk_pp();
        let params = PolicyParams::init(config.policy_config(20, 5), 3);
        let bytes = encode(&config, &params).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(decode(b"garbage!"), Err(CheckpointError::BadMagic)));
        let mut other = config.clone();
        other.hidden = 8;
        let err = decode(&bytes).unwrap().into_params(Some(&other)).err().unwrap();
        assert!(matches!(err, CheckpointError::Shape(_)), "{err}");
    }
}
