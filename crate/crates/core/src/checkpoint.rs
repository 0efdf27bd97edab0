//! Parameter checkpoints.
//!
//! Little-endian layout: magic `STLGCKPT`, `u32` format version, `u32` video
//! feature dimension, `u32` word dimension, `u32` byte length of the UTF-8
//! TOML training config followed by the config text, `u32` tensor count, then
//! per tensor `u32` name length, UTF-8 name, `u32` rows, `u32` columns and
//! `rows * columns` `f64` values row-major.

use std::fs;
use std::path::Path;

use crate::autograd::Matrix;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::GroundingModel;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"STLGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub video_dim: usize,
    pub word_dim: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, model: &GroundingModel, params: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            video_dim: model.config.video_dim,
            word_dim: model.config.word_dim,
            params: params.clone(),
        }
    }

    /// Rebuilds the architecture and loads the stored parameters into it.
    pub fn model(&self) -> Result<(GroundingModel, ParamStore)> {
        let (model, mut store) =
            GroundingModel::new(self.config.model_config(self.video_dim, self.word_dim), self.config.seed)?;
        let named = self.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        store.load_values(named)?;
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put(&mut out, self.video_dim);
        put(&mut out, self.word_dim);
        let config = self.config.to_toml();
        put(&mut out, config.len());
        out.extend_from_slice(config.as_bytes());
        put(&mut out, self.params.len());
        for (name, value) in self.params.iter() {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put(&mut out, value.nrows());
            put(&mut out, value.ncols());
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let video_dim = r.u32()? as usize;
        let word_dim = r.u32()? as usize;
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?).map_err(|e| Error::format(path, e.to_string()))?;
        let config = TrainConfig::from_toml_str(text)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format(path, e.to_string()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Matrix::from_shape_vec((rows, cols), values).map_err(|e| Error::format(path, e.to_string()))?;
            params.insert(name, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            config,
            video_dim,
            word_dim,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
