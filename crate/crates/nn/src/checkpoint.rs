//! FWLM checkpoints.
//!
//! Layout (little endian): `b"FWLM"`, `u32` version, `u32` length + UTF-8
//! TOML of the model config, `u32` parameter count, then per parameter:
//! `u32` name length + name, `u32` rank, `u32` dims, `f32` values.

use std::path::Path;

use crate::error::{NnError, Result};
use crate::model::{MaeConfig, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FWLM";
const VERSION: u32 = 1;

pub fn encode_model(model: &Model) -> Vec<u8> {
    let cfg = toml::to_string(&model.cfg).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let p = &model.params;
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for i in 0..p.len() {
        let name = p.name(i).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let t = p.get(i);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, reason: impl Into<String>) -> NnError {
        NnError::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_str(&mut self, n: usize, what: &str) -> Result<String> {
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("not an FWLM checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let text = r.take_str(n, "config")?;
    let cfg: MaeConfig = toml::from_str(&text).map_err(|e| r.err(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.take_str(len, "parameter name")?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after parameters"));
    }
    Model::from_params(cfg, params)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path)?, path)
}
