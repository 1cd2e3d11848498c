//! `HMAR0001` archive: magic, u32-length JSON model config, u32 tensor count,
//! then per tensor a u32-length UTF-8 name, u32 rank, u32 dims and
//! little-endian f32 values. Running statistics are stored alongside the
//! parameters and recognized by their `running_mean` / `running_var` suffix.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HMAR0001";

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let meta = serde_json::to_vec(model.config())?;
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    put_u32(&mut out, model.params.len() + model.buffers.len())?;
    let mut all: Vec<(&String, &Tensor)> = model.params.iter().chain(model.buffers.iter()).collect();
    all.sort_by(|a, b| a.0.cmp(b.0));
    for (name, t) in all {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor(bytes);
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let meta_len = c.u32()?;
    let config: ModelConfig = serde_json::from_slice(c.take(meta_len)?)?;
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = c.u32()?;
    let (mut params, mut buffers) = (ParamStore::new(), ParamStore::new());
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        let store = if is_buffer(&name) { &mut buffers } else { &mut params };
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t);
    }
    if !c.0.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Model::from_parts(config, params, buffers)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}
