//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DACN" | version | config_len | config text (key = value)
//!        | tensor_count | { name_len | name | rank | dims.. | f32 values.. }*
//! ```
//!
//! Tensors are written in parameter traversal order followed by the
//! batch-norm running statistics. Values are stored as `f32`, so a loaded
//! checkpoint re-serializes to identical bytes.

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{init_params, DacnConfig, DacnParams};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DACN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn named_entries(params: &DacnParams<Tensor>) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, _, t| out.push((name.to_string(), t)));
    for (name, s) in params.norm_states() {
        out.push((format!("{name}.running_mean"), &s.running_mean));
        out.push((format!("{name}.running_var"), &s.running_var));
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(params: &DacnParams<Tensor>, cfg: &DacnConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = cfg.to_kv().to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let entries = named_entries(params);
    put_u32(&mut out, entries.len());
    for (name, t) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(DacnParams<Tensor>, DacnConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected \"DACN\"".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = DacnConfig::from_kv(&KeyValues::parse(r.text("config")?)?)?;
    let count = r.u32("tensor count")?;
    let mut loaded = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.text("tensor name")?.to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} dimensions overflow")))?;
        let data = r
            .take(n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if loaded.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", bytes.len() - r.pos)));
    }
    let mut params = init_params(&cfg, 0)?;
    let mut fill = |name: String, slot: &mut Tensor| -> Result<()> {
        let t = loaded
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    let mut status = Ok(());
    params.visit_mut("", &mut |name, _, slot| {
        if status.is_ok() {
            status = fill(name.to_string(), slot);
        }
    });
    status?;
    for (name, s) in params.norm_states_mut() {
        fill(format!("{name}.running_mean"), &mut s.running_mean)?;
        fill(format!("{name}.running_var"), &mut s.running_var)?;
    }
    if let Some(name) = loaded.keys().min() {
        return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
    }
    Ok((params, cfg))
}

pub fn save(params: &DacnParams<Tensor>, cfg: &DacnConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(params, cfg))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(DacnParams<Tensor>, DacnConfig)> {
    from_bytes(&fs::read(path)?)
}
