//! Binary checkpoint.
//!
//! ```text
//! "MFRT"  u32 version  u32 len  config (TOML, UTF-8)
//! u32 count, then per entry:
//!   u8 kind (0 = parameter, 1 = buffer)  u32 len  name
//!   u32 ndim  u64 dims[ndim]  f64 data[product(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::profile::count_params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFRT";
pub const VERSION: u32 = 1;
const MAX_NDIM: u32 = 8;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let store = model.params();
    let entries: Vec<(u8, &String, &Tensor)> = store
        .params()
        .map(|(k, v)| (0u8, k, v))
        .chain(store.buffers().map(|(k, v)| (1u8, k, v)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, name, t) in entries {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a checkpoint; the parameter table is checked against its own config.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = ModelConfig::from_toml(&r.string("config")?)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let kind = r.take(1, "entry kind")?[0];
        let name = r.string("entry name")?;
        let ndim = r.u32("ndim")?;
        if ndim > MAX_NDIM {
            return Err(Error::Format(format!("{name}: {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64("dims")?).map_err(|_| Error::Format(format!("{name}: dim too large")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
            shape.push(d);
        }
        if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Format(format!("checkpoint truncated in {name}")));
        }
        let raw = r.take(numel * 8, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        let duplicate = store.contains(&name);
        match kind {
            0 => store.insert_param(name.clone(), t),
            1 => store.insert_buffer(name.clone(), t),
            k => return Err(Error::Format(format!("{name}: unknown entry kind {k}"))),
        }
        if duplicate {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    // Reject mismatches before instantiating a reference model for the
    // shape-by-shape comparison.
    if store.num_params() as u64 != count_params(&cfg) {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, its configuration needs {}",
            store.num_params(),
            count_params(&cfg)
        )));
    }
    Model::from_parts(cfg, store)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load(path)?;
    if model.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was saved with a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}
