//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian: the magic `NVIBCKPT`, a `u32`
//! version, the configuration and free-form metadata as counted lists of
//! length-prefixed UTF-8 key/value pairs, the `u64` seed, then every
//! parameter as name, `u64` rows, `u64` cols and `f64` payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nvib_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::Autoencoder;

pub const MAGIC: &[u8; 8] = b"NVIBCKPT";
pub const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_map(out: &mut Vec<u8>, m: &BTreeMap<String, String>) {
    put_u64(out, m.len() as u64);
    for (k, v) in m {
        put_str(out, k);
        put_str(out, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len().max(1) * 8)
            .ok_or_else(|| ModelError::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Checkpoint("invalid UTF-8".into()))
    }

    fn map(&mut self) -> Result<BTreeMap<String, String>> {
        let n = self.len()?;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = self.string()?;
            let v = self.string()?;
            m.insert(k, v);
        }
        Ok(m)
    }
}

/// A model with the metadata stored alongside it.
pub struct Checkpoint {
    pub model: Autoencoder,
    pub metadata: BTreeMap<String, String>,
}

pub fn to_bytes(model: &Autoencoder, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_map(&mut out, &model.config().to_pairs());
    put_map(&mut out, metadata);
    put_u64(&mut out, model.seed());
    put_u64(&mut out, model.params().len() as u64);
    for (name, t) in model.params().iter() {
        put_str(&mut out, name);
        put_u64(&mut out, t.rows() as u64);
        put_u64(&mut out, t.cols() as u64);
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("four bytes"));
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_pairs(&r.map()?)?;
    let metadata = r.map()?;
    let seed = r.u64()?;
    let mut model = Autoencoder::new(config, seed)?;
    let count = r.len()?;
    if count != model.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "{count} tensors stored, model has {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.len()?;
        let cols = r.len()?;
        let payload = r.take(rows * cols * 8)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = model.params_mut().get_mut(id);
        if slot.shape() != [rows, cols] {
            return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
        }
        *slot = Tensor::from_vec(rows, cols, data);
    }
    if !r.buf.is_empty() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { model, metadata })
}

pub fn save(path: &Path, model: &Autoencoder, metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, metadata))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
