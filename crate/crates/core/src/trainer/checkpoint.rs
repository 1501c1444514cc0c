//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "FFCK" | u32 version | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u8 dtype | u8 ndim | u32 dims[ndim] | raw values
//! ```
//!
//! The first entry, `__config__`, holds the model config as JSON bytes
//! (dtype [`BYTES_TAG`]); the rest are parameters and buffers in store order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FfNet, ModelConfig};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"FFCK";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";
/// Dtype byte of the raw-bytes config entry.
pub const BYTES_TAG: u8 = 255;

fn put_entry(out: &mut Vec<u8>, name: &str, tag: u8, dims: &[usize], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(payload);
}

pub fn encode_checkpoint<T: Element>(model: &FfNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32 + 1).to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("model config serializes");
    put_entry(&mut out, CONFIG_ENTRY, BYTES_TAG, &[config.len()], &config);
    for (_, p) in model.store.iter() {
        let mut payload = Vec::with_capacity(p.value.numel() * T::DTYPE.size());
        for v in p.value.data() {
            match T::DTYPE {
                DType::F32 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        put_entry(&mut out, &p.name, T::DTYPE.tag(), &p.value.shape(), &payload);
    }
    out
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &FfNet<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

struct Entry<'a> {
    name: String,
    tag: u8,
    dims: Vec<usize>,
    payload: &'a [u8],
}

fn read_entries(bytes: &[u8]) -> Result<Vec<Entry<'_>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an FFCK file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version} is not supported (expected {VERSION})")));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry name at byte {} is not UTF-8", r.pos - len)))?
            .to_string();
        let tag = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let elem = match tag {
            BYTES_TAG => 1,
            t => DType::from_tag(t)
                .ok_or_else(|| Error::Checkpoint(format!("entry {name}: unknown dtype tag {t}")))?
                .size(),
        };
        let n = dims
            .iter()
            .try_fold(elem, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name}: dims {dims:?} overflow")))?;
        let payload = r.take(n, &format!("values of {name}"))?;
        entries.push(Entry {
            name,
            tag,
            dims,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

fn values<T: Element>(e: &Entry<'_>) -> Result<Vec<T>> {
    match DType::from_tag(e.tag) {
        Some(DType::F32) => Ok(e
            .payload
            .chunks_exact(4)
            .map(|c| T::cast(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
            .collect()),
        Some(DType::F64) => Ok(e
            .payload
            .chunks_exact(8)
            .map(|c| T::cast(f64::from_le_bytes(c.try_into().expect("eight bytes"))))
            .collect()),
        None => Err(Error::Checkpoint(format!("entry {} is not a tensor", e.name))),
    }
}

/// Rebuilds the model from the embedded config, then restores every value.
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<FfNet<T>> {
    let entries = read_entries(bytes)?;
    let first = entries
        .first()
        .filter(|e| e.name == CONFIG_ENTRY && e.tag == BYTES_TAG)
        .ok_or_else(|| Error::Checkpoint(format!("first entry must be {CONFIG_ENTRY}")))?;
    let config: ModelConfig = serde_json::from_slice(first.payload)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = FfNet::<T>::new(config)?;
    let params = &entries[1..];
    if params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, model has {}",
            params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape())).collect();
    for ((id, name, shape), e) in ids.into_iter().zip(params) {
        if e.name != name || e.dims != shape {
            return Err(Error::Checkpoint(format!(
                "entry {} {:?} does not match model parameter {name} {shape:?}",
                e.name, e.dims
            )));
        }
        *model.store.get_mut(id) = Tensor::new(shape, values(e)?)?;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<FfNet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
