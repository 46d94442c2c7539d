//! Binary weights files and anomaly-map exports.
//!
//! Weights layout (all integers little-endian):
//! `"ADKD"`, version `u32`, tensor count `u32`, then per tensor a `u16`
//! name length, the UTF-8 name, a `u8` rank, `u32` dims and `f32` payload.
//! Checkpoints append `"ECHO"`, a `u32` length and a UTF-8 text block.
//!
//! Anomaly maps: `"ADAM"`, `u32` height, `u32` width, `u32` reserved, then
//! `f32` scores row-major.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::PyramidNet;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ADKD";
pub const ECHO_MAGIC: &[u8; 4] = b"ECHO";
pub const MAP_MAGIC: &[u8; 4] = b"ADAM";
pub const FORMAT_VERSION: u32 = 1;

/// Canonical serialization: tensors in name order, then the optional echo.
pub fn encode<T: Real>(store: &ParamStore<T>, echo: Option<&str>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Weights("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Weights(format!("tensor name `{name}` is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Weights(format!("dimension of `{name}` overflows u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    if let Some(text) = echo {
        out.extend_from_slice(ECHO_MAGIC);
        let len = u32::try_from(text.len()).map_err(|_| Error::Weights("echo block too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let at = self.cur.position();
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| Error::Weights(format!("truncated {what} at byte {at}")))?;
        Ok(buf)
    }

    fn vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let at = self.cur.position();
        let remaining = self.cur.get_ref().len() as u64 - at;
        if (n as u64) > remaining {
            return Err(Error::Weights(format!("truncated {what} at byte {at}")));
        }
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn at_end(&self) -> bool {
        self.cur.position() as usize == self.cur.get_ref().len()
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(ParamStore<T>, Option<String>)> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    if &r.bytes::<4>("magic")? != WEIGHTS_MAGIC {
        return Err(Error::Weights("bad magic, not a weights file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Weights(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.bytes::<2>("name length")?) as usize;
        let name = String::from_utf8(r.vec(len, "tensor name")?)
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?;
        let rank = r.bytes::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.vec(n * 4, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if store.contains(&name) {
            return Err(Error::Weights(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, Tensor::new(&shape, data)?);
    }
    let echo = if r.at_end() {
        None
    } else {
        if &r.bytes::<4>("echo magic")? != ECHO_MAGIC {
            return Err(Error::Weights("unexpected trailing bytes".into()));
        }
        let len = r.u32("echo length")? as usize;
        let text = String::from_utf8(r.vec(len, "echo block")?)
            .map_err(|_| Error::Weights("echo block is not UTF-8".into()))?;
        if !r.at_end() {
            return Err(Error::Weights("trailing bytes after echo block".into()));
        }
        Some(text)
    };
    Ok((store, echo))
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, echo: Option<&str>) -> Result<()> {
    fs::write(path, encode(store, echo)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(ParamStore<T>, Option<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Hex SHA-256 of the canonical serialization.
pub fn checksum<T: Real>(store: &ParamStore<T>) -> Result<String> {
    Ok(hex_digest(&encode(store, None)?))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn export_weights<T: Real>(net: &PyramidNet<T>, path: &Path) -> Result<()> {
    save(path, &net.params, None)
}

/// Replaces every parameter of `net` from `path`. The file must hold
/// exactly the net's tensor names and shapes.
pub fn import_weights<T: Real>(mut net: PyramidNet<T>, path: &Path) -> Result<PyramidNet<T>> {
    let (store, _) = load::<T>(path)?;
    net.params.load_from(&store)?;
    Ok(net)
}

pub fn encode_map<T: Real>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    if scores.rank() != 2 {
        return Err(Error::Dimension(format!("anomaly map must be H×W, got {:?}", scores.shape())));
    }
    let mut out = Vec::with_capacity(16 + 4 * scores.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(scores.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(scores.shape()[1] as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in scores.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_map(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    if &r.bytes::<4>("magic")? != MAP_MAGIC {
        return Err(Error::Weights("bad magic, not an anomaly map".into()));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let _reserved = r.u32("reserved")?;
    let payload = r.vec(h * w * 4, "map payload")?;
    if !r.at_end() {
        return Err(Error::Weights("trailing bytes after anomaly map".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&[h, w], data)
}

/// Min-max normalized 8-bit grayscale preview.
pub fn map_preview<T: Real>(scores: &Tensor<T>) -> Vec<u8> {
    let lo = scores.data().iter().map(|v| v.f64()).fold(f64::INFINITY, f64::min);
    let hi = scores.data().iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    scores
        .data()
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v.f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}
