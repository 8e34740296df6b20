//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HPSN" | version: u32 | records until EOF
//! record = name_len: u32 | name: utf-8 | shape: 4 x u32 | values: f64 x numel
//! ```
//!
//! Each convolution contributes `{name}.weight` and `{name}.bias`. Stride
//! and padding are not stored; they follow from the network spec.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParameterStore};
use crate::tensor::{Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"HPSN";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, p) in store.iter() {
        for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
            let full = format!("{name}.{suffix}");
            buf.extend_from_slice(&(full.len() as u32).to_le_bytes());
            buf.extend_from_slice(full.as_bytes());
            let s = t.shape();
            for d in [s.n, s.c, s.h, s.w] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint into a store shaped by `spec`. Every parameter the
/// spec needs must be present with the right shape, and nothing else.
pub fn decode(bytes: &[u8], path: &Path, spec: &NetworkSpec) -> Result<ParameterStore> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.err("not a checkpoint (bad magic)"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let mut store = ParameterStore::init(spec, 0)?;
    let mut seen = std::collections::BTreeSet::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let len = cur.u32("name length")? as usize;
        let raw_name = cur.take(len, "name")?.to_vec();
        let name = String::from_utf8(raw_name).map_err(|_| cur.err("name is not utf-8"))?;
        let dims: Vec<usize> = (0..4).map(|_| cur.u32("shape").map(|d| d as usize)).collect::<Result<_>>()?;
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = cur.take(shape.numel() * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor4::new(shape, data)?;

        let (param, field) = name.rsplit_once('.').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: start,
            message: format!("record name {name:?} lacks a .weight/.bias suffix"),
        })?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            offset: start,
            message,
        };
        let target = store
            .get_mut(param)
            .ok_or_else(|| bad(format!("{param} is not a parameter of this network")))?;
        let slot = match field {
            "weight" => &mut target.weight,
            "bias" => &mut target.bias,
            _ => return Err(bad(format!("unknown field {field:?} in {name:?}"))),
        };
        if slot.shape() != shape {
            return Err(bad(format!("{name} has shape {shape}, network expects {}", slot.shape())));
        }
        *slot = tensor;
        if !seen.insert(name.clone()) {
            return Err(bad(format!("duplicate record {name}")));
        }
    }
    let missing: Vec<String> = store
        .iter()
        .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
        .filter(|n| !seen.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(cur.err(format!("missing records: {}", missing.join(", "))));
    }
    Ok(store)
}

/// Writes through a temporary file so a failed save leaves no partial file.
pub fn save(path: &Path, store: &ParameterStore) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(store)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, spec: &NetworkSpec) -> Result<ParameterStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn round_trip_is_exact() {
        let spec = NetworkSpec::toy(Variant::Hps);
        let store = ParameterStore::init(&spec, 11).unwrap();
        let bytes = encode(&store);
        assert_eq!(&bytes[..8], b"HPSN\x01\x00\x00\x00");
        let back = decode(&bytes, Path::new("m"), &spec).unwrap();
        for (k, p) in store.iter() {
            assert_eq!(back.get(k).unwrap(), p);
        }
    }

    #[test]
    fn truncation_and_mismatch_are_format_errors() {
        let spec = NetworkSpec::toy(Variant::Baseline);
        let bytes = encode(&ParameterStore::init(&spec, 1).unwrap());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut, Path::new("m"), &spec), Err(Error::Format { .. })));
        // A baseline file lacks the mask modules an hps network needs.
        let e = decode(&bytes, Path::new("m"), &NetworkSpec::toy(Variant::Hps));
        assert!(matches!(e, Err(Error::Format { ref message, .. }) if message.contains("missing")));
        assert!(decode(b"NOPE\x01\x00\x00\x00", Path::new("m"), &spec).is_err());
    }
}
