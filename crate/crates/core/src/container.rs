//! Flat binary container shared by encoder, classifier-bank and training snapshot files.
//!
//! Layout:
//!
//! ```text
//! offset 0   8 bytes   magic "ZSSGBIN1"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          payload: f64 little-endian values, tensors back to back
//! ```
//!
//! The header is `{"kind": .., "meta": {..}, "tensors": [{"name", "dims", "offset", "len"}]}`
//! where `offset`/`len` count f64 values from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ZSSGBIN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    entries: Vec<TensorEntry>,
    payload: Vec<f64>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], values: &[f64]) -> Result<()> {
        let name = name.into();
        let len: usize = dims.iter().product();
        if len != values.len() {
            return Err(Error::Config(format!(
                "tensor `{}` dims {:?} do not match {} values",
                name,
                dims,
                values.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate tensor `{}`", name)));
        }
        self.entries.push(TensorEntry {
            name,
            dims: dims.to_vec(),
            offset: self.payload.len(),
            len,
        });
        self.payload.extend_from_slice(values);
        Ok(())
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("container has no tensor `{}`", name)))?;
        Ok((&e.dims, &self.payload[e.offset..e.offset + e.len]))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "expected a `{}` container, found `{}`",
                kind, self.kind
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::parse(source, bytes.len(), "file shorter than container preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::parse(source, 0, "bad magic"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[8..16]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::parse(source, 8, "header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::parse(source, 16 + e.column(), format!("bad header json: {}", e)))?;
        let body = &bytes[header_end..];
        if !body.len().is_multiple_of(8) {
            return Err(Error::parse(source, header_end, "payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        for e in &header.tensors {
            let want: usize = e.dims.iter().product();
            if want != e.len || e.offset + e.len > payload.len() {
                return Err(Error::parse(
                    source,
                    header_end + 8 * e.offset,
                    format!("tensor `{}` extends past the payload", e.name),
                ));
            }
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            entries: header.tensors,
            payload,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_and_lookup() {
        let mut c = Container::new("encoder", json!({"layers": 2}));
        c.push("a", &[2, 1], &[1.0, -0.5]).unwrap();
        c.push("b", &[3], &[0.25, f64::MIN_POSITIVE, 7.0]).unwrap();
        let back = Container::from_bytes(&c.to_bytes(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("b").unwrap().1, &[0.25, f64::MIN_POSITIVE, 7.0]);
        assert!(back.get("zz").is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut c = Container::new("bank", json!({}));
        c.push("rows", &[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = c.to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 8], "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(Container::from_bytes(b"NOTMAGIC\0\0\0\0\0\0\0\0", "mem").is_err());
    }
}
