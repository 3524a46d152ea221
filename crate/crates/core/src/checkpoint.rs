//! Binary container for model parameters.
//!
//! Layout: the 8-byte magic `DGLMCKP1`, a little-endian `u64` manifest
//! length, the UTF-8 manifest, then every tensor's entries as little-endian
//! `f32` in manifest order (row-major).
//!
//! Manifest lines are tab-separated:
//!
//! ```text
//! kind    <model kind>
//! meta    <key>   <value>
//! tensor  <name>  <rows>x<cols>
//! ```

use std::fs;
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DGLMCKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks meta key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("meta key {key:?} has unparseable value {raw:?}")))
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("kind\t{}\n", self.kind);
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for (name, m) in &self.tensors {
            manifest.push_str(&format!("tensor\t{name}\t{}x{}\n", m.nrows(), m.ncols()));
        }
        let payload: usize = self.tensors.iter().map(|(_, m)| m.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, m) in &self.tensors {
            for x in m.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest = std::str::from_utf8(&bytes[16..manifest_end])
            .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let mut ckpt = Checkpoint::new("");
        let mut shapes = Vec::new();
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["kind", k] => ckpt.kind = k.to_string(),
                ["meta", k, v] => ckpt.meta.push((k.to_string(), v.to_string())),
                ["tensor", name, shape] => {
                    let (r, c) = shape
                        .split_once('x')
                        .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                        .ok_or_else(|| Error::Format(format!("bad shape {shape:?} for {name}")))?;
                    shapes.push((name.to_string(), r, c));
                }
                _ => return Err(Error::Format(format!("bad manifest line {line:?}"))),
            }
        }
        let mut offset = manifest_end;
        for (name, r, c) in shapes {
            let n = r * c;
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(Error::Format(format!("truncated payload in tensor {name}")));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            ckpt.tensors.push((name, Mat::from_shape_vec((r, c), data).unwrap()));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
