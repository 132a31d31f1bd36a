//! Precomputed image features.
//!
//! Two on-disk formats are supported:
//!
//! * TSV, one record per line: `image_id<TAB>v1 v2 ... vF`.
//! * Binary: `b"IMGF"`, `u32` version (1), `u32` record count, `u32` F, then
//!   per record a `u32` id byte length, the UTF-8 id and F little-endian
//!   `f32` values. All integers are little-endian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Vector;

const MAGIC: &[u8; 4] = b"IMGF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Tsv,
    Binary,
}

impl FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(FeatureFormat::Tsv),
            "binary" | "bin" => Ok(FeatureFormat::Binary),
            other => Err(Error::Config(format!(
                "unknown feature format `{other}` (expected tsv|binary)"
            ))),
        }
    }
}

/// Image id to feature vector, iterated in id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    dim: usize,
    vectors: BTreeMap<String, Vector>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Vector> {
        self.vectors.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Vector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Inserts a vector; a repeated id replaces the earlier one with a warning.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vector) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "feature for `{id}` has length {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if !vector.is_finite() {
            return Err(Error::Data(format!("feature for `{id}` has a non-finite value")));
        }
        if self.vectors.insert(id.clone(), vector).is_some() {
            warn!("duplicate feature id `{id}`; keeping the last record");
        }
        Ok(())
    }
}

pub fn load_features(path: impl AsRef<Path>, format: Option<FeatureFormat>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let bytes = fsio::read(path)?;
    let format = format.unwrap_or(if bytes.starts_with(MAGIC) {
        FeatureFormat::Binary
    } else {
        FeatureFormat::Tsv
    });
    let store = match format {
        FeatureFormat::Tsv => parse_tsv(path, &bytes)?,
        FeatureFormat::Binary => parse_binary(path, &bytes)?,
    };
    if store.is_empty() {
        return Err(Error::format(path, "no feature records"));
    }
    Ok(store)
}

fn parse_tsv(path: &Path, bytes: &[u8]) -> Result<FeatureStore> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let mut store: Option<FeatureStore> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {lineno}: missing TAB after image id")))?;
        let values = values
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("line {lineno}: bad number `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("line {lineno}: non-finite value")));
        }
        let store = store.get_or_insert_with(|| FeatureStore::new(values.len()));
        if values.len() != store.dim {
            return Err(Error::format(
                path,
                format!(
                    "line {lineno}: {} values, expected {} (ragged features)",
                    values.len(),
                    store.dim
                ),
            ));
        }
        store.insert(id.trim(), values.into())?;
    }
    Ok(store.unwrap_or_default())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<FeatureStore> {
    let truncated = |what: &str| Error::format(path, format!("truncated binary features ({what})"));
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "missing IMGF magic"));
    }
    let version = cur.u32().ok_or_else(|| truncated("header"))?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported IMGF version {version}")));
    }
    let count = cur.u32().ok_or_else(|| truncated("header"))? as usize;
    let dim = cur.u32().ok_or_else(|| truncated("header"))? as usize;
    let mut store = FeatureStore::new(dim);
    for rec in 0..count {
        let ctx = format!("record {rec}");
        let id_len = cur.u32().ok_or_else(|| truncated(&ctx))? as usize;
        let id = cur.take(id_len).ok_or_else(|| truncated(&ctx))?;
        let id = std::str::from_utf8(id)
            .map_err(|_| Error::format(path, format!("record {rec}: id is not UTF-8")))?;
        let raw = cur.take(dim * 4).ok_or_else(|| truncated(&ctx))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("record {rec}: non-finite value")));
        }
        store.insert(id, values.into())?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(store)
}

pub fn encode_features(store: &FeatureStore, format: FeatureFormat) -> Vec<u8> {
    match format {
        FeatureFormat::Tsv => {
            let mut out = String::new();
            for (id, v) in store.iter() {
                out.push_str(id);
                out.push('\t');
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    let _ = write!(out, "{}", *x as f32);
                }
                out.push('\n');
            }
            out.into_bytes()
        }
        FeatureFormat::Binary => {
            let mut out = Vec::with_capacity(16 + store.len() * (8 + store.dim * 4));
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            out.extend_from_slice(&(store.dim as u32).to_le_bytes());
            for (id, v) in store.iter() {
                out.extend_from_slice(&(id.len() as u32).to_le_bytes());
                out.extend_from_slice(id.as_bytes());
                for x in v.iter() {
                    out.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
            out
        }
    }
}

/// Writes the store atomically; values are narrowed to `f32`.
pub fn write_features(path: impl AsRef<Path>, store: &FeatureStore, format: FeatureFormat) -> Result<()> {
    fsio::write_atomic(path, &encode_features(store, format))
}
