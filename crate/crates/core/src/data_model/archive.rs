//! `MMLF` feature archive.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "MMLF" | version = 1 | record count
//! per record: key length | key bytes (UTF-8) | ndim | dims... | f32 values (LE)
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMLF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic bytes (expected `MMLF`)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated archive header")]
    TruncatedHeader,
    #[error("truncation at record {record}")]
    Truncated { record: usize },
    #[error("record {record}: key is not valid UTF-8")]
    InvalidKey { record: usize },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("record `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("record `{key}`: shape {shape:?} does not match {len} values")]
    ShapeMismatch {
        key: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("record `{0}`: shape must be non-empty with positive dims")]
    InvalidShape(String),
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
}

/// One named tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub key: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(key: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ArchiveError> {
        let rec = TensorRecord {
            key: key.into(),
            shape,
            data,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn from_f64(key: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<Self, ArchiveError> {
        Self::new(key, shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn validate(&self) -> Result<(), ArchiveError> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(ArchiveError::InvalidShape(self.key.clone()));
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(ArchiveError::ShapeMismatch {
                key: self.key.clone(),
                shape: self.shape.clone(),
                len: self.data.len(),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(ArchiveError::NonFinite(self.key.clone()));
        }
        Ok(())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }
}

pub fn encode_archive(records: &[TensorRecord]) -> Result<Vec<u8>, ArchiveError> {
    let mut seen = HashSet::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        if !seen.insert(rec.key.as_str()) {
            return Err(ArchiveError::DuplicateKey(rec.key.clone()));
        }
    }
    let payload: usize = records
        .iter()
        .map(|r| 8 + r.key.len() + 4 * r.shape.len() + 4 * r.data.len())
        .sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        buf.extend_from_slice(&(rec.key.len() as u32).to_le_bytes());
        buf.extend_from_slice(rec.key.as_bytes());
        buf.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        for &d in &rec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &rec.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
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
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<TensorRecord>, ArchiveError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4).ok_or(ArchiveError::TruncatedHeader)?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let version = cur.u32().ok_or(ArchiveError::TruncatedHeader)?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = cur.u32().ok_or(ArchiveError::TruncatedHeader)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::with_capacity(count.min(1 << 16));
    for record in 0..count {
        let truncated = ArchiveError::Truncated { record };
        let key_len = cur.u32().ok_or_else(|| truncated.clone())? as usize;
        let key_bytes = cur.take(key_len).ok_or_else(|| truncated.clone())?;
        let key = std::str::from_utf8(key_bytes)
            .map_err(|_| ArchiveError::InvalidKey { record })?
            .to_owned();
        let ndim = cur.u32().ok_or_else(|| truncated.clone())? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(cur.u32().ok_or_else(|| truncated.clone())? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = n
            .checked_mul(4)
            .and_then(|len| cur.take(len))
            .ok_or_else(|| truncated.clone())?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let rec = TensorRecord { key, shape, data };
        rec.validate()?;
        if !seen.insert(rec.key.clone()) {
            return Err(ArchiveError::DuplicateKey(rec.key));
        }
        records.push(rec);
    }
    let rest = bytes.len() - cur.pos;
    if rest != 0 {
        return Err(ArchiveError::TrailingBytes(rest));
    }
    Ok(records)
}

pub fn write_archive(records: &[TensorRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_archive(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_archive(&bytes)?)
}

/// Keyed view over one or more archives.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    records: HashMap<String, TensorRecord>,
}

impl FeatureStore {
    pub fn from_records(records: Vec<TensorRecord>) -> Result<Self> {
        let mut store = FeatureStore::default();
        store.extend(records)?;
        Ok(store)
    }

    pub fn open<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut store = FeatureStore::default();
        for p in paths {
            store.extend(read_archive(p)?)?;
        }
        Ok(store)
    }

    pub fn extend(&mut self, records: Vec<TensorRecord>) -> Result<()> {
        for rec in records {
            if self.records.contains_key(&rec.key) {
                return Err(ArchiveError::DuplicateKey(rec.key).into());
            }
            self.records.insert(rec.key.clone(), rec);
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&TensorRecord> {
        self.records
            .get(key)
            .ok_or_else(|| Error::DanglingKey(key.to_owned()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.records.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> TensorRecord {
        TensorRecord::new("v/obj", vec![150], (0..150).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn empty_round_trip() {
        let bytes = encode_archive(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode_archive(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_archive(&[ramp()]).unwrap();
        assert_eq!(&bytes[0..4], b"MMLF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &5u32.to_le_bytes());
        assert_eq!(&bytes[16..21], b"v/obj");
        assert_eq!(&bytes[21..25], &1u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &150u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29 + 150 * 4);
    }

    #[test]
    fn ramp_round_trip() {
        let rec = ramp();
        let back = decode_archive(&encode_archive(std::slice::from_ref(&rec)).unwrap()).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn nan_rejected_on_write() {
        let rec = TensorRecord {
            key: "bad".into(),
            shape: vec![2],
            data: vec![1.0, f32::NAN],
        };
        assert_eq!(
            encode_archive(&[rec]).unwrap_err(),
            ArchiveError::NonFinite("bad".into())
        );
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(matches!(
            encode_archive(&[ramp(), ramp()]),
            Err(ArchiveError::DuplicateKey(_))
        ));
    }

    #[test]
    fn distinct_errors_for_magic_version_truncation() {
        let good = encode_archive(&[ramp(), ramp_named("b")]).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_archive(&bad_magic).unwrap_err(), ArchiveError::BadMagic);

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert_eq!(
            decode_archive(&bad_version).unwrap_err(),
            ArchiveError::UnsupportedVersion(2)
        );

        assert_eq!(decode_archive(&good[..7]).unwrap_err(), ArchiveError::TruncatedHeader);
        assert_eq!(
            decode_archive(&good[..good.len() - 1]).unwrap_err(),
            ArchiveError::Truncated { record: 1 }
        );
        assert_eq!(
            decode_archive(&good[..40]).unwrap_err(),
            ArchiveError::Truncated { record: 0 }
        );

        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(decode_archive(&trailing).unwrap_err(), ArchiveError::TrailingBytes(1));
    }

    fn ramp_named(key: &str) -> TensorRecord {
        TensorRecord { key: key.into(), ..ramp() }
    }

    #[test]
    fn store_reports_dangling_key() {
        let store = FeatureStore::from_records(vec![ramp()]).unwrap();
        assert!(store.get("v/obj").is_ok());
        let err = store.get("missing").unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    fn record_strategy() -> impl Strategy<Value = TensorRecord> {
        (
            "[a-z/_0-9]{1,12}",
            prop::collection::vec(1usize..5, 1..=4),
        )
            .prop_flat_map(|(key, shape)| {
                let n: usize = shape.iter().product();
                (
                    Just(key),
                    Just(shape),
                    prop::collection::vec(
                        prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                        n,
                    ),
                )
            })
            .prop_map(|(key, shape, data)| TensorRecord { key, shape, data })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(records in prop::collection::vec(record_strategy(), 0..6)) {
            let mut seen = HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.key.clone())).collect();
            let back = decode_archive(&encode_archive(&records).unwrap()).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in records.iter().zip(&back) {
                prop_assert_eq!(&a.key, &b.key);
                prop_assert_eq!(&a.shape, &b.shape);
                let abits: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
