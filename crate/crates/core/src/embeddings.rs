//! Fixed-dimension embedding storage.
//!
//! On-disk layout (all little-endian):
//!
//! | offset | size            | content                         |
//! |--------|-----------------|---------------------------------|
//! | 0      | 8               | magic `SDADEMB1`                |
//! | 8      | 4               | dimension, u32                  |
//! | 12     | 8               | row count, u64                  |
//! | 20     | count × dim × 4 | row-major IEEE-754 f32 values   |
//!
//! An optional sidecar at `<path>.meta.json` holds `{"ids": [...]}` aligned
//! with row order.

use std::fs;
use std::io::{self, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SDADEMB1";
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error("row {index} out of range (count {count})")]
    Index { index: u64, count: u64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("sidecar: {0}")]
    Sidecar(String),
}

/// A real-valued embedding. Values are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbeddingError> {
        if self.0.len() != other.0.len() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.0.len(),
                got: other.0.len(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| v * k).collect())
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
    let n = v.norm();
    if n == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / n).collect()))
}

/// Read-only dense row store.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    rows: Vec<f32>,
}

impl EmbeddingStore {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        if bytes.len() < HEADER_LEN {
            return Err(EmbeddingError::Format("truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if dimension == 0 {
            return Err(EmbeddingError::Format("dimension 0".into()));
        }
        let expected = (count as u128) * (dimension as u128) * 4;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u128 != expected {
            return Err(EmbeddingError::Format(format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let rows: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self { dimension, rows })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn raw_row(&self, i: usize) -> Option<&[f32]> {
        self.rows.chunks_exact(self.dimension).nth(i)
    }

    pub fn get_row(&self, i: u64) -> Result<EmbeddingVector, EmbeddingError> {
        let count = self.len() as u64;
        if i >= count {
            return Err(EmbeddingError::Index { index: i, count });
        }
        let start = i as usize * self.dimension;
        let row = &self.rows[start..start + self.dimension];
        Ok(EmbeddingVector(row.iter().map(|&v| f64::from(v)).collect()))
    }

    pub fn iter(&self) -> impl Iterator<Item = EmbeddingVector> + '_ {
        self.rows
            .chunks_exact(self.dimension)
            .map(|r| EmbeddingVector(r.iter().map(|&v| f64::from(v)).collect()))
    }
}

pub fn open_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbeddingError> {
    EmbeddingStore::from_bytes(&fs::read(path)?)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    ids: Vec<String>,
}

/// Row-aligned sample ids from the `.meta.json` sidecar of `store_path`.
pub fn load_sidecar(store_path: &Path) -> Result<Vec<String>, EmbeddingError> {
    let text = fs::read_to_string(sidecar_path(store_path))?;
    let sc: Sidecar =
        serde_json::from_str(&text).map_err(|e| EmbeddingError::Sidecar(e.to_string()))?;
    Ok(sc.ids)
}

/// Single-writer builder. Values are stored as f32.
#[derive(Debug)]
pub struct StoreWriter {
    dimension: usize,
    rows: Vec<f32>,
    ids: Vec<String>,
}

impl StoreWriter {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            rows: Vec::new(),
            ids: Vec::new(),
        }
    }

    /// Append a row, returning its index.
    pub fn push(&mut self, values: &[f64]) -> Result<u64, EmbeddingError> {
        if values.len() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dimension,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !(*v as f32).is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        let index = (self.rows.len() / self.dimension) as u64;
        self.rows.extend(values.iter().map(|&v| v as f32));
        Ok(index)
    }

    pub fn push_with_id(&mut self, id: &str, values: &[f64]) -> Result<u64, EmbeddingError> {
        if self.ids.len() as u64 != self.len() {
            return Err(EmbeddingError::Sidecar(
                "cannot mix rows with and without ids".into(),
            ));
        }
        let i = self.push(values)?;
        self.ids.push(id.to_string());
        Ok(i)
    }

    pub fn len(&self) -> u64 {
        (self.rows.len() / self.dimension.max(1)) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn finish(self) -> Result<EmbeddingStore, EmbeddingError> {
        if self.dimension == 0 {
            return Err(EmbeddingError::Format("dimension 0".into()));
        }
        Ok(EmbeddingStore {
            dimension: self.dimension,
            rows: self.rows,
        })
    }

    /// Write the store and, if ids were recorded, its sidecar.
    pub fn write(mut self, path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbeddingError> {
        let path = path.as_ref();
        let ids = std::mem::take(&mut self.ids);
        let store = self.finish()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&store.to_bytes())?;
        if !ids.is_empty() {
            let sc = serde_json::to_vec(&Sidecar { ids })
                .map_err(|e| EmbeddingError::Sidecar(e.to_string()))?;
            fs::write(sidecar_path(path), sc)?;
        }
        Ok(store)
    }
}
