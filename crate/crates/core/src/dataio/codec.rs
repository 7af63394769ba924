//! Embedding file codec.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ATCE"            4 bytes
//! version           u32 (= 1)
//! role              u8  (0 text, 1 support, 2 query)
//! dim               u32
//! rows              u64
//! num_classes       u32
//! labels            rows x u32
//! features          rows x dim x f32, row-major
//! class names       num_classes x (u16 byte length + UTF-8)
//! ```
//!
//! Trailing bytes are rejected.

use std::fs;
use std::path::Path;

use super::wire::{put_str_u16, ByteReader};
use super::{EmbeddingSet, LoadReport, Role};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ATCE";
pub const EMBEDDING_VERSION: u32 = 1;

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let rows = set.len();
    let dim = set.dim();
    let c = set.num_classes();
    let dim32 = u32::try_from(dim).map_err(|_| Error::Validation("dim exceeds u32".into()))?;
    let c32 = u32::try_from(c).map_err(|_| Error::Validation("class count exceeds u32".into()))?;

    let mut out = Vec::with_capacity(25 + rows * 4 + rows * dim * 4 + c * 16);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.push(set.role().to_byte());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for &label in set.labels() {
        // label < c <= u32::MAX by the set invariant
        out.extend_from_slice(&(label as u32).to_le_bytes());
    }
    for &v in set.features().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for name in set.class_names() {
        put_str_u16(&mut out, name, "class name")?;
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(EmbeddingSet, LoadReport)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::codec(0, format!("bad magic {magic:?}, expected \"ATCE\"")));
    }
    let version_at = r.offset();
    let version = r.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::codec(version_at, format!("unsupported version {version}")));
    }
    let role_at = r.offset();
    let role = Role::from_byte(r.u8("role")?).ok_or_else(|| Error::codec(role_at, "unknown role byte"))?;
    let dim = r.u32("dim")? as usize;
    let rows_at = r.offset();
    let rows = r.u64("row count")?;
    let c = r.u32("class count")? as usize;

    r.ensure(rows, 4, "labels")?;
    let rows = usize::try_from(rows).map_err(|_| Error::codec(rows_at, "row count too large"))?;
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(r.u32("label")? as usize);
    }

    let n_values = (rows as u64)
        .checked_mul(dim as u64)
        .ok_or_else(|| Error::codec(r.offset(), "feature count overflows"))?;
    let nbytes = r.ensure(n_values, 4, "features")?;
    let raw = r.take(nbytes, "features")?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite feature value".into()));
    }

    let mut class_names = Vec::with_capacity(c.min(r.remaining() / 2));
    for _ in 0..c {
        class_names.push(r.str_u16("class name")?);
    }
    r.finish()?;

    let features = Matrix::from_vec(rows, dim, data)?;
    EmbeddingSet::from_raw(features, labels, class_names, role)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_embeddings(set)?)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    Ok(read_embeddings_with_report(path)?.0)
}

pub fn read_embeddings_with_report(path: impl AsRef<Path>) -> Result<(EmbeddingSet, LoadReport)> {
    decode_embeddings(&fs::read(path)?)
}
