//! Binary tensor container shared by dataset shards and model archives.
//!
//! Layout (all integers little-endian):
//!   bytes 0..8    magic (b"ACTSHRD1" for shards, b"ACTMODL1" for models)
//!   bytes 8..16   u64 header length
//!   next          JSON header, UTF-8
//!   rest          raw tensor bytes
//!
//! The header carries an archive version, a caller-defined `meta` document,
//! and one record per tensor with {name, dtype, shape, offset, sample_id,
//! label}. Offsets are relative to the start of the data section.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"ACTSHRD1";
pub const MODEL_MAGIC: &[u8; 8] = b"ACTMODL1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F16,
    F32,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sample_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u8>,
}

impl TensorRecord {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.element_count() * self.dtype.byte_width()
    }
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    version: u32,
    meta: M,
    records: Vec<TensorRecord>,
}

/// Accumulates tensors, then writes one archive file.
pub struct ArchiveWriter {
    records: Vec<TensorRecord>,
    data: Vec<u8>,
}

impl Default for ArchiveWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl ArchiveWriter {
    pub fn new() -> Self {
        ArchiveWriter {
            records: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push_tensor(
        &mut self,
        name: &str,
        dtype: Dtype,
        shape: &[usize],
        values: &[f32],
        sample_id: Option<&str>,
        label: Option<u8>,
    ) {
        let count: usize = shape.iter().product();
        assert_eq!(count, values.len(), "shape does not match value count");
        let offset = self.data.len() as u64;
        match dtype {
            Dtype::F32 => {
                for v in values {
                    self.data.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in values {
                    self.data
                        .extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
        }
        self.records.push(TensorRecord {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset,
            sample_id: sample_id.map(str::to_string),
            label,
        });
    }

    pub fn write<M: Serialize>(self, path: &Path, magic: &[u8; 8], meta: &M) -> Result<()> {
        let header = Header {
            version: ARCHIVE_VERSION,
            meta,
            records: self.records,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut file = File::create(path)?;
        file.write_all(magic)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())?;
        file.write_all(&header_json)?;
        file.write_all(&self.data)?;
        Ok(())
    }
}

/// A fully loaded archive; desk-scale files are read in one go.
pub struct Archive<M> {
    pub meta: M,
    pub records: Vec<TensorRecord>,
    data: Vec<u8>,
}

impl<M: DeserializeOwned> Archive<M> {
    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() < 16 {
            return Err(Error::format(format!(
                "{}: file too short for archive header",
                path.display()
            )));
        }
        if &raw[0..8] != magic {
            return Err(Error::format(format!(
                "{}: bad magic bytes (expected {:?})",
                path.display(),
                String::from_utf8_lossy(magic)
            )));
        }
        let header_len = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= raw.len())
            .ok_or_else(|| Error::format(format!("{}: truncated header", path.display())))?;
        let header: Header<M> = serde_json::from_slice(&raw[16..header_end])?;
        if header.version != ARCHIVE_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported archive version {} (expected {ARCHIVE_VERSION})",
                path.display(),
                header.version
            )));
        }
        let data = raw[header_end..].to_vec();
        for rec in &header.records {
            let end = rec.offset as usize + rec.byte_len();
            if end > data.len() {
                return Err(Error::format(format!(
                    "{}: record '{}' extends past end of data section",
                    path.display(),
                    rec.name
                )));
            }
        }
        Ok(Archive {
            meta: header.meta,
            records: header.records,
            data,
        })
    }

    pub fn find(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Decode a record to f32 (f16 storage is upcast).
    pub fn tensor_f32(&self, rec: &TensorRecord) -> Vec<f32> {
        let start = rec.offset as usize;
        let bytes = &self.data[start..start + rec.byte_len()];
        match rec.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_f32_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let values = vec![1.5f32, -2.25, 0.1, f32::MIN_POSITIVE];
        let mut w = ArchiveWriter::new();
        w.push_tensor("a/pooled", Dtype::F32, &[2, 2], &values, Some("a"), Some(1));
        w.write(&path, SHARD_MAGIC, &json!({"k": "v"})).unwrap();

        let arch: Archive<serde_json::Value> = Archive::read(&path, SHARD_MAGIC).unwrap();
        assert_eq!(arch.meta["k"], "v");
        let rec = arch.find("a/pooled").unwrap();
        assert_eq!(rec.shape, vec![2, 2]);
        assert_eq!(rec.label, Some(1));
        let back = arch.tensor_f32(rec);
        for (x, y) in back.iter().zip(&values) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn f16_storage_upcasts_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let values = vec![0.333333f32, -7.125, 100.0];
        let mut w = ArchiveWriter::new();
        w.push_tensor("x", Dtype::F16, &[3], &values, None, None);
        w.write(&path, SHARD_MAGIC, &json!({})).unwrap();

        let arch: Archive<serde_json::Value> = Archive::read(&path, SHARD_MAGIC).unwrap();
        let back = arch.tensor_f32(arch.find("x").unwrap());
        for (got, orig) in back.iter().zip(&values) {
            let expect = f16::from_f32(*orig).to_f32();
            assert_eq!(got.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut w = ArchiveWriter::new();
        w.push_tensor("x", Dtype::F32, &[1], &[1.0], None, None);
        w.write(&path, SHARD_MAGIC, &json!({})).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        let err = Archive::<serde_json::Value>::read(&path, SHARD_MAGIC)
            .err()
            .expect("corrupted magic must fail");
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut w = ArchiveWriter::new();
        w.push_tensor("x", Dtype::F32, &[4], &[1.0; 4], None, None);
        w.write(&path, SHARD_MAGIC, &json!({})).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(Archive::<serde_json::Value>::read(&path, SHARD_MAGIC).is_err());
    }

    #[test]
    fn wrong_magic_distinguishes_shards_from_models() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut w = ArchiveWriter::new();
        w.push_tensor("x", Dtype::F32, &[1], &[1.0], None, None);
        w.write(&path, MODEL_MAGIC, &json!({})).unwrap();
        assert!(Archive::<serde_json::Value>::read(&path, SHARD_MAGIC).is_err());
        assert!(Archive::<serde_json::Value>::read(&path, MODEL_MAGIC).is_ok());
    }
}
