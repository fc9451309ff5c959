//! Little-endian binary carrier for precomputed embeddings.
//!
//! ```text
//! "ATRB" | version u32 | d u32 | num_classes u32 | num_samples u32
//! class token table: num_classes × d f32
//! records: num_samples × (label u32, task_id u32, d f32)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DataError, TaskStream};
use crate::encoders::{ClassId, ImageSample, TokenSequence};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"ATRB";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub label: u32,
    pub task_id: u32,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub d: u32,
    pub class_tokens: Vec<Vec<f32>>,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn expected_len(d: u32, num_classes: u32, num_samples: u32) -> u64 {
        let d = d as u64;
        HEADER_LEN + num_classes as u64 * d * 4 + num_samples as u64 * (8 + d * 4)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        let d = self.d as usize;
        let check = |got: usize| {
            if got == d {
                Ok(())
            } else {
                Err(DataError::DimensionMismatch { expected: d, got })
            }
        };
        let nc = self.class_tokens.len() as u32;
        let ns = self.records.len() as u32;
        let mut out = Vec::with_capacity(Self::expected_len(self.d, nc, ns) as usize);
        out.extend_from_slice(&EMBEDDING_MAGIC);
        for v in [EMBEDDING_VERSION, self.d, nc, ns] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for row in &self.class_tokens {
            check(row.len())?;
            row.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        for (i, r) in self.records.iter().enumerate() {
            check(r.embedding.len())?;
            if r.label >= nc {
                return Err(DataError::LabelOutOfRange {
                    record: i,
                    label: r.label,
                    num_classes: nc,
                });
            }
            out.extend_from_slice(&r.label.to_le_bytes());
            out.extend_from_slice(&r.task_id.to_le_bytes());
            r.embedding.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let actual = bytes.len() as u64;
        if actual < HEADER_LEN {
            if actual >= 4 && bytes[..4] != EMBEDDING_MAGIC {
                return Err(DataError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(DataError::Truncated {
                expected: HEADER_LEN,
                actual,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != EMBEDDING_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != EMBEDDING_VERSION {
            return Err(DataError::UnsupportedVersion {
                found: version,
                expected: EMBEDDING_VERSION,
            });
        }
        let (d, nc, ns) = (u32_at(8), u32_at(12), u32_at(16));
        let expected = Self::expected_len(d, nc, ns);
        if actual < expected {
            return Err(DataError::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(DataError::TrailingBytes {
                expected,
                extra: actual - expected,
            });
        }
        let du = d as usize;
        let mut off = HEADER_LEN as usize;
        let read_row = |off: &mut usize| {
            let row: Vec<f32> = (0..du).map(|k| f32_at(*off + 4 * k)).collect();
            *off += 4 * du;
            row
        };
        let class_tokens = (0..nc).map(|_| read_row(&mut off)).collect();
        let mut records = Vec::with_capacity(ns as usize);
        for i in 0..ns as usize {
            let label = u32_at(off);
            let task_id = u32_at(off + 4);
            off += 8;
            if label >= nc {
                return Err(DataError::LabelOutOfRange {
                    record: i,
                    label,
                    num_classes: nc,
                });
            }
            records.push(EmbeddingRecord {
                label,
                task_id,
                embedding: read_row(&mut off),
            });
        }
        Ok(Self {
            d,
            class_tokens,
            records,
        })
    }

    /// Class tokens keyed by row index, widened to f64.
    pub fn token_table(&self) -> Result<BTreeMap<ClassId, TokenSequence>, DataError> {
        self.class_tokens
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let tok = TokenSequence::single(row.iter().map(|&x| x as f64).collect())?;
                Ok((ClassId(i as u32), tok))
            })
            .collect()
    }

    /// Records as samples; sample ids are `id_offset + record index`.
    pub fn samples(&self, id_offset: u64) -> Vec<ImageSample> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| ImageSample {
                id: id_offset + i as u64,
                features: r.embedding.iter().map(|&x| x as f64).collect(),
                label: ClassId(r.label),
                task_id: r.task_id,
            })
            .collect()
    }

    /// Build a stream from a train file and a test file sharing one class table.
    pub fn into_stream(name: &str, train: &Self, test: &Self) -> Result<TaskStream, DataError> {
        if train.d != test.d {
            return Err(DataError::DimensionMismatch {
                expected: train.d as usize,
                got: test.d as usize,
            });
        }
        let tokens = train.token_table()?;
        TaskStream::from_samples(
            name,
            train.samples(0),
            test.samples(train.records.len() as u64),
            tokens,
        )
    }
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingFile, DataError> {
    EmbeddingFile::from_bytes(&fs::read(path)?)
}

pub fn write_embedding_file(file: &EmbeddingFile, path: &Path) -> Result<(), DataError> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}
