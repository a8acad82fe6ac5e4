//! Sharded store of edit embeddings.
//!
//! Edits are divided equally across K shards by round-robin insertion, so
//! shard sizes never differ by more than one. Each shard answers
//! max-similarity queries with an exact scan: at the target scale (a few
//! thousand entries) exact search is fast and keeps results deterministic.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array1;

use crate::embedding::{similarity, EmbeddingVector};
use crate::error::{Error, Result};

const STORE_MAGIC: &[u8; 4] = b"UAVS";
const STORE_VERSION: u8 = 1;

/// One stored edit embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardEntry {
    pub edit_id: u64,
    pub embedding: EmbeddingVector,
}

/// K shards of edit embeddings with a round-robin insertion cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    shards: Vec<Vec<ShardEntry>>,
    next_shard: usize,
    dim: usize,
    ids: HashSet<u64>,
}

impl VectorStore {
    pub fn new(shard_count: usize, dim: usize) -> Result<Self> {
        if shard_count == 0 {
            return Err(Error::InvalidInput("shard count must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        Ok(Self {
            shards: vec![Vec::new(); shard_count],
            next_shard: 0,
            dim,
            ids: HashSet::new(),
        })
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn shard_len(&self, shard_index: usize) -> Result<usize> {
        self.shards
            .get(shard_index)
            .map(Vec::len)
            .ok_or(Error::IndexError {
                index: shard_index,
                limit: self.shards.len(),
            })
    }

    pub fn contains(&self, edit_id: u64) -> bool {
        self.ids.contains(&edit_id)
    }

    /// Insert an embedding into the next shard in round-robin order and
    /// return the shard index used.
    pub fn insert(&mut self, edit_id: u64, embedding: EmbeddingVector) -> Result<usize> {
        if embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: embedding.dim(),
            });
        }
        if !self.ids.insert(edit_id) {
            return Err(Error::DuplicateEdit(edit_id));
        }
        let shard = self.next_shard;
        self.shards[shard].push(ShardEntry { edit_id, embedding });
        self.next_shard = (self.next_shard + 1) % self.shards.len();
        Ok(shard)
    }

    /// Maximum similarity between `query` and the entries of one shard,
    /// with the arg-max edit id. Empty shard: (0.0, None), which makes the
    /// routing score `-epsilon` and deactivates the paired expert whenever
    /// epsilon > 0. Ties go to the lowest edit id.
    pub fn shard_max_similarity(
        &self,
        shard_index: usize,
        query: &EmbeddingVector,
    ) -> Result<(f64, Option<u64>)> {
        let shard = self.shards.get(shard_index).ok_or(Error::IndexError {
            index: shard_index,
            limit: self.shards.len(),
        })?;
        let mut best: Option<(f64, u64)> = None;
        for entry in shard {
            let score = similarity(query, &entry.embedding)?;
            best = match best {
                None => Some((score, entry.edit_id)),
                Some((bs, bid)) => {
                    if score > bs || (score == bs && entry.edit_id < bid) {
                        Some((score, entry.edit_id))
                    } else {
                        Some((bs, bid))
                    }
                }
            };
        }
        Ok(match best {
            Some((score, id)) => (score, Some(id)),
            None => (0.0, None),
        })
    }

    /// Entries of one shard, in insertion order.
    pub fn shard_entries(&self, shard_index: usize) -> Result<&[ShardEntry]> {
        self.shards
            .get(shard_index)
            .map(Vec::as_slice)
            .ok_or(Error::IndexError {
                index: shard_index,
                limit: self.shards.len(),
            })
    }

    /// Serialize to the versioned binary store format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(STORE_MAGIC)?;
        file.write_u8(STORE_VERSION)?;
        file.write_u32::<LittleEndian>(self.shards.len() as u32)?;
        file.write_u32::<LittleEndian>(self.dim as u32)?;
        for shard in &self.shards {
            file.write_u32::<LittleEndian>(shard.len() as u32)?;
            for entry in shard {
                file.write_u64::<LittleEndian>(entry.edit_id)?;
                for v in entry.embedding.values().iter() {
                    file.write_f64::<LittleEndian>(*v)?;
                }
            }
        }
        file.flush()?;
        Ok(())
    }

    /// Load a store saved by [`VectorStore::save`]. Embedding bits are
    /// preserved exactly; the insertion cursor is recovered from the entry
    /// count (round-robin means cursor = N mod K).
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| truncated("store magic"))?;
        if &magic != STORE_MAGIC {
            return Err(Error::FormatError(format!(
                "bad store magic {:?}, expected {:?}",
                magic, STORE_MAGIC
            )));
        }
        let version = file.read_u8().map_err(|_| truncated("store version"))?;
        if version != STORE_VERSION {
            return Err(Error::FormatError(format!(
                "unsupported store version {version}"
            )));
        }
        let shard_count = file
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated("shard count"))? as usize;
        let dim = file
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated("dim"))? as usize;
        if shard_count == 0 || dim == 0 {
            return Err(Error::FormatError(
                "store header has zero shards or zero dim".into(),
            ));
        }
        let mut shards = Vec::with_capacity(shard_count);
        let mut ids = HashSet::new();
        for _ in 0..shard_count {
            let count = file
                .read_u32::<LittleEndian>()
                .map_err(|_| truncated("shard entry count"))? as usize;
            let mut shard = Vec::with_capacity(count);
            for _ in 0..count {
                let edit_id = file
                    .read_u64::<LittleEndian>()
                    .map_err(|_| truncated("edit id"))?;
                if !ids.insert(edit_id) {
                    return Err(Error::FormatError(format!(
                        "duplicate edit id {edit_id} in store file"
                    )));
                }
                let mut values = Array1::zeros(dim);
                for v in values.iter_mut() {
                    *v = file
                        .read_f64::<LittleEndian>()
                        .map_err(|_| truncated("embedding values"))?;
                }
                let norm = values.dot(&values).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::FormatError(format!(
                        "stored embedding for edit {edit_id} is not unit norm ({norm})"
                    )));
                }
                shard.push(ShardEntry {
                    edit_id,
                    embedding: EmbeddingVector::from_unit_unchecked(values),
                });
            }
            shards.push(shard);
        }
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let max = sizes.iter().copied().max().unwrap_or(0);
        let min = sizes.iter().copied().min().unwrap_or(0);
        if max - min > 1 {
            return Err(Error::FormatError(format!(
                "store shards are unbalanced (sizes {sizes:?})"
            )));
        }
        let total: usize = sizes.iter().sum();
        Ok(Self {
            shards,
            next_shard: total % shard_count,
            dim,
            ids,
        })
    }
}

fn truncated(what: &str) -> Error {
    Error::ParseError {
        line: 0,
        message: format!("truncated file while reading {what}"),
    }
}
