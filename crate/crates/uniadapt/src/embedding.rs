//! Sentence embeddings for the router.
//!
//! The base embedder is deterministic: signed hashed character 3-grams
//! bucketed into a fixed-dimension vector, then L2-normalized. A trainable
//! linear projection head sits on top of the frozen base embedder; the
//! router fine-tunes the head, never the base. A table embedder serves
//! precomputed vectors (e.g. synthetic datasets) under the same interface.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Magic bytes for projection-head checkpoints.
const HEAD_MAGIC: &[u8; 4] = b"UAPH";
const HEAD_VERSION: u8 = 1;

/// FNV-1a over a byte slice. Stable across runs and platforms.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// A unit-norm dense vector. The constructor normalizes, so every value of
/// this type has L2 norm 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
}

impl EmbeddingVector {
    /// Normalize `values` to unit length. A zero (or non-finite) vector is
    /// rejected because it has no direction.
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite embedding values".into()));
        }
        let norm = values.dot(&values).sqrt();
        if norm < 1e-300 {
            return Err(Error::InvalidInput("zero vector has no direction".into()));
        }
        Ok(Self {
            values: values / norm,
        })
    }

    /// Wrap values that are already unit-norm (used by persistence paths
    /// that must preserve bits exactly).
    pub(crate) fn from_unit_unchecked(values: Array1<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }
}

/// Similarity score between two unit vectors: cosine clamped to [0, 1].
///
/// Clamping keeps downstream routing scores `alpha = delta - epsilon`
/// inside [-1, 1] for any threshold in [0, 1].
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(a.values.dot(&b.values).clamp(0.0, 1.0))
}

/// The trainable linear map applied on top of the frozen base embedder,
/// plus the similarity temperature used inside the ranking loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    weight: Array2<f64>,
    scale: f64,
}

impl ProjectionHead {
    pub const DEFAULT_SCALE: f64 = 10.0;

    /// Identity weight, default temperature. This is the state before any
    /// router training.
    pub fn identity(dim: usize) -> Self {
        Self::with_scale(dim, Self::DEFAULT_SCALE)
    }

    pub fn with_scale(dim: usize, scale: f64) -> Self {
        Self {
            weight: Array2::eye(dim),
            scale,
        }
    }

    /// Build a head from an explicit weight matrix (square, finite).
    pub fn from_weight(weight: Array2<f64>, scale: f64) -> Result<Self> {
        if weight.nrows() != weight.ncols() {
            return Err(Error::DimensionMismatch {
                expected: weight.nrows(),
                actual: weight.ncols(),
            });
        }
        if !weight.iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidInput("head weight must be finite".into()));
        }
        Ok(Self { weight, scale })
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Temperature applied to similarities inside the loss only; routing
    /// uses unscaled similarity.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    /// Apply the head: multiply by the weight and re-normalize.
    pub fn project(&self, v: &EmbeddingVector) -> Result<EmbeddingVector> {
        if v.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: v.dim(),
            });
        }
        let projected = self.weight.dot(v.values());
        EmbeddingVector::new(projected)
            .map_err(|_| Error::NumericalError("projection collapsed embedding to zero".into()))
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().all(|w| w.is_finite())
    }

    /// Write the head to a versioned binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(HEAD_MAGIC)?;
        file.write_u8(HEAD_VERSION)?;
        file.write_u32::<LittleEndian>(self.dim() as u32)?;
        file.write_f64::<LittleEndian>(self.scale)?;
        for w in self.weight.iter() {
            file.write_f64::<LittleEndian>(*w)?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| truncated("head magic"))?;
        if &magic != HEAD_MAGIC {
            return Err(Error::FormatError(format!(
                "bad head magic {:?}, expected {:?}",
                magic, HEAD_MAGIC
            )));
        }
        let version = file.read_u8().map_err(|_| truncated("head version"))?;
        if version != HEAD_VERSION {
            return Err(Error::FormatError(format!(
                "unsupported head version {version}"
            )));
        }
        let dim = file
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated("head dim"))? as usize;
        let scale = file
            .read_f64::<LittleEndian>()
            .map_err(|_| truncated("head scale"))?;
        let mut weight = Array2::zeros((dim, dim));
        for w in weight.iter_mut() {
            *w = file
                .read_f64::<LittleEndian>()
                .map_err(|_| truncated("head weights"))?;
        }
        let head = Self { weight, scale };
        if !head.is_finite() {
            return Err(Error::FormatError("head weights not finite".into()));
        }
        Ok(head)
    }
}

fn truncated(what: &str) -> Error {
    Error::ParseError {
        line: 0,
        message: format!("truncated file while reading {what}"),
    }
}

/// Precomputed embeddings keyed by exact text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    entries: BTreeMap<String, EmbeddingVector>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingVector> {
        self.entries.get(key)
    }

    /// Insert a vector, normalizing it. Returns true when an existing key
    /// was replaced (last write wins).
    pub fn insert(&mut self, key: &str, values: Array1<f64>) -> Result<bool> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        let vector = EmbeddingVector::new(values)?;
        Ok(self.entries.insert(key.to_string(), vector).is_some())
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &EmbeddingVector)> {
        self.entries.iter()
    }

    /// Write the table in the text format read by [`load_table`]. Floats
    /// use Rust's shortest round-trip representation.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# uniadapt embedding table, dim {}", self.dim)?;
        for (key, vector) in &self.entries {
            let joined: Vec<String> = vector.values().iter().map(|v| v.to_string()).collect();
            writeln!(file, "{}\t{}", key, joined.join(","))?;
        }
        file.flush()?;
        Ok(())
    }
}

/// Result of loading an embedding table from disk.
#[derive(Debug)]
pub struct LoadedTable {
    pub table: EmbeddingTable,
    /// Number of keys that appeared more than once (last occurrence wins).
    pub duplicate_keys: usize,
}

/// Load a tab-separated embedding file: `<key>\t<f1>,<f2>,...,<fD>` per
/// line, `#` comments allowed, first data line fixes D. Vectors are
/// normalized on load.
pub fn load_table(path: &Path) -> Result<LoadedTable> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut table: Option<EmbeddingTable> = None;
    let mut duplicates = 0usize;
    for (idx, line) in file.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, rest) = trimmed.split_once('\t').ok_or_else(|| Error::ParseError {
            line: line_no,
            message: "expected <key>\\t<values>".into(),
        })?;
        if key.is_empty() {
            return Err(Error::ParseError {
                line: line_no,
                message: "empty key".into(),
            });
        }
        let mut values = Vec::new();
        for field in rest.split(',') {
            let value: f64 = field.trim().parse().map_err(|_| Error::ParseError {
                line: line_no,
                message: format!("bad float '{}'", field.trim()),
            })?;
            values.push(value);
        }
        let table = match table.as_mut() {
            Some(t) => {
                if values.len() != t.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: t.dim(),
                        actual: values.len(),
                    });
                }
                t
            }
            None => {
                table = Some(EmbeddingTable::new(values.len()));
                table.as_mut().unwrap()
            }
        };
        let replaced = table
            .insert(key, Array1::from_vec(values))
            .map_err(|e| match e {
                Error::InvalidInput(msg) => Error::ParseError {
                    line: line_no,
                    message: msg,
                },
                other => other,
            })?;
        if replaced {
            duplicates += 1;
        }
    }
    let table = table.ok_or_else(|| Error::ParseError {
        line: 0,
        message: "embedding file has no data lines".into(),
    })?;
    if duplicates > 0 {
        log::warn!("embedding table: {duplicates} duplicate keys (last occurrence kept)");
    }
    Ok(LoadedTable {
        table,
        duplicate_keys: duplicates,
    })
}

/// Base sentence embedder. Both variants produce unit-norm vectors and are
/// pure functions of the input text.
#[derive(Debug, Clone)]
pub enum Embedder {
    /// Signed hashed character 3-grams into `dim` buckets.
    HashedNgram { dim: usize },
    /// Lookup of precomputed vectors; unknown text is an error.
    Table(EmbeddingTable),
}

impl Embedder {
    pub fn hashed(dim: usize) -> Self {
        Self::HashedNgram { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::HashedNgram { dim } => *dim,
            Self::Table(table) => table.dim(),
        }
    }

    /// Embed text with the frozen base embedder (no projection head).
    pub fn base_embed(&self, text: &str) -> Result<EmbeddingVector> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidInput("empty text".into()));
        }
        match self {
            Self::HashedNgram { dim } => hashed_ngram_embed(trimmed, *dim),
            Self::Table(table) => table.get(trimmed).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("no embedding for key '{trimmed}'"))
            }),
        }
    }

    /// Full pipeline: base-embed, then apply the projection head.
    pub fn embed(&self, text: &str, head: &ProjectionHead) -> Result<EmbeddingVector> {
        if head.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: head.dim(),
            });
        }
        head.project(&self.base_embed(text)?)
    }
}

/// Signed 3-gram hashing. Texts shorter than three characters contribute a
/// single whole-text gram. If all gram signs cancel (possible in small
/// dimensions), fall back to a single deterministic bucket so the unit-norm
/// invariant holds for every text.
fn hashed_ngram_embed(text: &str, dim: usize) -> Result<EmbeddingVector> {
    let chars: Vec<char> = text.chars().collect();
    let mut values = Array1::zeros(dim);
    let mut buf = String::new();
    let add_gram = |gram: &str, values: &mut Array1<f64>| {
        let h = fnv1a64(gram.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        values[bucket] += sign;
    };
    if chars.len() < 3 {
        add_gram(text, &mut values);
    } else {
        for window in chars.windows(3) {
            buf.clear();
            buf.extend(window.iter());
            add_gram(&buf, &mut values);
        }
    }
    if values.iter().all(|v| *v == 0.0) {
        let h = fnv1a64(text.as_bytes());
        values[(h % dim as u64) as usize] = 1.0;
    }
    EmbeddingVector::new(values)
}
