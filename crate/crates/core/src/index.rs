//! Exact cosine-similarity k-nearest-neighbor search over a catalog of
//! unit-normalized embeddings, plus the `CRIX` on-disk format.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot, Scalar};

/// Norm tolerance for unit embeddings.
pub const NORM_TOLERANCE: f64 = 1e-5;

const MAGIC: &[u8; 4] = b"CRIX";
const FORMAT_VERSION: u16 = 1;
/// Records per scan partition.
const PARTITION: usize = 2048;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector is zero or contains non-finite values")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("record {0} has a non-finite aesthetics score")]
    NonFiniteAesthetics(u64),
    #[error("embedding is not unit-norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    /// Wraps values that are already unit-norm, checking the norm.
    pub fn from_unit(values: Vec<T>) -> Result<Self, IndexError> {
        if values.is_empty() {
            return Err(IndexError::ZeroVector);
        }
        let norm = dot(&values, &values).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize<T: Scalar>(v: &[T]) -> Result<Embedding<T>, IndexError> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(IndexError::ZeroVector);
    }
    let norm = v
        .iter()
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(IndexError::ZeroVector);
    }
    let values = v
        .iter()
        .map(|x| T::from_f64_lossy(x.as_f64() / norm))
        .collect();
    Ok(Embedding { values })
}

/// Dot product of two unit embeddings, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(similarity_unchecked(a.values(), b.values()))
}

fn similarity_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    T::from_f64_lossy(dot(a, b).clamp(-1.0, 1.0))
}

/// One indexed web image.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogRecord<T> {
    pub record_id: u64,
    pub url: String,
    pub caption: String,
    pub aesthetics_score: f32,
    pub nsfw: bool,
    pub embedding: Embedding<T>,
}

/// Catalog metadata without the vector, as found in the JSON-lines sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub record_id: u64,
    pub url: String,
    #[serde(default)]
    pub caption: String,
    pub aesthetics_score: f32,
    #[serde(default, alias = "nsfw_flag")]
    pub nsfw: bool,
}

impl<T> CatalogRecord<T> {
    pub fn meta(&self) -> RecordMeta {
        RecordMeta {
            record_id: self.record_id,
            url: self.url.clone(),
            caption: self.caption.clone(),
            aesthetics_score: self.aesthetics_score,
            nsfw: self.nsfw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor<T> {
    pub record_id: u64,
    pub similarity: T,
}

/// Total ranking order: similarity descending, then record id ascending.
pub fn rank_order<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    b.similarity
        .as_f64()
        .total_cmp(&a.similarity.as_f64())
        .then(a.record_id.cmp(&b.record_id))
}

/// Heap entry where "greater" means ranked worse, so a max-heap keeps the
/// current worst of the top-k at the root.
struct Worst<T: Scalar>(Neighbor<T>);

impl<T: Scalar> PartialEq for Worst<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Worst<T> {}
impl<T: Scalar> PartialOrd for Worst<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Worst<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

/// Immutable exact-search index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T> {
    dim: usize,
    records: Vec<CatalogRecord<T>>,
    positions: HashMap<u64, usize>,
}

impl<T: Scalar> EmbeddingIndex<T> {
    /// Builds an index; the dimension is taken from the first record
    /// (an empty index has dimension 0 and answers every query with nothing).
    pub fn build(records: Vec<CatalogRecord<T>>) -> Result<Self, IndexError> {
        let dim = records.first().map_or(0, |r| r.embedding.dim());
        Self::build_with_dim(dim, records)
    }

    pub fn build_with_dim(dim: usize, records: Vec<CatalogRecord<T>>) -> Result<Self, IndexError> {
        let mut positions = HashMap::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            if r.embedding.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    found: r.embedding.dim(),
                });
            }
            if !r.aesthetics_score.is_finite() {
                return Err(IndexError::NonFiniteAesthetics(r.record_id));
            }
            if positions.insert(r.record_id, pos).is_some() {
                return Err(IndexError::DuplicateId(r.record_id));
            }
        }
        Ok(Self {
            dim,
            records,
            positions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CatalogRecord<T>] {
        &self.records
    }

    pub fn get(&self, record_id: u64) -> Option<&CatalogRecord<T>> {
        self.positions.get(&record_id).map(|&p| &self.records[p])
    }

    /// Exact top-`k` neighbors of `query`, computed by a partitioned
    /// parallel scan and merged under [`rank_order`].
    pub fn query_knn(&self, query: &Embedding<T>, k: usize) -> Result<Vec<Neighbor<T>>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.records.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let q = query.values();
        let partials: Vec<Vec<Neighbor<T>>> = self
            .records
            .par_chunks(PARTITION)
            .map(|chunk| {
                let mut heap: BinaryHeap<Worst<T>> = BinaryHeap::with_capacity(k.min(chunk.len()) + 1);
                for r in chunk {
                    let n = Neighbor {
                        record_id: r.record_id,
                        similarity: similarity_unchecked(q, r.embedding.values()),
                    };
                    if heap.len() < k {
                        heap.push(Worst(n));
                    } else if let Some(worst) = heap.peek() {
                        if rank_order(&n, &worst.0) == Ordering::Less {
                            heap.pop();
                            heap.push(Worst(n));
                        }
                    }
                }
                heap.into_iter().map(|w| w.0).collect()
            })
            .collect();
        let mut merged: Vec<Neighbor<T>> = partials.into_iter().flatten().collect();
        merged.sort_unstable_by(rank_order);
        merged.truncate(k);
        Ok(merged)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], IndexError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IndexError::Corrupt("truncated".into()),
        _ => IndexError::Io(e),
    })?;
    Ok(buf)
}

fn read_string(r: &mut impl Read) -> Result<String, IndexError> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut bytes = Vec::new();
    r.take(len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != len {
        return Err(IndexError::Corrupt("truncated string".into()));
    }
    String::from_utf8(bytes).map_err(|_| IndexError::Corrupt("string is not UTF-8".into()))
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

impl EmbeddingIndex<f32> {
    /// Writes the little-endian `CRIX` format.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), IndexError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim).map_err(|_| IndexError::Corrupt("dimension exceeds u32".into()))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.record_id.to_le_bytes())?;
            w.write_all(&r.aesthetics_score.to_le_bytes())?;
            w.write_all(&[u8::from(r.nsfw)])?;
            write_string(w, &r.url)?;
            write_string(w, &r.caption)?;
            for v in r.embedding.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, IndexError> {
        if &read_array::<4>(r)? != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(read_array(r)?) as usize;
        let count = u64::from_le_bytes(read_array(r)?);
        let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let record_id = u64::from_le_bytes(read_array(r)?);
            let aesthetics_score = f32::from_le_bytes(read_array(r)?);
            let nsfw = match read_array::<1>(r)?[0] {
                0 => false,
                1 => true,
                b => return Err(IndexError::Corrupt(format!("nsfw byte {b}"))),
            };
            let url = read_string(r)?;
            let caption = read_string(r)?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_le_bytes(read_array(r)?));
            }
            records.push(CatalogRecord {
                record_id,
                url,
                caption,
                aesthetics_score,
                nsfw,
                embedding: Embedding::from_unit(values)?,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        Self::build_with_dim(dim, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Joins an embedding matrix with its metadata sidecar, normalizing each row.
pub fn ingest<T: Scalar>(
    rows: impl IntoIterator<Item = Vec<T>>,
    metadata: Vec<RecordMeta>,
) -> Result<Vec<CatalogRecord<T>>, IndexError> {
    let rows: Vec<Vec<T>> = rows.into_iter().collect();
    if rows.len() != metadata.len() {
        return Err(IndexError::Corrupt(format!(
            "{} embedding rows but {} metadata lines",
            rows.len(),
            metadata.len()
        )));
    }
    rows.iter()
        .zip(metadata)
        .map(|(row, m)| {
            Ok(CatalogRecord {
                record_id: m.record_id,
                url: m.url,
                caption: m.caption,
                aesthetics_score: m.aesthetics_score,
                nsfw: m.nsfw,
                embedding: normalize(row)?,
            })
        })
        .collect()
}
