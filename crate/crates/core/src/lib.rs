//! Retrieval-based training-set augmentation: exact nearest-neighbor search
//! over an embedding catalog, class prompts, filtered per-class retrieval,
//! perceptual-hash duplicate auditing, dataset assembly and clustering.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common concrete types.

pub mod cluster;
pub mod dataset;
pub mod dedup;
pub mod index;
pub mod jsonl;
pub mod matrix;
pub mod prompts;
pub mod retrieval;
pub mod scalar;
pub mod seed;

pub use scalar::Scalar;

/// Single-precision embedding, the on-disk and default in-memory type.
pub type Embedding = index::Embedding<f32>;
pub type Embedding64 = index::Embedding<f64>;
pub type CatalogRecord = index::CatalogRecord<f32>;
pub type CatalogRecord64 = index::CatalogRecord<f64>;
pub type Neighbor = index::Neighbor<f32>;
pub type Index = index::EmbeddingIndex<f32>;
pub type Index64 = index::EmbeddingIndex<f64>;
pub type ClassRetrievalResult = retrieval::ClassRetrievalResult<f32>;
pub type ClusterModel = cluster::ClusterModel<f32>;
pub type ClusterModel64 = cluster::ClusterModel<f64>;
