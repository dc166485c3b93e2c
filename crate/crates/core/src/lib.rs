//! tabhop-core: retrieval-augmented multi-hop question answering over tables
//! linked to text passages.
//!
//! The pipeline has two halves. The retriever linearizes table rows into
//! sentences, embeds them, pulls the passages linked from the best rows, and
//! re-ranks those passages with question keywords. The reader then answers the
//! question from the retrieved evidence, either in a single model call
//! (standard / chain-of-thought / least-to-most prompting) or through a
//! staged breakdown: summarize the evidence, split off a sub-question, predict
//! the expected answer type, answer the sub-question, and fold everything into
//! the final answer.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the concrete aliases below
//! fix the precision the pipeline runs at.

pub mod backend;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod linearize;
pub mod reader;
pub mod retrieve;
pub mod runner;
pub mod scalar;
pub mod text;
pub mod vector;

pub use error::{Error, Result, Stage};

/// Scalar precision used by the pipeline.
pub type Real = f64;

/// Embedding at pipeline precision.
pub type Embedding = vector::EmbeddingVector<Real>;
