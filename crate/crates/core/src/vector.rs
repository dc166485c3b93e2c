//! Dense vectors and the similarity math used by retrieval.
//!
//! Vectors are plain `Vec<T>` wrappers whose constructors enforce the one
//! invariant everything downstream relies on: every component is finite.
//! Similarity is the dot product over L2-normalized vectors, i.e. cosine.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// A dense embedding. All components are finite; dimension is fixed at
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Wrap raw components, rejecting NaN/infinite entries and zero dimension.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidRequest("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRequest(
                "embedding contains a non-finite component".into(),
            ));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn l2_norm(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }

    /// Scale to unit length. The zero vector is returned unchanged.
    pub fn normalized(&self) -> Self {
        let norm = self.l2_norm();
        if norm == T::zero() {
            return self.clone();
        }
        EmbeddingVector {
            values: self.values.iter().map(|v| *v / norm).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b))
    }

    /// Cosine similarity: dot product after normalizing both sides.
    pub fn cosine(&self, other: &Self) -> Result<T> {
        self.normalized().dot(&other.normalized())
    }
}

/// Blend a question vector with a row vector:
/// `alpha * question + (1 - alpha) * row`, then L2-normalize.
///
/// `alpha` must lie in `[0, 1]`; the inputs must share a dimension.
pub fn combine_embeddings<T: Scalar>(
    question: &EmbeddingVector<T>,
    row: &EmbeddingVector<T>,
    alpha: T,
) -> Result<EmbeddingVector<T>> {
    if alpha < T::zero() || alpha > T::one() {
        return Err(Error::InvalidRequest(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if question.dim() != row.dim() {
        return Err(Error::DimensionMismatch {
            expected: question.dim(),
            actual: row.dim(),
        });
    }
    let beta = T::one() - alpha;
    let blended: Vec<T> = question
        .values
        .iter()
        .zip(&row.values)
        .map(|(q, r)| alpha * *q + beta * *r)
        .collect();
    Ok(EmbeddingVector { values: blended }.normalized())
}

/// Indices of the `k` highest scores, ordered by score descending with ties
/// broken toward the lower index (i.e. the earlier candidate wins).
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Finite scores only, so partial_cmp cannot fail; sort_by is stable, which
    // gives the index-ascending tie-break for free.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order.truncate(k);
    order
}
