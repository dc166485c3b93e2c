//! Scalar abstraction for embedding and metric arithmetic.
//!
//! Everything numeric in the retrieval path is generic over [`Scalar`] so the
//! same code runs at f32 or f64 precision. The crate root fixes concrete
//! aliases ([`crate::Real`], [`crate::Embedding`]) that the pipeline uses.

use num_traits::Float;

/// Floating-point scalar usable for embeddings, similarities, and metrics.
pub trait Scalar: Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    /// Lossy conversion from f64, used when constants (α, temperatures,
    /// tolerances) enter generic code.
    fn from_f64(v: f64) -> Self;

    /// Lossy conversion from a count.
    fn from_usize(v: usize) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn from_usize(v: usize) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn from_usize(v: usize) -> Self {
        v as f64
    }
}
