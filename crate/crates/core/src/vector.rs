use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, Scalar};

/// Norms below this are treated as degenerate.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance applied to freshly normalized vectors.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// A unit-norm dense embedding.
///
/// The only ways to build one are [`EmbeddingVector::normalize`] and
/// [`EmbeddingVector::from_unit`], both of which enforce the norm invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct EmbeddingVector<T: Scalar = f32> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Scales `raw` to unit L2 norm. The division happens in `f64`.
    pub fn normalize(raw: &[T]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::DimMismatch { expected: 1, actual: 0 });
        }
        let norm = l2_norm(raw);
        if !norm.is_finite() || norm < ZERO_NORM {
            return Err(Error::ZeroVector { norm });
        }
        Ok(Self { values: raw.iter().map(|x| T::narrow(x.widen() / norm)).collect() })
    }

    /// Normalizes a vector already held in `f64`.
    pub fn normalize_f64(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::DimMismatch { expected: 1, actual: 0 });
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < ZERO_NORM {
            return Err(Error::ZeroVector { norm });
        }
        Ok(Self { values: raw.iter().map(|x| T::narrow(x / norm)).collect() })
    }

    /// Wraps values that should already be unit norm, checking within `tolerance`.
    pub fn from_unit(values: Vec<T>, tolerance: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimMismatch { expected: 1, actual: 0 });
        }
        let norm = l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > tolerance {
            return Err(Error::Norm { id: String::new(), norm, tolerance });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn dot<U: Scalar>(&self, other: &EmbeddingVector<U>) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Converts element type without renormalizing.
    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector { values: self.values.iter().map(|x| U::narrow(x.widen())).collect() }
    }
}

impl<T: Scalar> AsRef<[T]> for EmbeddingVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}
