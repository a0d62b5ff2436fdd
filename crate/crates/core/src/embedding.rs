//! Embedding vectors, label vocabularies and cosine top-k retrieval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("requested top-{k} from a vocabulary of {available} labels")]
    NotEnoughLabels { k: usize, available: usize },
    #[error("vocabulary `{name}`: {reason}")]
    InvalidVocabulary { name: String, reason: String },
    #[error("embedding has non-finite entries")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero-norm inputs have similarity 0 with everything.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

/// Labels with unit-norm text embeddings, as loaded from a vocabulary file
/// `{name, labels, embeddings}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub name: String,
    pub labels: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl LabelVocabulary {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    pub fn new(
        name: impl Into<String>,
        labels: Vec<String>,
        embeddings: Vec<Vec<f64>>,
    ) -> Result<Self, EmbeddingError> {
        let v = Self {
            name: name.into(),
            labels,
            embeddings,
        };
        v.validate()?;
        Ok(v)
    }

    /// Build from raw vectors, normalising each row.
    pub fn normalized(
        name: impl Into<String>,
        labels: Vec<String>,
        mut embeddings: Vec<Vec<f64>>,
    ) -> Result<Self, EmbeddingError> {
        for row in &mut embeddings {
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        Self::new(name, labels, embeddings)
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |reason: String| EmbeddingError::InvalidVocabulary {
            name: self.name.clone(),
            reason,
        };
        if self.labels.len() != self.embeddings.len() {
            return Err(bad(format!(
                "{} labels but {} embedding rows",
                self.labels.len(),
                self.embeddings.len()
            )));
        }
        let dim = self.dim();
        for (i, row) in self.embeddings.iter().enumerate() {
            if row.len() != dim {
                return Err(bad(format!("row {i} has dimension {}, expected {dim}", row.len())));
            }
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(bad(format!("row {i} has norm {n}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Top-`k` labels by cosine similarity, descending; ties keep vocabulary order.
pub fn retrieve_concepts(
    image_embedding: &EmbeddingVector,
    vocab: &LabelVocabulary,
    k: usize,
) -> Result<Vec<(String, f64)>, EmbeddingError> {
    if k > vocab.len() {
        return Err(EmbeddingError::NotEnoughLabels {
            k,
            available: vocab.len(),
        });
    }
    if !vocab.is_empty() && image_embedding.dim() != vocab.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: vocab.dim(),
            actual: image_embedding.dim(),
        });
    }
    let mut scored: Vec<(usize, f64)> = vocab
        .embeddings
        .iter()
        .map(|row| cosine_similarity(&image_embedding.values, row))
        .enumerate()
        .collect();
    // Stable sort keeps label order on exact ties.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (vocab.labels[i].clone(), s))
        .collect())
}
