//! Relevance score calculation from precomputed caption embeddings.
//!
//! An image is represented by the caption it is paired with in the batch, so
//! image-caption relevance reduces to caption-caption cosine similarity mapped
//! onto `[0, 1]`.

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// Caption embeddings with every row scaled to unit L2 norm.
#[derive(Debug, Clone)]
pub struct CaptionEmbeddings {
    matrix: Matrix,
}

impl CaptionEmbeddings {
    /// Normalizes each row of `raw`; a zero row is rejected.
    pub fn new(mut raw: Matrix) -> Result<Self> {
        for i in 0..raw.rows() {
            let n = norm(raw.row(i));
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            raw.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self { matrix: raw })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Bounds {
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// Cosine similarity of captions `i` and `j`, clamped to `[-1, 1]`.
    pub fn text_similarity(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        if i == j {
            return Ok(1.0);
        }
        Ok(dot(self.matrix.row(i), self.matrix.row(j)).clamp(-1.0, 1.0))
    }

    pub fn relevance_score(&self, i: usize, j: usize) -> Result<f64> {
        Ok(cosine_to_relevance(self.text_similarity(i, j)?))
    }

    /// N×N relevance for a batch whose k-th image is represented by caption `ids[k]`.
    pub fn batch_relevance(&self, ids: &[usize]) -> Result<RelevanceMatrix> {
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for &id in ids {
            self.check(id)?;
            if !seen.insert(id) {
                return Err(Error::DuplicateCaption { caption: id });
            }
        }
        let n = ids.len();
        let mut values = Matrix::zeros(n, n);
        for a in 0..n {
            values[(a, a)] = 1.0;
            let ra = self.matrix.row(ids[a]);
            for b in (a + 1)..n {
                let r = cosine_to_relevance(dot(ra, self.matrix.row(ids[b])).clamp(-1.0, 1.0));
                values[(a, b)] = r;
                values[(b, a)] = r;
            }
        }
        Ok(RelevanceMatrix { values })
    }
}

#[inline]
pub fn cosine_to_relevance(cos: f64) -> f64 {
    (1.0 + cos) / 2.0
}

/// Graded relevance `r[i][j] ∈ [0, 1]` between batch image `i` and batch caption `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    values: Matrix,
}

impl RelevanceMatrix {
    /// Wraps an arbitrary matrix after checking every entry lies in `[0, 1]`.
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some(bad) = values.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("relevance {bad} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn transpose(&self) -> RelevanceMatrix {
        RelevanceMatrix {
            values: self.values.transpose(),
        }
    }
}
