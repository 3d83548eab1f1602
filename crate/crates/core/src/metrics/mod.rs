//! Evaluation metrics over precomputed features.
//!
//! Feature vectors arrive as [`FeatureSet`]s (one row per image or prompt).
//! Style features are per-layer `C × H × W` activation maps.

mod diversity;
mod scores;
mod similarity;
mod style;

pub use diversity::{
    diversity_ratio, subsample, vendi_by_group, vendi_score, DiversityMeasure, GroupedVendi,
    SingletonPolicy,
};
pub use scores::{
    aggregate, balance_repeats, rank_normalize, CategoryScore, ScoreRecord, ScoreTable,
    DEFAULT_BALANCE_TARGET,
};
pub use similarity::{
    avg_cosine_similarity, dissim_variance_identity_check, intra_dissimilarity,
    squared_centroid_distance, text_image_alignment, variance, variance_normalized,
};
pub use style::{avg_style_loss, gram_matrix, style_loss};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n ≥ 1` feature vectors of a common dimension `d ≥ 1`, stored as an
/// `n × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    vectors: Tensor,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let n = vectors.len();
        let d = vectors.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::invalid("a feature set needs at least one non-empty vector"));
        }
        if let Some(i) = vectors.iter().position(|v| v.len() != d) {
            return Err(Error::invalid(format!(
                "feature vector {i} has dimension {} but vector 0 has {d}",
                vectors[i].len()
            )));
        }
        Ok(Self {
            vectors: Tensor::new(&[n, d], vectors.concat())?,
        })
    }

    pub fn from_tensor(vectors: Tensor) -> Result<Self> {
        vectors.expect_rank("FeatureSet", 2)?;
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.data().chunks_exact(self.dim())
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vectors
    }

    /// Rows scaled to unit Euclidean norm. A zero row is an error.
    pub fn normalized(&self) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.vectors.len());
        for (i, row) in self.rows().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid(format!("feature vector {i} has zero norm")));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        Ok(Tensor::from_parts(vec![self.len(), d], out))
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &FeatureSet) -> Result<FeatureSet> {
        if self.dim() != other.dim() {
            return Err(Error::shape(
                "FeatureSet::concat",
                self.vectors.shape(),
                other.vectors.shape(),
            ));
        }
        let mut data = self.vectors.data().to_vec();
        data.extend_from_slice(other.vectors.data());
        Ok(FeatureSet {
            vectors: Tensor::from_parts(vec![self.len() + other.len(), self.dim()], data),
        })
    }

    pub(crate) fn check_dim(&self, other: &FeatureSet, op: &'static str) -> Result<()> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(Error::shape(op, self.vectors.shape(), other.vectors.shape()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(FeatureSet::new(vec![]).is_err());
        assert!(FeatureSet::new(vec![vec![]]).is_err());
        assert!(FeatureSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(FeatureSet::new(vec![vec![f64::NAN]]).is_err());
        let s = FeatureSet::new(vec![vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!((s.len(), s.dim()), (2, 2));
        assert_eq!(s.normalized().unwrap().data(), &[0.6, 0.8, 0.0, 1.0]);
        assert!(FeatureSet::new(vec![vec![0.0, 0.0]]).unwrap().normalized().is_err());
    }
}
