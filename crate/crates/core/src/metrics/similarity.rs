use super::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn column_mean(m: &Tensor) -> Vec<f64> {
    let (n, d) = (m.rows(), m.cols());
    let mut mean = vec![0.0; d];
    for row in m.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    mean
}

/// `(1/n) Σ ‖x_i − x̄‖²` over the rows of `m`.
fn total_variance(m: &Tensor) -> f64 {
    let mean = column_mean(m);
    let d = m.cols();
    m.data()
        .chunks_exact(d)
        .map(|row| row.iter().zip(&mean).map(|(v, c)| (v - c).powi(2)).sum::<f64>())
        .sum::<f64>()
        / m.rows() as f64
}

/// Mean cosine similarity over all `n·m` cross pairs.
pub fn avg_cosine_similarity(s1: &FeatureSet, s2: &FeatureSet) -> Result<f64> {
    s1.check_dim(s2, "avg_cosine_similarity")?;
    let (a, b) = (s1.normalized()?, s2.normalized()?);
    let d = s1.dim();
    let mut total = 0.0;
    for x in a.data().chunks_exact(d) {
        for y in b.data().chunks_exact(d) {
            total += dot(x, y);
        }
    }
    Ok(total / (s1.len() * s2.len()) as f64)
}

/// `‖x̄¹ − x̄²‖²` between the centroids of the normalised sets.
pub fn squared_centroid_distance(s1: &FeatureSet, s2: &FeatureSet) -> Result<f64> {
    s1.check_dim(s2, "squared_centroid_distance")?;
    let c1 = column_mean(&s1.normalized()?);
    let c2 = column_mean(&s2.normalized()?);
    Ok(c1.iter().zip(&c2).map(|(a, b)| (a - b).powi(2)).sum())
}

/// `1 − cossim(S, S)`.
pub fn intra_dissimilarity(s: &FeatureSet) -> Result<f64> {
    Ok(1.0 - avg_cosine_similarity(s, s)?)
}

/// Total variance of the normalised vectors.
pub fn variance_normalized(s: &FeatureSet) -> Result<f64> {
    Ok(total_variance(&s.normalized()?))
}

/// Total variance of the raw vectors, `(1/n) Σ ‖x_i − x̄‖²`.
pub fn variance(s: &FeatureSet) -> f64 {
    total_variance(s.as_tensor())
}

/// `|(1 − cossim) − ½(‖x̄¹ − x̄²‖² + Var(Ŝ¹) + Var(Ŝ²))|`, each side evaluated
/// directly from its own definition.
pub fn dissim_variance_identity_check(s1: &FeatureSet, s2: &FeatureSet) -> Result<f64> {
    let lhs = 1.0 - avg_cosine_similarity(s1, s2)?;
    let rhs = 0.5
        * (squared_centroid_distance(s1, s2)?
            + variance_normalized(s1)?
            + variance_normalized(s2)?);
    Ok((lhs - rhs).abs())
}

/// Mean cosine similarity between each image and its own prompt.
pub fn text_image_alignment(images: &FeatureSet, texts: &FeatureSet) -> Result<f64> {
    images.check_dim(texts, "text_image_alignment")?;
    if images.len() != texts.len() {
        return Err(Error::invalid(format!(
            "text_image_alignment: {} images but {} prompts",
            images.len(),
            texts.len()
        )));
    }
    let (a, b) = (images.normalized()?, texts.normalized()?);
    let d = images.dim();
    let total: f64 = a
        .data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(x, y)| dot(x, y))
        .sum();
    Ok(total / images.len() as f64)
}
