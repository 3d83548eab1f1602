use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// `F·Fᵀ / (C·H·W)` for a `C × H × W` activation map reshaped to
/// `C × (H·W)`.
pub fn gram_matrix(map: &Tensor) -> Result<Tensor> {
    map.expect_rank("gram_matrix", 3)?;
    let c = map.shape()[0];
    let f = map.reshape(&[c, map.len() / c])?;
    let g = matmul(&f, &f.transpose()?)?;
    Ok(g.scale(1.0 / map.len() as f64))
}

/// `Σ_layers ‖G(x) − G(y)‖²_F`. Spatial sizes may differ between the two
/// images; channel counts must match layer by layer.
pub fn style_loss(x: &[Tensor], y: &[Tensor]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "style_loss: {} layers vs {} layers",
            x.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        let (ga, gb) = (gram_matrix(a)?, gram_matrix(b)?);
        if ga.shape() != gb.shape() {
            return Err(Error::invalid(format!(
                "style_loss: layer {i} has {} channels vs {}",
                ga.rows(),
                gb.rows()
            )));
        }
        total += ga.sub(&gb)?.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Mean of [`style_loss`] over image pairs.
pub fn avg_style_loss(pairs: &[(Vec<Tensor>, Vec<Tensor>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("avg_style_loss needs at least one pair"));
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        total += style_loss(x, y)?;
    }
    Ok(total / pairs.len() as f64)
}
