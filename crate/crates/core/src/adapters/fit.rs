//! Extracting adapters from full weight deltas: truncated SVD for LoRA and
//! nearest Kronecker product (Van Loan–Pitsianis rearrangement) for LoKr.

use super::{
    lokr_factor_dims, Adapter, KronFactor, KronRight, LayerShape, LokrAdapter, LoraAdapter,
    LowRank, MergeScale,
};
use crate::error::{Error, Result};
use crate::tensor::{reroll_conv, svd, unroll_conv, unvec, Tensor};

/// Right-block form requested from [`nkp_fit_lokr`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RightBlock {
    Full,
    Rank(usize),
}

fn as_matrix(delta: &Tensor) -> Result<(Tensor, LayerShape)> {
    let layer = LayerShape::from_weight_shape(delta.shape())?;
    let m = if layer.is_conv() {
        unroll_conv(delta)?
    } else {
        delta.clone()
    };
    Ok((m, layer))
}

/// `U_r·diag(S_r)` and `V_rᵀ` of a matrix.
fn truncated_factors(m: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let d = svd(m)?;
    let (p, q) = (m.rows(), m.cols());
    let mut up = vec![0.0; p * r];
    let mut down = vec![0.0; r * q];
    for t in 0..r {
        for i in 0..p {
            up[i * r + t] = d.u.at(i, t) * d.s[t];
        }
        for j in 0..q {
            down[t * q + j] = d.v.at(j, t);
        }
    }
    Ok((
        Tensor::from_parts(vec![p, r], up),
        Tensor::from_parts(vec![r, q], down),
    ))
}

/// Frobenius-optimal rank-`r` LoRA for a linear or conv delta, with `γ = 1`.
pub fn svd_fit_lora(delta: &Tensor, r: usize) -> Result<Adapter> {
    let (m, layer) = as_matrix(delta)?;
    let (p, q) = (m.rows(), m.cols());
    if r == 0 || r > p.min(q) {
        return Err(Error::invalid(format!(
            "svd_fit_lora: rank {r} outside 1..={}",
            p.min(q)
        )));
    }
    let (up, down) = truncated_factors(&m, r)?;
    let down = match layer {
        LayerShape::Conv2d { inp, kernel, .. } => reroll_conv(&down, inp, kernel)?,
        LayerShape::Linear { .. } => down,
    };
    Ok(Adapter::Lora(LoraAdapter {
        factors: LowRank::Dense { up, down },
        scale: MergeScale::unit(r)?,
    }))
}

/// Van Loan rearrangement of a `(u_p·v_p)×(u_q·v_q)` matrix: row `a·u_q + b`
/// is the row-major vectorisation of block `(a, b)`. A Kronecker product
/// `C ⊗ W` maps to the rank-1 matrix `vec(C)·vec(W)ᵀ`.
pub(crate) fn kron_rearrange(
    m: &Tensor,
    (u_p, u_q): (usize, usize),
    (v_p, v_q): (usize, usize),
) -> Tensor {
    debug_assert_eq!(m.shape(), [u_p * v_p, u_q * v_q]);
    let cols = u_q * v_q;
    let block = v_p * v_q;
    let mut out = vec![0.0; u_p * u_q * block];
    for a in 0..u_p {
        for b in 0..u_q {
            let row = (a * u_q + b) * block;
            for i in 0..v_p {
                let src = (a * v_p + i) * cols + b * v_q;
                out[row + i * v_q..row + (i + 1) * v_q]
                    .copy_from_slice(&m.data()[src..src + v_q]);
            }
        }
    }
    Tensor::from_parts(vec![u_p * u_q, block], out)
}

/// Nearest Kronecker product `C ⊗ W₂` to `delta` for the block shapes
/// implied by `factor`, optionally truncating `W₂` to rank `r`.
///
/// The scale ambiguity between the two factors is fixed by giving `C` unit
/// Frobenius norm with its first non-zero entry positive. The result has
/// `γ = 1`.
pub fn nkp_fit_lokr(delta: &Tensor, factor: KronFactor, right: RightBlock) -> Result<Adapter> {
    let (m, layer) = as_matrix(delta)?;
    let (u_p, v_p) = lokr_factor_dims(layer.out_features(), factor);
    let (u_q, v_in) = lokr_factor_dims(layer.in_features(), factor);
    let kk = layer.kernel().map_or(1, |k| k * k);
    let v_q = v_in * kk;

    let rearranged = kron_rearrange(&m, (u_p, u_q), (v_p, v_q));
    let d = svd(&rearranged)?;
    let sigma = d.s[0];
    let mut c: Vec<f64> = (0..u_p * u_q).map(|i| d.u.at(i, 0)).collect();
    let mut w: Vec<f64> = (0..v_p * v_q).map(|j| sigma * d.v.at(j, 0)).collect();
    if c.iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0) {
        c.iter_mut().for_each(|v| *v = -*v);
        w.iter_mut().for_each(|v| *v = -*v);
    }
    let kron = unvec(&Tensor::from_parts(vec![c.len()], c), u_p, u_q)?;
    let w2 = unvec(&Tensor::from_parts(vec![w.len()], w), v_p, v_q)?;
    let reroll = |t: Tensor| -> Result<Tensor> {
        match layer.kernel() {
            Some(k) => reroll_conv(&t, v_in, k),
            None => Ok(t),
        }
    };

    let (right, scale) = match right {
        RightBlock::Full => (KronRight::Full(reroll(w2)?), MergeScale::unit(1)?),
        RightBlock::Rank(r) => {
            if r == 0 || r > v_p.min(v_q) {
                return Err(Error::invalid(format!(
                    "nkp_fit_lokr: rank {r} outside 1..={} for a {v_p}×{v_q} right block",
                    v_p.min(v_q)
                )));
            }
            let (up, down) = truncated_factors(&w2, r)?;
            (
                KronRight::Factored(LowRank::Dense {
                    up,
                    down: reroll(down)?,
                }),
                MergeScale::unit(r)?,
            )
        }
    };
    Ok(Adapter::Lokr(LokrAdapter {
        kron,
        right,
        factor,
        scale,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kronecker, matmul};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn residual(a: &Adapter, delta: &Tensor) -> f64 {
        let rec = a.reconstruct().unwrap().scale(a.gamma());
        rec.sub(delta).unwrap().frobenius_norm()
    }

    #[test]
    fn svd_fit_recovers_exact_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let b = Tensor::randn(&[10, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 7], 1.0, &mut rng);
        let delta = matmul(&b, &a).unwrap();
        let fit = svd_fit_lora(&delta, 3).unwrap();
        assert_eq!(fit.gamma(), 1.0);
        assert!(residual(&fit, &delta) / delta.frobenius_norm() < 1e-10);
    }

    #[test]
    fn svd_fit_full_rank_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let delta = Tensor::randn(&[6, 9], 1.0, &mut rng);
        let fit = svd_fit_lora(&delta, 6).unwrap();
        assert!(residual(&fit, &delta) / delta.frobenius_norm() < 1e-12);
        assert!(svd_fit_lora(&delta, 7).is_err());
        assert!(svd_fit_lora(&delta, 0).is_err());
    }

    #[test]
    fn svd_fit_beats_random_factorizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let delta = Tensor::randn(&[12, 10], 1.0, &mut rng);
        let fit = svd_fit_lora(&delta, 3).unwrap();
        let best = residual(&fit, &delta);
        for _ in 0..100 {
            let b = Tensor::randn(&[12, 3], 1.0, &mut rng);
            let a = Tensor::randn(&[3, 10], 1.0, &mut rng);
            let r = matmul(&b, &a).unwrap().sub(&delta).unwrap().frobenius_norm();
            assert!(best <= r);
        }
    }

    #[test]
    fn svd_fit_conv_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let delta = Tensor::randn(&[5, 3, 3, 3], 1.0, &mut rng);
        let fit = svd_fit_lora(&delta, 5).unwrap();
        assert!(residual(&fit, &delta) / delta.frobenius_norm() < 1e-12);
    }

    #[test]
    fn rearrangement_of_kronecker_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let c = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let k = kronecker(&c, &w).unwrap();
        let r = kron_rearrange(&k, (2, 3), (4, 5));
        for row in 0..6 {
            for col in 0..20 {
                let want = c.data()[row] * w.data()[col];
                assert!((r.at(row, col) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nkp_recovers_exact_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let factor = KronFactor::Bounded(4);
        let c = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let delta = kronecker(&c, &w).unwrap();
        assert_eq!(lokr_factor_dims(24, factor), (4, 6));
        assert_eq!(lokr_factor_dims(15, factor), (3, 5));
        let fit = nkp_fit_lokr(&delta, factor, RightBlock::Full).unwrap();
        assert!(residual(&fit, &delta) / delta.frobenius_norm() < 1e-10);
        let Adapter::Lokr(l) = &fit else { unreachable!() };
        assert!((l.kron.frobenius_norm() - 1.0).abs() < 1e-12);
        let first = l.kron.data().iter().find(|v| **v != 0.0).unwrap();
        assert!(*first > 0.0);
        // C is recovered up to the positive normalising scalar.
        let ratio = c.data()[0] / l.kron.data()[0];
        assert!(l.kron.scale(ratio).max_abs_diff(&c).unwrap() < 1e-10);
    }

    #[test]
    fn nkp_with_trivial_small_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let delta = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let fit = nkp_fit_lokr(&delta, KronFactor::Bounded(4), RightBlock::Full).unwrap();
        let Adapter::Lokr(l) = &fit else { unreachable!() };
        assert_eq!(l.kron.data(), &[1.0]);
        let KronRight::Full(w) = &l.right else { unreachable!() };
        assert!(w.max_abs_diff(&delta).unwrap() < 1e-12);
    }

    #[test]
    fn nkp_residual_shrinks_with_coarser_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let delta = Tensor::randn(&[144, 144], 1.0, &mut rng);
        let residuals: Vec<f64> = [12, 8, 4]
            .iter()
            .map(|&f| {
                let fit = nkp_fit_lokr(&delta, KronFactor::Bounded(f), RightBlock::Full).unwrap();
                residual(&fit, &delta)
            })
            .collect();
        assert!(residuals[0] >= residuals[1] && residuals[1] >= residuals[2], "{residuals:?}");
    }

    #[test]
    fn nkp_low_rank_right_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let c = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let w = matmul(
            &Tensor::randn(&[4, 2], 1.0, &mut rng),
            &Tensor::randn(&[2, 4], 1.0, &mut rng),
        )
        .unwrap();
        let delta = kronecker(&c, &w).unwrap();
        let fit = nkp_fit_lokr(&delta, KronFactor::Unbounded, RightBlock::Rank(2)).unwrap();
        assert!(residual(&fit, &delta) / delta.frobenius_norm() < 1e-10);
        assert!(nkp_fit_lokr(&delta, KronFactor::Unbounded, RightBlock::Rank(5)).is_err());
    }

    #[test]
    fn nkp_conv_delta_roundtrip() {
        use crate::adapters::init::random_adapter;
        use crate::adapters::InitConfig;
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let layer = LayerShape::conv2d(6, 4, 3).unwrap();
        let cfg = InitConfig::lokr(1, 1.0, -1).with_full_right();
        let source = random_adapter(&cfg, &layer, 1.0, &mut rng).unwrap();
        let delta = source.reconstruct().unwrap();
        let fit = nkp_fit_lokr(&delta, KronFactor::Unbounded, RightBlock::Full).unwrap();
        assert!(residual(&fit, &delta) / delta.frobenius_norm() < 1e-10);
    }
}
