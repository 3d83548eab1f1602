//! Conv updates evaluated as chains of small convolutions rather than by
//! convolving with the reconstructed kernel.

use super::{Adapter, KronRight, LowRank};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, Tensor};

fn pointwise(m: &Tensor) -> Result<Tensor> {
    m.reshape(&[m.rows(), m.cols(), 1, 1])
}

/// Dense branch: `k×k` conv into `r` channels, then a `1×1` conv.
/// Tucker branch: `1×1` into `r`, `k×k` core, `1×1` out.
fn low_rank_chain(lr: &LowRank, x: &Tensor) -> Result<Tensor> {
    lr.validate()?;
    match lr {
        LowRank::Dense { up, down } => {
            if down.ndim() != 4 {
                return Err(Error::invalid("conv chain needs a conv-shaped down factor"));
            }
            let hidden = conv2d(down, x)?;
            conv2d(&pointwise(up)?, &hidden)
        }
        LowRank::Tucker { core, up, down } => {
            let z = conv2d(&pointwise(down)?, x)?;
            let w = conv2d(core, &z)?;
            conv2d(&pointwise(&up.transpose()?)?, &w)
        }
    }
}

/// Rewrites `(first) ⊙ (second)` as a single branch of rank `r₁·r₂`:
/// the Hadamard product of two rank-`r` products is a rank-`r²` product
/// whose factors are row/column-wise Khatri–Rao products of the originals.
fn loha_as_single_branch(first: &LowRank, second: &LowRank) -> Result<LowRank> {
    match (first, second) {
        (LowRank::Dense { up: u1, down: d1 }, LowRank::Dense { up: u2, down: d2 }) => {
            let (out, r1, r2) = (u1.rows(), u1.cols(), u2.cols());
            let mut up = vec![0.0; out * r1 * r2];
            for o in 0..out {
                for s in 0..r1 {
                    for t in 0..r2 {
                        up[o * r1 * r2 + s * r2 + t] = u1.at(o, s) * u2.at(o, t);
                    }
                }
            }
            let cols = d1.len() / r1;
            let mut down = vec![0.0; r1 * r2 * cols];
            for s in 0..r1 {
                for t in 0..r2 {
                    let dst = &mut down[(s * r2 + t) * cols..(s * r2 + t + 1) * cols];
                    let a = &d1.data()[s * cols..(s + 1) * cols];
                    let b = &d2.data()[t * cols..(t + 1) * cols];
                    for ((o, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                        *o = x * y;
                    }
                }
            }
            let mut down_shape = d1.shape().to_vec();
            down_shape[0] = r1 * r2;
            Ok(LowRank::Dense {
                up: Tensor::from_parts(vec![out, r1 * r2], up),
                down: Tensor::from_parts(down_shape, down),
            })
        }
        (
            LowRank::Tucker { core: c1, up: u1, down: d1 },
            LowRank::Tucker { core: c2, up: u2, down: d2 },
        ) => {
            let pair_rows = |m1: &Tensor, m2: &Tensor| {
                let (r1, r2, n) = (m1.rows(), m2.rows(), m1.cols());
                let mut data = vec![0.0; r1 * r2 * n];
                for s in 0..r1 {
                    for t in 0..r2 {
                        for j in 0..n {
                            data[(s * r2 + t) * n + j] = m1.at(s, j) * m2.at(t, j);
                        }
                    }
                }
                Tensor::from_parts(vec![r1 * r2, n], data)
            };
            let (a1, b1, kk) = (c1.shape()[0], c1.shape()[1], c1.shape()[2] * c1.shape()[3]);
            let (a2, b2) = (c2.shape()[0], c2.shape()[1]);
            let rows = a1 * a2;
            let cols = b1 * b2;
            let mut core = vec![0.0; rows * cols * kk];
            for s in 0..a1 {
                for s2 in 0..a2 {
                    for t in 0..b1 {
                        for t2 in 0..b2 {
                            let dst = ((s * a2 + s2) * cols + t * b2 + t2) * kk;
                            let x = &c1.data()[(s * b1 + t) * kk..(s * b1 + t + 1) * kk];
                            let y = &c2.data()[(s2 * b2 + t2) * kk..(s2 * b2 + t2 + 1) * kk];
                            for (i, (&p, &q)) in x.iter().zip(y).enumerate() {
                                core[dst + i] = p * q;
                            }
                        }
                    }
                }
            }
            Ok(LowRank::Tucker {
                core: Tensor::from_parts(
                    vec![rows, cols, c1.shape()[2], c1.shape()[3]],
                    core,
                ),
                up: pair_rows(u1, u2),
                down: pair_rows(d1, d2),
            })
        }
        _ => Err(Error::Invariant(
            "LoHa branches must both be plain or both be Tucker".into(),
        )),
    }
}

/// Input channels are split into `u_in` groups of `v_in`; each group goes
/// through the right-block chain, and the small Kronecker factor mixes the
/// group outputs.
fn lokr_chain(kron: &Tensor, right: &KronRight, x: &Tensor) -> Result<Tensor> {
    let (u_out, u_in) = (kron.rows(), kron.cols());
    let channels = x.shape()[0];
    if !channels.is_multiple_of(u_in) {
        return Err(Error::shape("forward_conv", kron.shape(), x.shape()));
    }
    let v_in = channels / u_in;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let group_len = v_in * h * w;
    let mut outputs = Vec::with_capacity(u_in);
    for b in 0..u_in {
        let xb = Tensor::from_parts(
            vec![v_in, h, w],
            x.data()[b * group_len..(b + 1) * group_len].to_vec(),
        );
        let zb = match right {
            KronRight::Full(wr) => conv2d(wr, &xb)?,
            KronRight::Factored(lr) => low_rank_chain(lr, &xb)?,
        };
        outputs.push(zb);
    }
    let z_len = outputs[0].len();
    let v_out = outputs[0].shape()[0];
    let mut out = vec![0.0; u_out * z_len];
    for a in 0..u_out {
        let dst = &mut out[a * z_len..(a + 1) * z_len];
        for (b, zb) in outputs.iter().enumerate() {
            let c = kron.at(a, b);
            for (d, &z) in dst.iter_mut().zip(zb.data()) {
                *d += c * z;
            }
        }
    }
    let spatial = &outputs[0].shape()[1..];
    Ok(Tensor::from_parts(
        vec![u_out * v_out, spatial[0], spatial[1]],
        out,
    ))
}

/// `ΔW * x` through the adapter's factored conv chain.
pub(crate) fn delta_conv(adapter: &Adapter, x: &Tensor) -> Result<Tensor> {
    match adapter {
        Adapter::Lora(a) => low_rank_chain(&a.factors, x),
        Adapter::Loha(a) => low_rank_chain(&loha_as_single_branch(&a.first, &a.second)?, x),
        Adapter::Lokr(a) => lokr_chain(&a.kron, &a.right, x),
    }
}

/// `conv(K0, x) + b + γ·(ΔW * x)`, with the update evaluated as a chain of
/// convolutions. Agrees with `conv(K0 + γ·ΔW, x)` up to rounding.
pub fn forward_conv(
    adapter: &Adapter,
    base: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
) -> Result<Tensor> {
    let shape = adapter.layer_shape()?;
    if !shape.is_conv() {
        return Err(Error::invalid("forward_conv requires a conv adapter"));
    }
    if base.shape() != shape.weight_shape().as_slice() {
        return Err(Error::shape("forward_conv", base.shape(), &shape.weight_shape()));
    }
    x.expect_rank("forward_conv", 3)?;
    if x.shape()[0] != shape.in_features() {
        return Err(Error::shape("forward_conv", base.shape(), x.shape()));
    }
    let mut y = conv2d(base, x)?;
    if let Some(b) = bias {
        let out = shape.out_features();
        if b.shape() != [out] {
            return Err(Error::shape("forward_conv", b.shape(), &[out]));
        }
        let plane = y.len() / out;
        for (o, &bo) in b.data().iter().enumerate() {
            for v in &mut y.data_mut()[o * plane..(o + 1) * plane] {
                *v += bo;
            }
        }
    }
    let delta = delta_conv(adapter, x)?;
    y.add_scaled(&delta, adapter.gamma())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init::random_adapter;
    use crate::adapters::{init_adapter, InitConfig, LayerShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_oracle(adapter: &Adapter, base: &Tensor, x: &Tensor) -> Tensor {
        let k = base
            .add_scaled(&adapter.reconstruct().unwrap(), adapter.gamma())
            .unwrap();
        conv2d(&k, x).unwrap()
    }

    #[test]
    fn chains_match_dense_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let configs = [
            InitConfig::lora(3, 2.0),
            InitConfig::lora(3, 2.0).with_tucker(),
            InitConfig::loha(2, 1.0),
            InitConfig::loha(2, 1.0).with_tucker(),
            InitConfig::lokr(2, 1.0, -1),
            InitConfig::lokr(2, 1.0, -1).with_tucker(),
            InitConfig::lokr(2, 1.0, -1).with_full_right(),
        ];
        for k in [1, 3] {
            let layer = LayerShape::conv2d(6, 4, k).unwrap();
            for cfg in &configs {
                let a = random_adapter(cfg, &layer, 0.7, &mut rng).unwrap();
                let base = Tensor::randn(&layer.weight_shape(), 1.0, &mut rng);
                let x = Tensor::randn(&[4, 6, 5], 1.0, &mut rng);
                let got = forward_conv(&a, &base, None, &x).unwrap();
                let want = dense_oracle(&a, &base, &x);
                assert!(got.rel_frobenius_err(&want).unwrap() < 1e-10, "{cfg:?} k={k}");
            }
        }
    }

    #[test]
    fn initialized_adapter_is_plain_conv() {
        let layer = LayerShape::conv2d(3, 2, 3).unwrap();
        let a = init_adapter(&InitConfig::lora(2, 2.0), &layer, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let base = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let b = Tensor::vector(&[1.0, -1.0, 0.5]).unwrap();
        let got = forward_conv(&a, &base, Some(&b), &x).unwrap();
        let mut want = conv2d(&base, &x).unwrap();
        for o in 0..3 {
            for v in &mut want.data_mut()[o * 4..(o + 1) * 4] {
                *v += b.data()[o];
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn one_by_one_conv_is_linear_on_pixels() {
        use crate::adapters::forward_linear;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let conv_layer = LayerShape::conv2d(3, 4, 1).unwrap();
        let a = random_adapter(&InitConfig::lora(2, 1.0), &conv_layer, 1.0, &mut rng).unwrap();
        let base = Tensor::randn(&[3, 4, 1, 1], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 2, 3], 1.0, &mut rng);
        let y = forward_conv(&a, &base, None, &x).unwrap();

        let Adapter::Lora(lora) = &a else { unreachable!() };
        let LowRank::Dense { up, down } = &lora.factors else { unreachable!() };
        let linear = Adapter::Lora(crate::adapters::LoraAdapter {
            factors: LowRank::Dense {
                up: up.clone(),
                down: down.reshape(&[2, 4]).unwrap(),
            },
            scale: lora.scale,
        });
        let w = base.reshape(&[3, 4]).unwrap();
        for pix in 0..6 {
            let xv: Vec<f64> = (0..4).map(|c| x.data()[c * 6 + pix]).collect();
            let yl = forward_linear(&linear, &w, None, &Tensor::vector(&xv).unwrap()).unwrap();
            for o in 0..3 {
                assert!((yl.data()[o] - y.data()[o * 6 + pix]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_input() {
        let layer = LayerShape::conv2d(3, 2, 3).unwrap();
        let a = init_adapter(&InitConfig::lora(2, 2.0), &layer, 1).unwrap();
        let base = Tensor::zeros(&[3, 2, 3, 3]);
        assert!(forward_conv(&a, &base, None, &Tensor::zeros(&[3, 4, 4])).is_err());
        assert!(forward_conv(&a, &base, None, &Tensor::zeros(&[2, 2, 2])).is_err());
        assert!(forward_conv(&a, &Tensor::zeros(&[3, 2, 1, 1]), None, &Tensor::zeros(&[2, 4, 4])).is_err());
    }
}
