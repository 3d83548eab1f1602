use super::{Adapter, KronRight, LowRank};
use crate::error::{Error, Result};
use crate::kron_linear;
use crate::tensor::{hadamard, kronecker, matmul, nmode_product, reroll_conv, unroll_conv, Tensor};

pub(crate) fn reconstruct_low_rank(lr: &LowRank) -> Result<Tensor> {
    let out = match lr {
        LowRank::Dense { up, down } if down.ndim() == 2 => matmul(up, down),
        LowRank::Dense { up, down } => {
            let (inp, k) = (down.shape()[1], down.shape()[2]);
            matmul(up, &unroll_conv(down)?).and_then(|m| reroll_conv(&m, inp, k))
        }
        LowRank::Tucker { core, up, down } => {
            nmode_product(core, up, 0).and_then(|t| nmode_product(&t, down, 1))
        }
    };
    out.map_err(|e| Error::Invariant(e.to_string()))
}

pub(crate) fn reconstruct(adapter: &Adapter) -> Result<Tensor> {
    match adapter {
        Adapter::Lora(a) => a.factors.reconstruct(),
        Adapter::Loha(a) => {
            adapter.layer_shape()?;
            let first = a.first.reconstruct()?;
            let second = a.second.reconstruct()?;
            hadamard(&first, &second).map_err(|e| Error::Invariant(e.to_string()))
        }
        Adapter::Lokr(a) => {
            adapter.layer_shape()?;
            let right = a.right_block()?;
            let res = if right.ndim() == 2 {
                kronecker(&a.kron, &right)
            } else {
                let inp = a.kron.shape()[1] * right.shape()[1];
                let k = right.shape()[2];
                unroll_conv(&right)
                    .and_then(|m| kronecker(&a.kron, &m))
                    .and_then(|m| reroll_conv(&m, inp, k))
            };
            res.map_err(|e| Error::Invariant(e.to_string()))
        }
    }
}

fn matvec(m: &Tensor, x: &Tensor) -> Result<Tensor> {
    let col = x.reshape(&[x.len(), 1])?;
    let y = matmul(m, &col)?;
    y.reshape(&[m.rows()])
}

/// `ΔW·x` evaluated through the factors where the structure allows it.
fn delta_apply_linear(adapter: &Adapter, x: &Tensor) -> Result<Tensor> {
    match adapter {
        Adapter::Lora(a) => match &a.factors {
            LowRank::Dense { up, down } => matvec(up, &matvec(down, x)?),
            LowRank::Tucker { .. } => unreachable!("checked by caller"),
        },
        Adapter::Loha(_) => matvec(&adapter.reconstruct()?, x),
        Adapter::Lokr(a) => match &a.right {
            KronRight::Full(w) => kron_linear::grouped_forward_full(&a.kron, w, x),
            KronRight::Factored(LowRank::Dense { up, down }) => {
                kron_linear::grouped_forward(&a.kron, up, down, x)
            }
            KronRight::Factored(LowRank::Tucker { .. }) => unreachable!("checked by caller"),
        },
    }
}

/// `y = W0·x + b + γ·ΔW·x` for a linear adapter.
pub fn forward_linear(
    adapter: &Adapter,
    base: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
) -> Result<Tensor> {
    let shape = adapter.layer_shape()?;
    if shape.is_conv() || adapter.is_tucker() {
        return Err(Error::invalid("forward_linear requires a linear adapter"));
    }
    let (p, q) = shape.matrix_dims();
    if base.shape() != [p, q] {
        return Err(Error::shape("forward_linear", base.shape(), &[p, q]));
    }
    if x.shape() != [q] {
        return Err(Error::shape("forward_linear", x.shape(), &[q]));
    }
    let mut y = matvec(base, x)?;
    if let Some(b) = bias {
        if b.shape() != [p] {
            return Err(Error::shape("forward_linear", b.shape(), &[p]));
        }
        y = y.add(b)?;
    }
    let delta = delta_apply_linear(adapter, x)?;
    y.add_scaled(&delta, adapter.gamma())
}

/// `W0_new + λ·γ·ΔW`. The inputs are left untouched.
pub fn merge(adapter: &Adapter, base: &Tensor, lambda: f64) -> Result<Tensor> {
    let shape = adapter.layer_shape()?;
    if base.shape() != shape.weight_shape().as_slice() {
        return Err(Error::shape("merge", base.shape(), &shape.weight_shape()));
    }
    let delta = adapter.reconstruct()?;
    base.add_scaled(&delta, lambda * adapter.gamma())
}

/// `Σ λ_i·ΔW_i`.
pub fn combine(updates: &[(Tensor, f64)]) -> Result<Tensor> {
    let ((first, w0), rest) = updates
        .split_first()
        .ok_or_else(|| Error::invalid("combine needs at least one update"))?;
    let mut acc = first.scale(*w0);
    for (delta, w) in rest {
        acc = acc
            .add_scaled(delta, *w)
            .map_err(|_| Error::shape("combine", first.shape(), delta.shape()))?;
    }
    Ok(acc)
}
