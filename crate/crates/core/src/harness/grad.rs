//! Pull-backs of `dL/dΔW` onto the stored factor tensors.

use crate::adapters::{kron_rearrange, Adapter, KronRight, LowRank};
use crate::error::{Error, Result};
use crate::tensor::{
    hadamard, matmul, mode_unfold, nmode_product, reroll_conv, unroll_conv, unvec, vec_rowmajor,
    Tensor,
};

fn as_matrix(t: &Tensor) -> Result<Tensor> {
    if t.ndim() == 4 {
        unroll_conv(t)
    } else {
        Ok(t.clone())
    }
}

fn like(m: Tensor, template: &Tensor) -> Result<Tensor> {
    if template.ndim() == 4 {
        reroll_conv(&m, template.shape()[1], template.shape()[2])
    } else {
        Ok(m)
    }
}

fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    matmul(m, &v.reshape(&[v.len(), 1])?)?.reshape(&[m.rows()])
}

/// Gradients for one low-rank branch, in `[up, down]` or `[core, up, down]`
/// order.
fn low_rank_vjp(lr: &LowRank, g: &Tensor) -> Result<Vec<Tensor>> {
    match lr {
        LowRank::Dense { up, down } => {
            let gm = as_matrix(g)?;
            let dm = as_matrix(down)?;
            let d_up = matmul(&gm, &dm.transpose()?)?;
            let d_down = like(matmul(&up.transpose()?, &gm)?, down)?;
            Ok(vec![d_up, d_down])
        }
        LowRank::Tucker { core, up, down } => {
            let d_core = nmode_product(&nmode_product(g, &up.transpose()?, 0)?, &down.transpose()?, 1)?;
            let by_down = nmode_product(core, down, 1)?;
            let d_up = matmul(&mode_unfold(&by_down, 0)?, &mode_unfold(g, 0)?.transpose()?)?;
            let by_up = nmode_product(core, up, 0)?;
            let d_down = matmul(&mode_unfold(&by_up, 1)?, &mode_unfold(g, 1)?.transpose()?)?;
            Ok(vec![d_core, d_up, d_down])
        }
    }
}

/// `∂L/∂θ` for every factor tensor given `g = ∂L/∂ΔW`, where `ΔW` is the
/// raw reconstruction (any merge ratio must already be folded into `g`).
/// The order matches [`Adapter::named_tensors`].
pub fn adapter_vjp(adapter: &Adapter, g: &Tensor) -> Result<Vec<Tensor>> {
    let shape = adapter.layer_shape()?.weight_shape();
    if g.shape() != shape.as_slice() {
        return Err(Error::shape("adapter_vjp", g.shape(), &shape));
    }
    match adapter {
        Adapter::Lora(a) => low_rank_vjp(&a.factors, g),
        Adapter::Loha(a) => {
            let p1 = a.first.reconstruct()?;
            let p2 = a.second.reconstruct()?;
            let mut out = low_rank_vjp(&a.first, &hadamard(g, &p2)?)?;
            out.extend(low_rank_vjp(&a.second, &hadamard(g, &p1)?)?);
            Ok(out)
        }
        Adapter::Lokr(a) => {
            let right = a.right_block()?;
            let w2 = as_matrix(&right)?;
            let gm = as_matrix(g)?;
            let (u_p, u_q) = (a.kron.rows(), a.kron.cols());
            let (v_p, v_q) = (w2.rows(), w2.cols());
            let r = kron_rearrange(&gm, (u_p, u_q), (v_p, v_q));
            let d_kron = unvec(&matvec(&r, &vec_rowmajor(&w2)?)?, u_p, u_q)?;
            let d_w2 = unvec(&matvec(&r.transpose()?, &vec_rowmajor(&a.kron)?)?, v_p, v_q)?;
            let d_right = like(d_w2, &right)?;
            let mut out = vec![d_kron];
            match &a.right {
                KronRight::Full(_) => out.push(d_right),
                KronRight::Factored(lr) => out.extend(low_rank_vjp(lr, &d_right)?),
            }
            Ok(out)
        }
    }
}
