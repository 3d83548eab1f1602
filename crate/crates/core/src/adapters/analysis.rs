use super::{Adapter, KronRight, LowRank};
use crate::error::Result;

fn branch_params(lr: &LowRank) -> Result<usize> {
    let shape = lr.output_shape()?;
    let r = lr.rank();
    let (out, inp) = (shape[0], shape[1]);
    let kk = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
    Ok(match lr {
        // r·(in·k² + out); the linear case has k = 1.
        LowRank::Dense { .. } => r * (inp * kk + out),
        // r·(r·k² + in + out), written for possibly unequal core ranks.
        LowRank::Tucker { core, .. } => {
            let (r1, r2) = (core.shape()[0], core.shape()[1]);
            r1 * r2 * kk + r1 * out + r2 * inp
        }
    })
}

/// Trainable parameter count from the closed-form expression for each
/// adapter family.
pub fn param_count(adapter: &Adapter) -> Result<usize> {
    adapter.layer_shape()?;
    Ok(match adapter {
        Adapter::Lora(a) => branch_params(&a.factors)?,
        Adapter::Loha(a) => branch_params(&a.first)? + branch_params(&a.second)?,
        Adapter::Lokr(a) => {
            let small = a.kron.rows() * a.kron.cols();
            let right = match &a.right {
                KronRight::Full(w) => w.shape().iter().product(),
                KronRight::Factored(lr) => branch_params(lr)?,
            };
            small + right
        }
    })
}

/// Upper bound on the rank of the (unrolled) update matrix.
pub fn max_rank_bound(adapter: &Adapter) -> Result<usize> {
    let (p, q) = adapter.layer_shape()?.matrix_dims();
    let cap = p.min(q);
    Ok(match adapter {
        Adapter::Lora(a) => a.factors.rank().min(cap),
        Adapter::Loha(a) => (a.first.rank() * a.second.rank()).min(cap),
        Adapter::Lokr(a) => {
            let shape = a.right_shape()?;
            let v_p = shape[0];
            let v_q: usize = shape[1..].iter().product();
            let inner = match &a.right {
                KronRight::Full(_) => v_p.min(v_q),
                KronRight::Factored(lr) => lr.rank().min(v_p).min(v_q),
            };
            (a.kron.rows().min(a.kron.cols()) * inner).min(cap)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, InitConfig, LayerShape};
    use crate::tensor::{numerical_rank, unroll_conv, DEFAULT_RANK_TOL};
    use crate::adapters::init::random_adapter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin(p: usize, q: usize) -> LayerShape {
        LayerShape::linear(p, q).unwrap()
    }

    #[test]
    fn param_count_examples() {
        let a = init_adapter(&InitConfig::lora(16, 16.0), &lin(64, 64), 0).unwrap();
        assert_eq!(param_count(&a).unwrap(), 2048);
        let a = init_adapter(&InitConfig::loha(8, 8.0), &lin(64, 64), 0).unwrap();
        assert_eq!(param_count(&a).unwrap(), 2048);
        let a = init_adapter(&InitConfig::lokr(8, 8.0, 8).with_full_right(), &lin(64, 64), 0).unwrap();
        assert_eq!(param_count(&a).unwrap(), 128);
    }

    #[test]
    fn param_count_matches_stored_scalars() {
        let layers = [lin(12, 20), LayerShape::conv2d(8, 6, 3).unwrap()];
        let cfgs = [
            InitConfig::lora(4, 1.0),
            InitConfig::lora(4, 1.0).with_tucker(),
            InitConfig::loha(3, 1.0),
            InitConfig::loha(3, 1.0).with_tucker(),
            InitConfig::lokr(2, 1.0, -1),
            InitConfig::lokr(2, 1.0, 2).with_tucker(),
            InitConfig::lokr(2, 1.0, 3).with_full_right(),
        ];
        for layer in &layers {
            for cfg in &cfgs {
                if cfg.tucker && !layer.is_conv() {
                    continue;
                }
                let a = init_adapter(cfg, layer, 1).unwrap();
                assert_eq!(param_count(&a).unwrap(), a.stored_scalars(), "{cfg:?} {layer:?}");
            }
        }
    }

    #[test]
    fn rank_bound_examples() {
        let a = init_adapter(&InitConfig::lora(8, 8.0), &lin(64, 64), 0).unwrap();
        assert_eq!(max_rank_bound(&a).unwrap(), 8);
        let a = init_adapter(&InitConfig::loha(4, 4.0), &lin(64, 64), 0).unwrap();
        assert_eq!(max_rank_bound(&a).unwrap(), 16);
        let a = init_adapter(&InitConfig::lokr(8, 8.0, 8).with_full_right(), &lin(64, 64), 0).unwrap();
        assert_eq!(max_rank_bound(&a).unwrap(), 64);
        // Over-parameterised LoRA is capped by the layer.
        let a = init_adapter(&InitConfig::lora(10, 1.0), &lin(6, 8), 0).unwrap();
        assert_eq!(max_rank_bound(&a).unwrap(), 6);
    }

    #[test]
    fn measured_rank_never_exceeds_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfgs = [
            InitConfig::lora(3, 1.0),
            InitConfig::loha(2, 1.0),
            InitConfig::lokr(2, 1.0, -1),
            InitConfig::lokr(2, 1.0, 4).with_full_right(),
        ];
        for layer in [lin(16, 24), LayerShape::conv2d(8, 4, 3).unwrap()] {
            for cfg in &cfgs {
                let a = random_adapter(cfg, &layer, 1.0, &mut rng).unwrap();
                let dw = a.reconstruct().unwrap();
                let m = if dw.ndim() == 4 { unroll_conv(&dw).unwrap() } else { dw };
                let rank = numerical_rank(&m, DEFAULT_RANK_TOL).unwrap();
                assert!(rank <= max_rank_bound(&a).unwrap(), "{cfg:?}");
            }
        }
    }
}
