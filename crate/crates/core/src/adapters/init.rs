use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    lokr_factor_dims, Adapter, Algorithm, KronFactor, KronRight, LayerShape, LohaAdapter,
    LokrAdapter, LoraAdapter, LowRank, MergeScale,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters shared by every layer of an adapter model.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub algorithm: Algorithm,
    pub dim: usize,
    pub alpha: f64,
    /// LoKr split bound; `-1` is unbounded. Ignored by LoRA and LoHa.
    pub factor: i64,
    /// Tucker form for conv layers.
    pub tucker: bool,
    /// LoKr only: keep the right block whole instead of factoring it.
    pub full_right: bool,
}

impl InitConfig {
    pub fn lora(dim: usize, alpha: f64) -> Self {
        Self {
            algorithm: Algorithm::Lora,
            dim,
            alpha,
            factor: -1,
            tucker: false,
            full_right: false,
        }
    }

    pub fn loha(dim: usize, alpha: f64) -> Self {
        Self {
            algorithm: Algorithm::Loha,
            ..Self::lora(dim, alpha)
        }
    }

    pub fn lokr(dim: usize, alpha: f64, factor: i64) -> Self {
        Self {
            algorithm: Algorithm::Lokr,
            factor,
            ..Self::lora(dim, alpha)
        }
    }

    pub fn with_tucker(mut self) -> Self {
        self.tucker = true;
        self
    }

    pub fn with_full_right(mut self) -> Self {
        self.full_right = true;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum InitMode {
    /// One factor per branch is zero, the rest `N(0, 1/r)`.
    ZeroUpdate,
    /// Every factor drawn from `N(0, std²)`.
    AllRandom { std: f64 },
}

/// Zero-update initialization seeded from `seed`.
pub fn init_adapter(cfg: &InitConfig, layer: &LayerShape, seed: u64) -> Result<Adapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_adapter_with_rng(cfg, layer, &mut rng)
}

/// Zero-update initialization drawing from a caller-supplied generator.
///
/// The factor that is zeroed is `up` for LoRA, the second branch's `down`
/// for LoHa, and `down` (or the whole right block) for LoKr. The remaining
/// factors are i.i.d. Gaussian with standard deviation `1/√dim`.
pub fn init_adapter_with_rng<R: Rng + ?Sized>(
    cfg: &InitConfig,
    layer: &LayerShape,
    rng: &mut R,
) -> Result<Adapter> {
    build_adapter(cfg, layer, rng, InitMode::ZeroUpdate)
}

/// Every factor non-zero, drawn from `N(0, std²)`.
pub fn random_adapter<R: Rng + ?Sized>(
    cfg: &InitConfig,
    layer: &LayerShape,
    std: f64,
    rng: &mut R,
) -> Result<Adapter> {
    build_adapter(cfg, layer, rng, InitMode::AllRandom { std })
}

struct Drawer<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    std: f64,
}

impl<R: Rng + ?Sized> Drawer<'_, R> {
    fn draw(&mut self, shape: &[usize], zero: bool) -> Tensor {
        if zero {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, self.std, self.rng)
        }
    }

    /// Low-rank branch producing an `out × in (× k × k)` update.
    fn low_rank(
        &mut self,
        out: usize,
        inp: usize,
        kernel: Option<usize>,
        r: usize,
        tucker: bool,
        zero: Option<Zeroed>,
    ) -> LowRank {
        match (kernel, tucker) {
            (Some(k), true) => LowRank::Tucker {
                core: self.draw(&[r, r, k, k], false),
                up: self.draw(&[r, out], zero == Some(Zeroed::Up)),
                down: self.draw(&[r, inp], zero == Some(Zeroed::Down)),
            },
            (Some(k), false) => LowRank::Dense {
                up: self.draw(&[out, r], zero == Some(Zeroed::Up)),
                down: self.draw(&[r, inp, k, k], zero == Some(Zeroed::Down)),
            },
            (None, _) => LowRank::Dense {
                up: self.draw(&[out, r], zero == Some(Zeroed::Up)),
                down: self.draw(&[r, inp], zero == Some(Zeroed::Down)),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Zeroed {
    Up,
    Down,
}

pub(crate) fn build_adapter<R: Rng + ?Sized>(
    cfg: &InitConfig,
    layer: &LayerShape,
    rng: &mut R,
    mode: InitMode,
) -> Result<Adapter> {
    layer.validate()?;
    let scale = MergeScale::new(cfg.alpha, cfg.dim)?;
    let factor = KronFactor::from_i64(cfg.factor)?;
    if cfg.tucker && !layer.is_conv() {
        return Err(Error::invalid(
            "Tucker decomposition is only defined for conv layers",
        ));
    }
    if cfg.tucker && cfg.algorithm == Algorithm::Lokr && cfg.full_right {
        return Err(Error::invalid(
            "a full LoKr right block has no Tucker form",
        ));
    }
    if cfg.full_right && cfg.algorithm != Algorithm::Lokr {
        return Err(Error::invalid("full_right only applies to LoKr"));
    }
    let r = cfg.dim;
    let (zeroing, std) = match mode {
        InitMode::ZeroUpdate => (true, 1.0 / (r as f64).sqrt()),
        InitMode::AllRandom { std } => (false, std),
    };
    let zero = |z: Zeroed| if zeroing { Some(z) } else { None };
    let mut d = Drawer { rng, std };
    let (out, inp, kernel) = (layer.out_features(), layer.in_features(), layer.kernel());

    Ok(match cfg.algorithm {
        Algorithm::Lora => Adapter::Lora(LoraAdapter {
            factors: d.low_rank(out, inp, kernel, r, cfg.tucker, zero(Zeroed::Up)),
            scale,
        }),
        Algorithm::Loha => Adapter::Loha(LohaAdapter {
            first: d.low_rank(out, inp, kernel, r, cfg.tucker, None),
            second: d.low_rank(out, inp, kernel, r, cfg.tucker, zero(Zeroed::Down)),
            scale,
        }),
        Algorithm::Lokr => {
            let (u_out, v_out) = lokr_factor_dims(out, factor);
            let (u_in, v_in) = lokr_factor_dims(inp, factor);
            let kron = d.draw(&[u_out, u_in], false);
            let right = if cfg.full_right {
                let mut shape = vec![v_out, v_in];
                if let Some(k) = kernel {
                    shape.extend([k, k]);
                }
                KronRight::Full(d.draw(&shape, zeroing))
            } else {
                KronRight::Factored(d.low_rank(
                    v_out,
                    v_in,
                    kernel,
                    r,
                    cfg.tucker,
                    zero(Zeroed::Down),
                ))
            };
            Adapter::Lokr(LokrAdapter {
                kron,
                right,
                factor,
                scale,
            })
        }
    })
}
