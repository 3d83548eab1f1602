//! LoRA, LoHa and LoKr weight updates for linear and conv layers.
//!
//! Every adapter stores only its factor tensors plus a [`MergeScale`].
//! [`Adapter::reconstruct`] returns the raw update `ΔW`; the merge ratio
//! `γ = alpha / dim` is applied only when the update is used (forward pass or
//! merge), never folded into the stored factors.
//!
//! Shape conventions (row-major, `p = out`, `q = in` for linear layers):
//!
//! | form | tensors |
//! |------|---------|
//! | low-rank, linear | `up: p×r`, `down: r×q` |
//! | low-rank, conv | `up: out×r`, `down: r×in×k×k` |
//! | Tucker, conv | `core: r×r×k×k`, `up: r×out`, `down: r×in` |
//!
//! A Tucker branch reconstructs as `core ×₀ up ×₁ down`.

mod analysis;
mod apply;
mod conv;
mod fit;
mod init;
mod model;

pub use analysis::{max_rank_bound, param_count};
pub use apply::{combine, forward_linear, merge};
pub use conv::forward_conv;
pub use fit::{nkp_fit_lokr, svd_fit_lora, RightBlock};
pub(crate) use fit::kron_rearrange;
pub use init::{init_adapter, init_adapter_with_rng, random_adapter, InitConfig};
pub use model::{AdapterModel, LayerEntry, ModelMetadata, FORMAT_VERSION};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Lora,
    Loha,
    Lokr,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Lora => "lora",
            Algorithm::Loha => "loha",
            Algorithm::Lokr => "lokr",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" | "locon" => Ok(Algorithm::Lora),
            "loha" => Ok(Algorithm::Loha),
            "lokr" => Ok(Algorithm::Lokr),
            other => Err(Error::invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// `alpha` and `dim`; the merge ratio is `gamma = alpha / dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeScale {
    alpha: f64,
    dim: usize,
}

impl MergeScale {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!(
                "alpha must be finite and non-negative, got {alpha}"
            )));
        }
        Ok(Self { alpha, dim })
    }

    /// Scale with `gamma = 1`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(dim as f64, dim)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.alpha / self.dim as f64
    }
}

/// Upper bound `f` on the small Kronecker factor. `-1` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KronFactor {
    Unbounded,
    Bounded(usize),
}

impl KronFactor {
    pub fn from_i64(f: i64) -> Result<Self> {
        match f {
            -1 => Ok(KronFactor::Unbounded),
            f if f >= 1 => Ok(KronFactor::Bounded(f as usize)),
            f => Err(Error::invalid(format!(
                "factor must be -1 (unbounded) or at least 1, got {f}"
            ))),
        }
    }

    pub fn to_i64(self) -> i64 {
        match self {
            KronFactor::Unbounded => -1,
            KronFactor::Bounded(f) => f as i64,
        }
    }
}

/// Splits `v = u · (v / u)` with `u` the largest divisor of `v` such that
/// `u ≤ min(f, √v)`. The second component is therefore never smaller than
/// the first.
pub fn lokr_factor_dims(v: usize, factor: KronFactor) -> (usize, usize) {
    assert!(v >= 1, "dimension must be positive");
    let cap = match factor {
        KronFactor::Unbounded => usize::MAX,
        KronFactor::Bounded(f) => f,
    };
    let mut best = 1;
    let mut u = 1;
    while u <= cap && u.saturating_mul(u) <= v {
        if v.is_multiple_of(u) {
            best = u;
        }
        u += 1;
    }
    (best, v / best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerShape {
    Linear { out: usize, inp: usize },
    Conv2d { out: usize, inp: usize, kernel: usize },
}

impl LayerShape {
    pub fn linear(out: usize, inp: usize) -> Result<Self> {
        let s = LayerShape::Linear { out, inp };
        s.validate()?;
        Ok(s)
    }

    pub fn conv2d(out: usize, inp: usize, kernel: usize) -> Result<Self> {
        let s = LayerShape::Conv2d { out, inp, kernel };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerShape::Linear { out, inp } => out > 0 && inp > 0,
            LayerShape::Conv2d { out, inp, kernel } => out > 0 && inp > 0 && kernel > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("layer extents must be positive: {self:?}")))
        }
    }

    pub fn out_features(&self) -> usize {
        match *self {
            LayerShape::Linear { out, .. } | LayerShape::Conv2d { out, .. } => out,
        }
    }

    pub fn in_features(&self) -> usize {
        match *self {
            LayerShape::Linear { inp, .. } | LayerShape::Conv2d { inp, .. } => inp,
        }
    }

    pub fn kernel(&self) -> Option<usize> {
        match *self {
            LayerShape::Linear { .. } => None,
            LayerShape::Conv2d { kernel, .. } => Some(kernel),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerShape::Conv2d { .. })
    }

    /// `[out, in]` or `[out, in, k, k]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Linear { out, inp } => vec![out, inp],
            LayerShape::Conv2d { out, inp, kernel } => vec![out, inp, kernel, kernel],
        }
    }

    /// `(out, in)` for linear layers, `(out, in·k²)` for the unrolled conv.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match *self {
            LayerShape::Linear { out, inp } => (out, inp),
            LayerShape::Conv2d { out, inp, kernel } => (out, inp * kernel * kernel),
        }
    }

    pub fn from_weight_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [out, inp] => LayerShape::linear(out, inp),
            [out, inp, kh, kw] if kh == kw => LayerShape::conv2d(out, inp, kh),
            _ => Err(Error::invalid(format!(
                "weight shape {shape:?} is neither [out, in] nor [out, in, k, k]"
            ))),
        }
    }
}

/// One low-rank product, either a plain two-factor product or a Tucker
/// core with two mode matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum LowRank {
    Dense { up: Tensor, down: Tensor },
    Tucker { core: Tensor, up: Tensor, down: Tensor },
}

impl LowRank {
    pub fn rank(&self) -> usize {
        match self {
            LowRank::Dense { down, .. } => down.shape()[0],
            LowRank::Tucker { core, .. } => core.shape()[0],
        }
    }

    pub fn is_tucker(&self) -> bool {
        matches!(self, LowRank::Tucker { .. })
    }

    /// Shape of the reconstructed product.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok(match self {
            LowRank::Dense { up, down } => {
                let mut s = vec![up.shape()[0]];
                s.extend_from_slice(&down.shape()[1..]);
                s
            }
            LowRank::Tucker { core, up, down } => {
                vec![up.shape()[1], down.shape()[1], core.shape()[2], core.shape()[3]]
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LowRank::Dense { up, down } => {
                let bad = up.ndim() != 2
                    || !(down.ndim() == 2 || down.ndim() == 4)
                    || up.shape()[1] != down.shape()[0]
                    || (down.ndim() == 4 && down.shape()[2] != down.shape()[3]);
                if bad {
                    return Err(Error::Invariant(format!(
                        "low-rank factors up {:?} and down {:?} are inconsistent",
                        up.shape(),
                        down.shape()
                    )));
                }
            }
            LowRank::Tucker { core, up, down } => {
                let bad = core.ndim() != 4
                    || up.ndim() != 2
                    || down.ndim() != 2
                    || core.shape()[2] != core.shape()[3]
                    || up.shape()[0] != core.shape()[0]
                    || down.shape()[0] != core.shape()[1];
                if bad {
                    return Err(Error::Invariant(format!(
                        "Tucker factors core {:?}, up {:?}, down {:?} are inconsistent",
                        core.shape(),
                        up.shape(),
                        down.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        self.validate()?;
        apply::reconstruct_low_rank(self)
    }

    fn push_tensors<'a>(&'a self, suffix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            LowRank::Dense { up, down } => {
                out.push((format!("up{suffix}"), up));
                out.push((format!("down{suffix}"), down));
            }
            LowRank::Tucker { core, up, down } => {
                out.push((format!("core{suffix}"), core));
                out.push((format!("up{suffix}"), up));
                out.push((format!("down{suffix}"), down));
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LowRank::Dense { up, down } => vec![up, down],
            LowRank::Tucker { core, up, down } => vec![core, up, down],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub factors: LowRank,
    pub scale: MergeScale,
}

/// `ΔW = (first) ⊙ (second)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LohaAdapter {
    pub first: LowRank,
    pub second: LowRank,
    pub scale: MergeScale,
}

/// The larger Kronecker factor, kept whole or factored.
#[derive(Debug, Clone, PartialEq)]
pub enum KronRight {
    Full(Tensor),
    Factored(LowRank),
}

/// `ΔW = kron ⊗ right`. For conv layers the Kronecker structure spans the
/// channel axes and `right` carries the kernel axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LokrAdapter {
    pub kron: Tensor,
    pub right: KronRight,
    pub factor: KronFactor,
    pub scale: MergeScale,
}

impl LokrAdapter {
    /// Reconstructed right block (`W₂`, or `BA`).
    pub fn right_block(&self) -> Result<Tensor> {
        match &self.right {
            KronRight::Full(w) => Ok(w.clone()),
            KronRight::Factored(lr) => lr.reconstruct(),
        }
    }

    pub(crate) fn right_shape(&self) -> Result<Vec<usize>> {
        match &self.right {
            KronRight::Full(w) => Ok(w.shape().to_vec()),
            KronRight::Factored(lr) => lr.output_shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Loha(LohaAdapter),
    Lokr(LokrAdapter),
}

impl Adapter {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            Adapter::Lora(_) => Algorithm::Lora,
            Adapter::Loha(_) => Algorithm::Loha,
            Adapter::Lokr(_) => Algorithm::Lokr,
        }
    }

    pub fn scale(&self) -> MergeScale {
        match self {
            Adapter::Lora(a) => a.scale,
            Adapter::Loha(a) => a.scale,
            Adapter::Lokr(a) => a.scale,
        }
    }

    pub fn set_scale(&mut self, scale: MergeScale) {
        match self {
            Adapter::Lora(a) => a.scale = scale,
            Adapter::Loha(a) => a.scale = scale,
            Adapter::Lokr(a) => a.scale = scale,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.scale().gamma()
    }

    pub fn is_tucker(&self) -> bool {
        match self {
            Adapter::Lora(a) => a.factors.is_tucker(),
            Adapter::Loha(a) => a.first.is_tucker(),
            Adapter::Lokr(a) => matches!(&a.right, KronRight::Factored(lr) if lr.is_tucker()),
        }
    }

    /// The raw update `ΔW`, without the merge ratio.
    pub fn reconstruct(&self) -> Result<Tensor> {
        apply::reconstruct(self)
    }

    /// Layer geometry implied by the stored factors.
    pub fn layer_shape(&self) -> Result<LayerShape> {
        let shape = match self {
            Adapter::Lora(a) => a.factors.output_shape()?,
            Adapter::Loha(a) => {
                let s1 = a.first.output_shape()?;
                let s2 = a.second.output_shape()?;
                if s1 != s2 || a.first.is_tucker() != a.second.is_tucker() {
                    return Err(Error::Invariant(format!(
                        "LoHa branches disagree: {s1:?} vs {s2:?}"
                    )));
                }
                s1
            }
            Adapter::Lokr(a) => {
                if a.kron.ndim() != 2 {
                    return Err(Error::Invariant(format!(
                        "LoKr small factor must be a matrix, got {:?}",
                        a.kron.shape()
                    )));
                }
                let mut s = a.right_shape()?;
                s[0] *= a.kron.shape()[0];
                s[1] *= a.kron.shape()[1];
                s
            }
        };
        LayerShape::from_weight_shape(&shape).map_err(|e| Error::Invariant(e.to_string()))
    }

    /// Stored factor tensors in canonical order, keyed by their role name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            Adapter::Lora(a) => a.factors.push_tensors("", &mut out),
            Adapter::Loha(a) => {
                a.first.push_tensors("1", &mut out);
                a.second.push_tensors("2", &mut out);
            }
            Adapter::Lokr(a) => {
                out.push(("kron".to_string(), &a.kron));
                match &a.right {
                    KronRight::Full(w) => out.push(("right".to_string(), w)),
                    KronRight::Factored(lr) => lr.push_tensors("", &mut out),
                }
            }
        }
        out
    }

    /// Mutable factor tensors, in the same order as [`Adapter::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Adapter::Lora(a) => a.factors.tensors_mut(),
            Adapter::Loha(a) => {
                let mut v = a.first.tensors_mut();
                v.extend(a.second.tensors_mut());
                v
            }
            Adapter::Lokr(a) => {
                let mut v = vec![&mut a.kron];
                match &mut a.right {
                    KronRight::Full(w) => v.push(w),
                    KronRight::Factored(lr) => v.extend(lr.tensors_mut()),
                }
                v
            }
        }
    }

    /// Number of factor tensors; scaling all of them by `c` scales `ΔW` by
    /// `c^k` for this `k`.
    pub fn homogeneity_degree(&self) -> usize {
        self.named_tensors().len()
    }

    /// Literal number of stored scalars.
    pub fn stored_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds an adapter from role-named tensors.
    pub fn from_named_tensors(
        algorithm: Algorithm,
        scale: MergeScale,
        factor: KronFactor,
        mut tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut take = |role: &str| -> Option<Tensor> {
            let pos = tensors.iter().position(|(r, _)| r == role)?;
            Some(tensors.remove(pos).1)
        };
        fn branch(
            take: &mut dyn FnMut(&str) -> Option<Tensor>,
            suffix: &str,
        ) -> Result<LowRank> {
            let up = take(&format!("up{suffix}"));
            let down = take(&format!("down{suffix}"));
            let core = take(&format!("core{suffix}"));
            match (core, up, down) {
                (None, Some(up), Some(down)) => Ok(LowRank::Dense { up, down }),
                (Some(core), Some(up), Some(down)) => Ok(LowRank::Tucker { core, up, down }),
                _ => Err(Error::invalid(format!(
                    "missing up{suffix}/down{suffix} factor tensors"
                ))),
            }
        }
        let adapter = match algorithm {
            Algorithm::Lora => Adapter::Lora(LoraAdapter {
                factors: branch(&mut take, "")?,
                scale,
            }),
            Algorithm::Loha => Adapter::Loha(LohaAdapter {
                first: branch(&mut take, "1")?,
                second: branch(&mut take, "2")?,
                scale,
            }),
            Algorithm::Lokr => {
                let kron = take("kron").ok_or_else(|| Error::invalid("missing kron tensor"))?;
                let right = match take("right") {
                    Some(w) => KronRight::Full(w),
                    None => KronRight::Factored(branch(&mut take, "")?),
                };
                Adapter::Lokr(LokrAdapter {
                    kron,
                    right,
                    factor,
                    scale,
                })
            }
        };
        if let Some((role, _)) = tensors.first() {
            return Err(Error::invalid(format!(
                "unexpected tensor role '{role}' for {algorithm}"
            )));
        }
        adapter.layer_shape()?;
        Ok(adapter)
    }
}
