use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{AdapterInit, Dataset, ToyModel};
use super::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::adapters::{random_adapter, Adapter, InitConfig, LayerShape, MergeScale};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adapter families exercised by the harness. The Tucker forms run on a
/// convolutional toy model, the rest on a fully connected one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Lora,
    Loha,
    /// LoKr with a full right block.
    Lokr,
    /// LoKr with the right block factored as `BA`.
    LokrFactored,
    LoraTucker,
    LohaTucker,
    LokrTucker,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Lora,
        Variant::Loha,
        Variant::Lokr,
        Variant::LokrFactored,
        Variant::LoraTucker,
        Variant::LohaTucker,
        Variant::LokrTucker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::Loha => "loha",
            Variant::Lokr => "lokr",
            Variant::LokrFactored => "lokr-factored",
            Variant::LoraTucker => "lora-tucker",
            Variant::LohaTucker => "loha-tucker",
            Variant::LokrTucker => "lokr-tucker",
        }
    }

    pub fn is_tucker(self) -> bool {
        matches!(self, Variant::LoraTucker | Variant::LohaTucker | Variant::LokrTucker)
    }

    /// Adapter hyperparameters with rank `dim` and merge ratio `gamma`.
    pub fn init_config(self, dim: usize, gamma: f64) -> InitConfig {
        let alpha = gamma * dim as f64;
        let cfg = match self {
            Variant::Lora | Variant::LoraTucker => InitConfig::lora(dim, alpha),
            Variant::Loha | Variant::LohaTucker => InitConfig::loha(dim, alpha),
            Variant::Lokr => InitConfig::lokr(dim, alpha, -1).with_full_right(),
            Variant::LokrFactored | Variant::LokrTucker => InitConfig::lokr(dim, alpha, -1),
        };
        if self.is_tucker() {
            cfg.with_tucker()
        } else {
            cfg
        }
    }

    /// Number of factor tensors.
    pub fn degree(self) -> usize {
        match self {
            Variant::Lora | Variant::Lokr => 2,
            Variant::LokrFactored | Variant::LoraTucker => 3,
            Variant::Loha | Variant::LokrTucker => 4,
            Variant::LohaTucker => 6,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown harness variant '{s}'")))
    }
}

/// A deterministic problem: model plus a fixed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub model: ToyModel,
    pub data: Dataset,
}

/// Adapter rank used by [`toy_problem`] for fully connected variants.
pub const TOY_DIM: usize = 4;
/// Adapter rank for the Tucker variants.
pub const TOY_CONV_DIM: usize = 2;
/// Fully connected geometry.
pub const TOY_DIMS: [usize; 3] = [16, 12, 8];
/// Training pairs for the fully connected toy.
pub const TOY_SAMPLES: usize = 64;
/// Conv geometry: channels, kernel, input size.
pub const TOY_CONV: ([usize; 3], usize, usize) = ([3, 4, 2], 3, 7);
/// Training pairs for the conv toy.
pub const TOY_CONV_SAMPLES: usize = 16;
/// Standard deviation of the target offset from the frozen network's output.
pub const TOY_TARGET_NOISE: f64 = 1e-2;

/// The default toy for `variant`, with merge ratio `gamma`.
///
/// Inputs are standard normal. Targets are the output of the frozen base
/// network plus `N(0, TOY_TARGET_NOISE²)` noise, so the adapters learn a
/// small correction to a model that already nearly fits.
pub fn toy_problem(variant: Variant, gamma: f64, init: AdapterInit, seed: u64) -> Result<ToyProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = if variant.is_tucker() { TOY_CONV_DIM } else { TOY_DIM };
    let cfg = variant.init_config(dim, gamma);
    let (model, n) = if variant.is_tucker() {
        let (channels, kernel, size) = TOY_CONV;
        (ToyModel::conv_chain(&channels, kernel, size, &cfg, init, &mut rng)?, TOY_CONV_SAMPLES)
    } else {
        (ToyModel::linear_chain(&TOY_DIMS, &cfg, init, &mut rng)?, TOY_SAMPLES)
    };
    let noise = Dataset::random(model.input_shape(), model.output_shape(), n, &mut rng)?;
    let mut frozen = model.clone();
    for adapter in frozen.adapters_mut() {
        for t in adapter.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }
    let targets = frozen
        .forward(noise.inputs())?
        .add_scaled(noise.targets(), TOY_TARGET_NOISE)?;
    let data = Dataset::new(noise.inputs().clone(), targets)?;
    Ok(ToyProblem { model, data })
}

/// Loss before each step and every layer's raw `ΔW` after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub snapshots: Vec<Vec<Tensor>>,
}

/// Full-batch training of the adapter factors for `steps` steps.
pub fn train(model: &mut ToyModel, optimizer: &OptimizerConfig, data: &Dataset, steps: usize) -> Result<TrainTrace> {
    optimizer.validate(model.layers().len())?;
    let mut state = OptimizerState::new(optimizer.clone());
    let mut trace = TrainTrace {
        losses: Vec::with_capacity(steps),
        snapshots: Vec::with_capacity(steps),
    };
    for step in 0..steps {
        let (loss, grads) = model.loss_and_grads(data)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        state.step(model.params_mut(), &grads);
        let deltas = model.deltas()?;
        if deltas.iter().any(|d| d.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        trace.losses.push(loss);
        trace.snapshots.push(deltas);
    }
    Ok(trace)
}

/// Worst `‖dec(c·θ) − cᵏ·dec(θ)‖ / ‖cᵏ·dec(θ)‖` over `trials` random
/// adapters, where `k` is the number of factor tensors.
pub fn homogeneity_check(variant: Variant, c: f64, trials: usize, seed: u64) -> Result<f64> {
    if c == 0.0 || !c.is_finite() {
        return Err(Error::invalid(format!("homogeneity scale must be finite and non-zero, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = if variant.is_tucker() {
        LayerShape::conv2d(6, 4, 3)?
    } else {
        LayerShape::linear(12, 16)?
    };
    let cfg = variant.init_config(3, 1.0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let adapter = random_adapter(&cfg, &layer, 1.0, &mut rng)?;
        let k = adapter.homogeneity_degree() as i32;
        let want = adapter.reconstruct()?.scale(c.powi(k));
        let mut scaled = adapter.clone();
        for t in scaled.tensors_mut() {
            *t = t.scale(c);
        }
        let got = scaled.reconstruct()?;
        worst = worst.max(got.rel_frobenius_err(&want)?);
    }
    Ok(worst)
}

fn rescale(adapter: &mut Adapter, factor: f64) -> Result<()> {
    for t in adapter.tensors_mut() {
        *t = t.scale(factor);
    }
    let dim = adapter.scale().dim();
    adapter.set_scale(MergeScale::new(dim as f64, dim)?);
    Ok(())
}

/// Baseline learning rates for [`verify_merge_ratio`].
pub fn baseline_learning_rate(kind: &OptimizerKind) -> f64 {
    match kind {
        OptimizerKind::Sgd => 5.0,
        OptimizerKind::Adam { .. } => 1e-3,
        OptimizerKind::Adagrad { .. } => 3e-4,
    }
}

/// Product of factor scales targeted by [`verify_init_std`].
pub const VERIFY_INIT_SCALE: f64 = 1e-6;

/// Factor standard deviation `VERIFY_INIT_SCALE^{1/k}` for [`verify_merge_ratio`]
/// runs, so every variant starts with an update of similar size.
pub fn verify_init_std(variant: Variant) -> f64 {
    VERIFY_INIT_SCALE.powf(1.0 / variant.degree() as f64)
}

/// Outcome of one merge-ratio comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRatioReport {
    /// Homogeneity degree of the adapters.
    pub degree: usize,
    /// Largest `|s·ΔW_A − ΔW_B|` over steps, layers and entries.
    pub max_deviation: f64,
    /// Largest `|ΔW_B|` seen, for scale.
    pub max_delta: f64,
    /// Largest `|ΔW_B(t) − ΔW_B(0)|`: how far training moved the update.
    pub max_change: f64,
}

/// Trains the toy twice and compares the effective updates.
///
/// Run A uses merge ratio `s` with the baseline initialisation and learning
/// rate. Run B uses merge ratio 1, factors multiplied by `s^{1/k}` and
/// learning rates by `s^{c/k}`, with `c` from
/// [`OptimizerKind::lr_exponent`]. Both runs start from the same random,
/// fully non-zero factors.
pub fn verify_merge_ratio(
    variant: Variant,
    s: f64,
    kind: OptimizerKind,
    steps: usize,
    seed: u64,
) -> Result<MergeRatioReport> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::invalid(format!("merge ratio must be positive, got {s}")));
    }
    let init = AdapterInit::Random { std: verify_init_std(variant) };
    let problem = toy_problem(variant, s, init, seed)?;
    let layers = problem.model.layers().len();
    let k = variant.degree() as f64;
    let lr = baseline_learning_rate(&kind);

    let mut run_a = problem.model.clone();
    let opt_a = OptimizerConfig::uniform(kind, lr, layers);
    let trace_a = train(&mut run_a, &opt_a, &problem.data, steps)?;

    let mut run_b = problem.model.clone();
    for adapter in run_b.adapters_mut() {
        rescale(adapter, s.powf(1.0 / k))?;
    }
    let opt_b = OptimizerConfig::uniform(kind, lr * s.powf(kind.lr_exponent() / k), layers);
    let trace_b = train(&mut run_b, &opt_b, &problem.data, steps)?;

    let mut report = MergeRatioReport {
        degree: variant.degree(),
        max_deviation: 0.0,
        max_delta: 0.0,
        max_change: 0.0,
    };
    let start = problem.model.deltas()?;
    for (a, b) in trace_a.snapshots.iter().zip(&trace_b.snapshots) {
        for (da, db) in a.iter().zip(b) {
            report.max_deviation = report.max_deviation.max(da.scale(s).max_abs_diff(db)?);
            report.max_delta = report.max_delta.max(db.max_abs());
        }
        for (db, d0) in b.iter().zip(&start) {
            report.max_change = report.max_change.max(db.max_abs_diff(&d0.scale(s))?);
        }
    }
    Ok(report)
}

/// Worst per-tensor `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over every factor of the toy's adapters, with central differences of
/// step `h`.
pub fn gradient_check(variant: Variant, h: f64, seed: u64) -> Result<f64> {
    let problem = toy_problem(variant, 1.5, AdapterInit::Random { std: 0.5 }, seed)?;
    let (_, analytic) = problem.model.loss_and_grads(&problem.data)?;
    let loss = |m: &ToyModel| -> Result<f64> {
        let (l, _) = m.loss_and_grads(&problem.data)?;
        Ok(l)
    };
    let mut worst = 0.0f64;
    for (l, layer_grads) in analytic.iter().enumerate() {
        for (t, grad) in layer_grads.iter().enumerate() {
            let mut numeric = vec![0.0; grad.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut plus = problem.model.clone();
                plus.params_mut()[l][t].data_mut()[j] += h;
                let mut minus = problem.model.clone();
                minus.params_mut()[l][t].data_mut()[j] -= h;
                *slot = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            }
            let numeric = Tensor::new(grad.shape(), numeric)?;
            let denom = grad.frobenius_norm().max(numeric.frobenius_norm());
            if denom > 0.0 {
                worst = worst.max(grad.sub(&numeric)?.frobenius_norm() / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{Algorithm, KronRight, LowRank};

    #[test]
    fn variant_names_and_degrees() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let p = toy_problem(v, 1.0, AdapterInit::Random { std: 0.1 }, 0).unwrap();
            for layer in p.model.layers() {
                assert_eq!(layer.adapter.homogeneity_degree(), v.degree(), "{v}");
                assert_eq!(layer.adapter.is_tucker(), v.is_tucker());
            }
        }
        assert!("glora".parse::<Variant>().is_err());
    }

    #[test]
    fn homogeneity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LayerShape::linear(12, 16).unwrap();
        for (v, c, factor) in [(Variant::Lora, 2.0, 4.0), (Variant::Loha, 2.0, 16.0), (Variant::LokrFactored, 3.0, 27.0)] {
            let a = random_adapter(&v.init_config(3, 1.0), &layer, 1.0, &mut rng).unwrap();
            let mut b = a.clone();
            for t in b.tensors_mut() {
                *t = t.scale(c);
            }
            let want = a.reconstruct().unwrap().scale(factor);
            assert!(b.reconstruct().unwrap().rel_frobenius_err(&want).unwrap() < 1e-14);
        }
        for v in Variant::ALL {
            assert!(homogeneity_check(v, 1.7, 10, 3).unwrap() < 1e-12, "{v}");
        }
        assert!(homogeneity_check(Variant::Lora, 0.0, 1, 0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_zero_update() {
        let mut p = toy_problem(Variant::Lora, 1.0, AdapterInit::ZeroUpdate, 2).unwrap();
        let opt = OptimizerConfig::uniform(OptimizerKind::adam(0.0), 0.0, 2);
        let trace = train(&mut p.model, &opt, &p.data, 5).unwrap();
        assert_eq!(trace.snapshots.len(), 5);
        assert!(trace.snapshots.iter().flatten().all(Tensor::is_all_zero));
        assert!(trace.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_sgd_step_on_one_layer_lora() {
        // y = (W0 + γBA)x + b, L = mean((y − t)²) over the batch.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = InitConfig::lora(2, 3.0);
        let mut model = ToyModel::linear_chain(&[4, 3], &cfg, AdapterInit::Random { std: 0.5 }, &mut rng).unwrap();
        let data = Dataset::random(&[4], &[3], 5, &mut rng).unwrap();
        let (b0, a0) = match &model.layers()[0].adapter {
            Adapter::Lora(l) => match &l.factors {
                LowRank::Dense { up, down } => (up.clone(), down.clone()),
                _ => unreachable!(),
            },
            _ => unreachable!(),
        };
        let layer = model.layers()[0].clone();
        let gamma = 1.5;
        // Hand-rolled gradient, entry by entry.
        let (n, p, q, r) = (5, 3, 4, 2);
        let x = |s: usize, j: usize| data.inputs().data()[s * q + j];
        let w = |i: usize, j: usize| {
            layer.base().at(i, j) + gamma * (0..r).map(|m| b0.at(i, m) * a0.at(m, j)).sum::<f64>()
        };
        let mut g = vec![vec![0.0; q]; p];
        for s in 0..n {
            for i in 0..p {
                let y = (0..q).map(|j| w(i, j) * x(s, j)).sum::<f64>() + layer.bias().data()[i];
                let e = 2.0 * (y - data.targets().data()[s * p + i]) / (n * p) as f64;
                for (j, gij) in g[i].iter_mut().enumerate() {
                    *gij += gamma * e * x(s, j);
                }
            }
        }
        let lr = 0.05;
        let mut b1 = b0.clone();
        let mut a1 = a0.clone();
        for i in 0..p {
            for m in 0..r {
                let d: f64 = (0..q).map(|j| g[i][j] * a0.at(m, j)).sum();
                b1.data_mut()[i * r + m] -= lr * d;
            }
        }
        for m in 0..r {
            for j in 0..q {
                let d: f64 = (0..p).map(|i| b0.at(i, m) * g[i][j]).sum();
                a1.data_mut()[m * q + j] -= lr * d;
            }
        }
        let trace = train(&mut model, &OptimizerConfig::uniform(OptimizerKind::Sgd, lr, 1), &data, 1).unwrap();
        let want = crate::tensor::matmul(&b1, &a1).unwrap();
        assert!(trace.snapshots[0][0].max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn training_is_deterministic() {
        for v in [Variant::Loha, Variant::LokrTucker] {
            let run = || {
                let mut p = toy_problem(v, 2.0, AdapterInit::Random { std: 0.3 }, 11).unwrap();
                let opt = OptimizerConfig::uniform(OptimizerKind::adam(1e-8), 1e-3, 2);
                train(&mut p.model, &opt, &p.data, 4).unwrap()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut p = toy_problem(Variant::Lora, 1.0, AdapterInit::Random { std: 1.0 }, 0).unwrap();
        let opt = OptimizerConfig::uniform(OptimizerKind::Sgd, 1e6, 2);
        match train(&mut p.model, &opt, &p.data, 50) {
            Err(Error::Diverged { step, .. }) => assert!(step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn unit_ratio_is_exact() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam(0.0), OptimizerKind::adam(1e-8)] {
            let r = verify_merge_ratio(Variant::Loha, 1.0, kind, 10, 4).unwrap();
            assert_eq!(r.max_deviation, 0.0);
        }
    }

    #[test]
    fn merge_ratio_examples() {
        let r = verify_merge_ratio(Variant::Lora, 4.0, OptimizerKind::Sgd, 100, 0).unwrap();
        assert!(r.max_deviation < 1e-8, "{r:?}");
        let r = verify_merge_ratio(Variant::Loha, 4.0, OptimizerKind::adam(0.0), 100, 0).unwrap();
        assert!(r.max_deviation < 1e-8, "{r:?}");
        let r = verify_merge_ratio(Variant::Lora, 100.0, OptimizerKind::adam(1e-8), 100, 0).unwrap();
        assert!(r.max_deviation > 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for v in [Variant::Lora, Variant::Lokr, Variant::LohaTucker] {
            let err = gradient_check(v, 1e-6, 1).unwrap();
            assert!(err < 1e-5, "{v}: {err}");
        }
    }

    #[test]
    fn base_weights_never_change() {
        let p = toy_problem(Variant::LokrFactored, 2.0, AdapterInit::Random { std: 0.3 }, 5).unwrap();
        let mut m = p.model.clone();
        train(&mut m, &OptimizerConfig::uniform(OptimizerKind::adagrad(0.0), 1e-2, 2), &p.data, 3).unwrap();
        for (before, after) in p.model.layers().iter().zip(m.layers()) {
            assert_eq!(before.base(), after.base());
            assert_eq!(before.bias(), after.bias());
            assert_ne!(before.adapter, after.adapter);
            assert_eq!(after.adapter.algorithm(), Algorithm::Lokr);
            assert!(matches!(&after.adapter, Adapter::Lokr(a) if matches!(a.right, KronRight::Factored(_))));
        }
    }
}
