use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Update rule. `eps` is added to the root of the second-moment estimate;
/// with `eps = 0` the update direction is invariant to rescaling the
/// gradient, and an entry whose gradient history is all zero gets no update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// Adam with the usual bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Adagrad { eps: f64 },
}

impl OptimizerKind {
    pub fn adam(eps: f64) -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }

    pub fn adagrad(eps: f64) -> Self {
        OptimizerKind::Adagrad { eps }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Adagrad { .. } => "adagrad",
        }
    }

    /// Exponent `c` in the learning-rate rescaling `s^{c/k}`.
    pub fn lr_exponent(&self) -> f64 {
        match self {
            OptimizerKind::Sgd => 2.0,
            OptimizerKind::Adam { .. } | OptimizerKind::Adagrad { .. } => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd => true,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps >= 0.0 && eps.is_finite()
            }
            OptimizerKind::Adagrad { eps } => eps >= 0.0 && eps.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    /// `sgd`, `adam` or `adagrad`, the adaptive ones with `eps = 0`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::adam(0.0)),
            "adagrad" => Ok(OptimizerKind::adagrad(0.0)),
            other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// One rate per layer.
    pub learning_rates: Vec<f64>,
    /// Decoupled weight decay, `θ ← θ − lr·wd·θ` before each update. Zero
    /// by default; the scaling equivalence is not expected to survive it.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn uniform(kind: OptimizerKind, lr: f64, layers: usize) -> Self {
        Self {
            kind,
            learning_rates: vec![lr; layers],
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        self.kind.validate()?;
        if self.learning_rates.len() != layers {
            return Err(Error::invalid(format!(
                "{} learning rates for {layers} layers",
                self.learning_rates.len()
            )));
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !(lr.is_finite() && **lr >= 0.0)) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and non-negative")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment buffers for every parameter tensor of every layer.
#[derive(Debug, Clone)]
pub(crate) struct OptimizerState {
    config: OptimizerConfig,
    slots: Vec<Vec<Slot>>,
    t: i32,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl OptimizerState {
    pub(crate) fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update to all layers. `params[l][i]` pairs with
    /// `grads[l][i]`.
    pub(crate) fn step(&mut self, params: Vec<Vec<&mut Tensor>>, grads: &[Vec<Tensor>]) {
        if self.slots.is_empty() {
            self.slots = grads
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|g| Slot {
                            m: vec![0.0; g.len()],
                            v: vec![0.0; g.len()],
                        })
                        .collect()
                })
                .collect();
        }
        self.t += 1;
        let wd = self.config.weight_decay;
        for (l, (layer, layer_grads)) in params.into_iter().zip(grads).enumerate() {
            let lr = self.config.learning_rates[l];
            for ((p, g), slot) in layer.into_iter().zip(layer_grads).zip(&mut self.slots[l]) {
                let p = p.data_mut();
                if wd != 0.0 {
                    for x in p.iter_mut() {
                        *x -= lr * wd * *x;
                    }
                }
                match self.config.kind {
                    OptimizerKind::Sgd => {
                        for (x, &gi) in p.iter_mut().zip(g.data()) {
                            *x -= lr * gi;
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powi(self.t);
                        let c2 = 1.0 - beta2.powi(self.t);
                        for (j, (x, &gi)) in p.iter_mut().zip(g.data()).enumerate() {
                            slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * gi;
                            slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * gi * gi;
                            let m_hat = slot.m[j] / c1;
                            let v_hat = slot.v[j] / c2;
                            *x -= lr * ratio(m_hat, v_hat.sqrt() + eps);
                        }
                    }
                    OptimizerKind::Adagrad { eps } => {
                        for (j, (x, &gi)) in p.iter_mut().zip(g.data()).enumerate() {
                            slot.v[j] += gi * gi;
                            *x -= lr * ratio(gi, slot.v[j].sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(kind: OptimizerKind, grads: &[f64]) -> f64 {
        let mut p = Tensor::zeros(&[1]);
        let mut st = OptimizerState::new(OptimizerConfig::uniform(kind, 0.1, 1));
        for &g in grads {
            st.step(vec![vec![&mut p]], &[vec![Tensor::new(&[1], vec![g]).unwrap()]]);
        }
        p.data()[0]
    }

    #[test]
    fn single_steps() {
        assert!((run(OptimizerKind::Sgd, &[2.0]) + 0.2).abs() < 1e-15);
        // Bias-corrected Adam and AdaGrad both take a step of exactly lr at t = 1.
        assert!((run(OptimizerKind::adam(0.0), &[2.0]) + 0.1).abs() < 1e-15);
        assert!((run(OptimizerKind::adagrad(0.0), &[-3.0]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_history_gives_no_update() {
        assert_eq!(run(OptimizerKind::adam(0.0), &[0.0, 0.0]), 0.0);
        assert_eq!(run(OptimizerKind::adagrad(0.0), &[0.0]), 0.0);
    }

    #[test]
    fn scale_invariance_with_zero_eps() {
        let g = [0.3, -1.2, 0.5, 2.0];
        let scaled: Vec<f64> = g.iter().map(|x| x * 1e3).collect();
        for kind in [OptimizerKind::adam(0.0), OptimizerKind::adagrad(0.0)] {
            assert!((run(kind, &g) - run(kind, &scaled)).abs() < 1e-14);
        }
        let a = run(OptimizerKind::adam(1e-2), &g);
        let b = run(OptimizerKind::adam(1e-2), &scaled);
        assert!((a - b).abs() > 1e-4);
    }

    #[test]
    fn adagrad_accumulates() {
        // Steps: 0.1·1/1, then 0.1·1/√2.
        let want = -(0.1 + 0.1 / 2f64.sqrt());
        assert!((run(OptimizerKind::adagrad(0.0), &[1.0, 1.0]) - want).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let cfg = OptimizerConfig::uniform(OptimizerKind::Sgd, 0.1, 2);
        assert!(cfg.validate(2).is_ok());
        assert!(cfg.validate(3).is_err());
        assert!(OptimizerConfig::uniform(OptimizerKind::Sgd, -1.0, 1).validate(1).is_err());
        assert!(OptimizerConfig::uniform(OptimizerKind::adam(-1.0), 0.1, 1).validate(1).is_err());
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::adam(0.0));
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
