//! Toy training harness.
//!
//! Small networks whose frozen layers each carry one adapter, trained with
//! full-batch SGD, Adam or AdaGrad on hand-written gradients. The main use
//! is [`verify_merge_ratio`]: with `ε = 0`, training at merge ratio `s` is
//! the same as training at ratio 1 with every factor multiplied by
//! `s^{1/k}` and the learning rate by `s^{c/k}` (`c = 2` for SGD, 1 for the
//! adaptive optimizers), where `k` is the number of factor tensors.
//!
//! Adam keeps its bias correction. Both correction terms are independent of
//! the gradient scale, so they do not affect the equivalence.

mod grad;
mod model;
mod optim;
mod verify;

pub use grad::adapter_vjp;
pub use model::{mse_loss, AdapterInit, Dataset, ToyLayer, ToyModel};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use verify::{
    baseline_learning_rate, gradient_check, homogeneity_check, toy_problem, train,
    verify_init_std, verify_merge_ratio, MergeRatioReport, ToyProblem, TrainTrace, Variant,
    TOY_CONV, TOY_CONV_DIM, TOY_CONV_SAMPLES, TOY_DIM, TOY_DIMS, TOY_SAMPLES, TOY_TARGET_NOISE,
    VERIFY_INIT_SCALE,
};
