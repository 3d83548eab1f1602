//! Decomposed weight updates for linear and convolutional layers.
//!
//! The crate implements LoRA (with its LoCon conv extension), LoHa and LoKr
//! updates, optional Tucker forms for convolution kernels, and everything
//! needed to build, reconstruct, apply, merge, fit and analyse them.
//!
//! Beyond the adapters themselves it carries:
//!
//! - [`kron_linear`]: LoKr evaluated as three small linear maps, without
//!   materialising the Kronecker product.
//! - [`harness`]: a deterministic toy trainer with hand-written gradients,
//!   used to check that the merge ratio can be traded for rescaled
//!   initialisation and learning rates.
//! - [`metrics`]: similarity, diversity, style and score-normalisation
//!   computations over precomputed feature vectors.
//! - [`io`]: the `LWU1` weight container, JSON-lines feature files, layer
//!   manifests and score tables.
//!
//! All arithmetic is `f64`; `f32` appears only in stored weight files.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod io;
pub mod kron_linear;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
