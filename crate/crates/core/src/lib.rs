//! Transformer temporal point processes with speculative sampling.
//!
//! The crate bundles everything needed to compare naive autoregressive
//! sampling of a CDF-parameterised Transformer TPP against draft/verify
//! speculative sampling:
//!
//! - [`events`], [`rng`], [`numeric`]: sequence types, reproducible random
//!   streams and shared numeric helpers.
//! - [`classical`]: inhomogeneous Poisson and exponential-kernel Hawkes
//!   processes, Ogata thinning and analytic compensators.
//! - [`autodiff`]: a small reverse-mode tape over dense tensors.
//! - [`model`]: the encoder (temporal encoding, causal attention) and the
//!   log-normal mixture / categorical decoder.
//! - [`sampler`]: autoregressive and speculative samplers.
//! - [`eval`]: time rescaling, KS statistics, Wasserstein and EMD metrics.
//! - [`train`]: maximum-likelihood training with Adam.

pub mod autodiff;
pub mod classical;
pub mod error;
pub mod eval;
pub mod events;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
pub use events::{Event, EventSequence};
pub use rng::RngStream;
