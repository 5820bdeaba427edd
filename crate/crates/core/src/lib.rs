//! Transformer training as measure-valued optimal control.
//!
//! A single-head transformer block acts on a sequence of `N` feature vectors
//! as an interacting particle system driven by a shared weight tuple. Tagging
//! each particle with its positional encoding `i/N` and lifting the ensemble
//! to its empirical measure turns training into a deterministic Markov
//! decision process on probability measures. This crate provides:
//!
//! * [`dynamics`]: the controlled particle system and its single-particle map.
//! * [`transport`]: exact position-sensitive squared Wasserstein distances.
//! * [`lifting`]: push-forward flows of measures and ensembles, terminal cost.
//! * [`quantization`]: state grids, simplex type quantizer, action nets and
//!   the quantized flows built from them.
//! * [`dp`]: backward induction over the triply quantized model and
//!   closed-loop to open-loop policy extraction.
//! * [`experiments`]: the toy self-attention approximation sweep and the
//!   robustness study over growing sample sizes.

pub mod dp;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod lifting;
pub mod linalg;
pub mod quantization;
pub mod transport;

pub use error::{Error, Result};
