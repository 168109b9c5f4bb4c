//! Single-image dehazing with an independent detail-recovery network.
//!
//! The crate is self-contained: a small rank-4 autodiff engine
//! ([`tensor`]), the layers and networks built on it ([`nn`],
//! [`networks`]), the atmospheric scattering model ([`haze`]), a procedural
//! dataset ([`synth`]), losses and metrics ([`losses`], [`metrics`]), and
//! training with checkpointing ([`train`]). File formats live in [`io`].

pub mod error;
pub mod gradsuite;
pub mod haze;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Shape, Tensor, Var};
