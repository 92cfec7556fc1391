//! Probabilistic circuits with exact soft-evidence marginals, EM learning, and a
//! small guided-denoising harness for inpainting and semantic fusion.
//!
//! The circuit math ([`circuit`], [`inference`], [`learning`]) is generic over
//! [`Real`] (`f32` or `f64`); the aliases below name the common `f64` forms.
//! The denoising harness ([`diffusion`], [`guidance`], [`latent`]) is `f64` only.

pub mod certify;
pub mod circuit;
pub mod datasets;
pub mod diffusion;
pub mod format;
pub mod guidance;
pub mod inference;
pub mod latent;
pub mod learning;
pub mod oracle;
pub mod random;
pub mod rng;
pub mod scalar;
pub mod table;

pub use circuit::{Circuit, CircuitBuilder, CircuitError, NodeId, NodeKind, StructureError, ValidationReport};
pub use inference::{ForwardValues, InferenceError, PosteriorMarginals, SoftEvidence};
pub use scalar::Real;
pub use table::CategoricalTable;

pub type Circuit64 = Circuit<f64>;
pub type Circuit32 = Circuit<f32>;
pub type SoftEvidence64 = SoftEvidence<f64>;
pub type SoftEvidence32 = SoftEvidence<f32>;
pub type PosteriorMarginals64 = PosteriorMarginals<f64>;
pub type PosteriorMarginals32 = PosteriorMarginals<f32>;
