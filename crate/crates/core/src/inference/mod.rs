//! Likelihoods and posterior marginals under independent soft evidence.
//!
//! A forward pass computes `log fw_n` for every node with the evidence folded
//! into the inputs; a backward pass pushes normalized flows `bk_n` from the
//! root down, and every posterior marginal is read off the input nodes. Both
//! passes are linear in the number of edges.

mod evidence;
mod passes;
mod sample;

use thiserror::Error;

use crate::circuit::NodeId;

pub use evidence::SoftEvidence;
pub use passes::{
    backward_flows, backward_marginals, forward_soft_evidence, log_likelihood, log_likelihood_batch,
    posterior_marginals, posterior_marginals_batch, ForwardValues, PosteriorMarginals,
};
pub use sample::{conditional_sample, conditional_sample_with, sample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("variable {var} has category {value} but the circuit has {num_cats} categories")]
    CategoryOutOfRange { var: usize, value: u16, num_cats: usize },
    #[error("expected {expected} {what}, got {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },
    /// `var` is the variable whose weights are all zero, or `None` when each
    /// variable has support but the evidence is jointly impossible under the circuit.
    #[error("evidence has zero total weight{}", .var.map(|v| format!(" on variable {v}")).unwrap_or_default())]
    AllZeroEvidence { var: Option<usize> },
    #[error("node {node} has zero forward value but positive flow")]
    NumericalUnderflow { node: NodeId },
}

pub(crate) use passes::{backward_into as passes_backward, forward_into as passes_forward};
