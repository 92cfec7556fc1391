//! Image-structured circuit construction and mini-batch EM.

mod dataset;
mod em;
mod pd;

use thiserror::Error;

use crate::inference::InferenceError;

pub use dataset::Dataset;
pub use em::{accumulate_statistics, em_step, fit, EmConfig, TrainReport};
pub use pd::{build_pd_circuit, PdStructureConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error("grid {height}x{width} is below the 2x2 minimum")]
    GridTooSmall { height: usize, width: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset has no samples")]
    DatasetEmpty,
    #[error("sample {sample}, variable {var}: category {value} out of range for {num_cats} categories")]
    CategoryOutOfRange { sample: usize, var: usize, value: u16, num_cats: usize },
    #[error("expected {expected} {what}, got {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}
