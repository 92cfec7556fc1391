use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

use pcguide::format::FormatError;
use pcguide::guidance::GuidanceError;
use pcguide::latent::LatentError;
use pcguide::learning::LearningError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Dataset(#[from] pcguide::datasets::DatasetError),
    /// A checked property did not hold.
    #[error("{0}")]
    PropertyFailed(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "Usage",
            Self::Config(_) => "ConfigError",
            Self::DatasetNotFound(_) => "DatasetNotFound",
            Self::FileNotFound(_) => "FileNotFound",
            Self::Format { .. } => "FormatError",
            Self::Io(_) => "IoError",
            Self::Learning(_) => "LearningError",
            Self::Guidance(_) => "GuidanceError",
            Self::Latent(_) => "LatentError",
            Self::Dataset(_) => "DatasetError",
            Self::PropertyFailed(_) => "PropertyFailed",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::PropertyFailed(_) => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
