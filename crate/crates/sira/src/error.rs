use sira_core::{AnalysisError, EngineError, LayoutError, MaskError, ModelError, SynthError};
use thiserror::Error;

use crate::format::FormatError;

/// Every failure a command can report, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("acceptance failed: {0}")]
    AcceptFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl CliError {
    /// 1 for invalid inputs, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Parse { .. } | CliError::AcceptFailed(_) => 1,
            CliError::Engine(
                EngineError::InvalidBoundary { .. } | EngineError::InvalidAlpha(_) | EngineError::InvalidMaxTokens,
            ) => 1,
            _ => 2,
        }
    }
}
