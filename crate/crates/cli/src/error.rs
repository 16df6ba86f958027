use std::path::Path;

use nsp_core::decode::DecodeError;
use nsp_core::detect::DetectError;
use nsp_core::sim::SimError;
use nsp_core::sort_offline::SortError;
use nsp_core::synthdata::{DatasetError, SynthError};
use thiserror::Error;

/// Failure of one command. The variant picks the exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn schema(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Schema(format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Dimension(_)
            | DecodeError::UnknownNeuron(_)
            | DecodeError::StateDim(_)
            | DecodeError::MissingModel(_) => CliError::Schema(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SortError> for CliError {
    fn from(e: SortError) -> Self {
        match e {
            SortError::Packed(_) | SortError::LengthMismatch { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::RaggedChannels { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Decode(d) => d.into(),
            SimError::Detect(d) => d.into(),
            SimError::Sort(s) => s.into(),
            SimError::Synth(s) => s.into(),
            SimError::Config(_) => CliError::Usage(e.to_string()),
            SimError::ChannelMismatch { .. } | SimError::BadModel(_) => CliError::Schema(e.to_string()),
        }
    }
}
