//! Process-level error classification: every failure maps to a usage (1),
//! data (2), or numeric (3) exit code.

use std::fmt;

use vidsgg_core::classifier::ClassifierError;
use vidsgg_core::graph::GraphError;
use vidsgg_core::grounding::GroundingError;
use vidsgg_data::checkpoint::CheckpointError;
use vidsgg_data::formats::FormatError;
use vidsgg_data::synth::SynthError;
use vidsgg_train::TrainError;

#[derive(Debug)]
pub enum CliError {
    /// Flag combinations or values the parser cannot catch alone.
    Usage(String),
    /// Unreadable, unwritable, or inconsistent inputs.
    Data(String),
    /// Non-finite values produced or encountered mid-computation.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError::Data(message.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        // Generator limits are violated only by flag values.
        CliError::Usage(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::NonFinite => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GroundingError> for CliError {
    fn from(e: GroundingError) -> Self {
        match e {
            GroundingError::NonFinite => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::BatchSize => CliError::Usage(e.to_string()),
            TrainError::Hook(inner) => CliError::Data(format!("epoch hook failed: {inner}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub fn io_at(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
