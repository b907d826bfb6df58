//! Exit codes and `error[CODE]:` tags for every engine error.

use std::fmt;

use unir_core::data::DataError;
use unir_core::encoders::EncoderError;
use unir_core::eval::EvalError;
use unir_core::experiments::ExperimentError;
use unir_core::index::IndexError;
use unir_core::model::ModelError;
use unir_core::server::ServiceError;
use unir_core::synthgen::SynthError;
use unir_core::train::{CheckpointError, TrainError};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub exit: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: "USAGE", exit: EXIT_USAGE, message: message.into() }
    }

    pub fn data(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, exit: EXIT_DATA, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: "INTERNAL", exit: EXIT_INTERNAL, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data("IO", e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.code(), e.to_string())
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        let code = match &e {
            IndexError::BadMagic => "BAD_MAGIC",
            IndexError::UnsupportedVersion(_) => "UNSUPPORTED_VERSION",
            IndexError::ChecksumMismatch => "CHECKSUM_MISMATCH",
            IndexError::DimMismatch { .. } => "DIM_MISMATCH",
            IndexError::ModeMismatch => "MODE_MISMATCH",
            IndexError::TooFewRows { .. } => "TOO_FEW_ROWS",
            IndexError::InvalidK | IndexError::InvalidProbe { .. } => return CliError::usage(e.to_string()),
            IndexError::DuplicateId(_) => "DUPLICATE_ID",
            IndexError::Malformed(_) => "MALFORMED_EMBEDDINGS",
            IndexError::Io(_) => "IO",
        };
        CliError::data(code, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => io.into(),
            other => CliError::data("BAD_CHECKPOINT", other.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        let code = match e {
            EncoderError::MissingFeature(_) => "MISSING_FEATURE",
            EncoderError::DimMismatch { .. } => "DIM_MISMATCH",
        };
        CliError::data(code, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Encoder(e) => e.into(),
            ModelError::Index(e) => e.into(),
            ModelError::EmptyItem(_) => CliError::data("EMPTY_ITEM", e.to_string()),
            ModelError::Fusion(_) => CliError::internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::EmptyCorpus => CliError::data("EMPTY_CORPUS", e.to_string()),
            TrainError::NonPositiveTemperature(_) | TrainError::BatchTooSmall(_) => {
                CliError::data("INVALID_CONFIG", e.to_string())
            }
            TrainError::NonSquare { .. } => CliError::internal(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Data(e) => e.into(),
            SynthError::Index(e) => e.into(),
            SynthError::Io(e) => e.into(),
            SynthError::ConfigInvalid(_) => CliError::data("INVALID_CONFIG", e.to_string()),
            SynthError::EmptyHeldOut | SynthError::NothingHeldIn => CliError::data("INVALID_HELD_OUT", e.to_string()),
            SynthError::Json(_) => CliError::data("MALFORMED_RECORD", e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            EvalError::Index(e) => e.into(),
            EvalError::Io(e) => e.into(),
            EvalError::UnknownFormat(_) => CliError::usage(e.to_string()),
            EvalError::EmptyCorpus => CliError::data("EMPTY_CORPUS", e.to_string()),
            EvalError::InvalidSpec(_) => CliError::data("INVALID_CONFIG", e.to_string()),
            EvalError::MalformedReport(_) => CliError::data("MALFORMED_REPORT", e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidPlan(_) | ExperimentError::PlanSyntax(_) => CliError::data("INVALID_PLAN", e.to_string()),
            ExperimentError::Data(e) => e.into(),
            ExperimentError::Synth(e) => e.into(),
            ExperimentError::Train(e) => e.into(),
            ExperimentError::Eval(e) => e.into(),
            ExperimentError::Model(e) => e.into(),
            ExperimentError::Index(e) => e.into(),
            ExperimentError::Io(e) => e.into(),
            ExperimentError::Json(_) => CliError::internal(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::BadRequest(_) => CliError::usage(e.to_string()),
            ServiceError::UnknownImage(_) => CliError::data("UNKNOWN_IMAGE", e.to_string()),
            ServiceError::Load(_) => CliError::data("LOAD_FAILED", e.to_string()),
            ServiceError::Incompatible(_) => CliError::data("INCOMPATIBLE_INDEX", e.to_string()),
            ServiceError::NotLoaded | ServiceError::Internal(_) => CliError::internal(e.to_string()),
        }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::data("INVALID_CONFIG", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::internal(e.to_string())
    }
}
