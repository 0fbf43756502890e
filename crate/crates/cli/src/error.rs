use thiserror::Error;

use panoptic4d::autodiff::AutodiffError;
use panoptic4d::metrics::MetricsError;
use panoptic4d::nn::ModelError;
use panoptic4d::supervision::TrainError;
use panoptic4d::synthworld::SynthError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("data mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFiniteGradient(_) => CliError::Diverged(e.to_string()),
            AutodiffError::Checkpoint { .. } | AutodiffError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig { .. } => CliError::Config(e.to_string()),
            ModelError::Autodiff(a) => a.into(),
            _ => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::InvalidConfig { .. } => CliError::Config(e.to_string()),
            TrainError::NoData => CliError::Mismatch(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Synth(s) => s.into(),
            TrainError::Autodiff(a) => a.into(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Mismatch(e.to_string())
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
