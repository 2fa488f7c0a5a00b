use thiserror::Error;

use crate::distribution::DistributionError;
use crate::experiment::ConfigError;
use crate::ga::GaError;
use crate::moo::MooError;
use crate::persistence::StorageError;
use crate::reasoning::ReasoningError;
use crate::sim::SimError;

/// Crate-wide error; the prefix names the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("moo: {0}")]
    Moo(#[from] MooError),
    #[error("ga: {0}")]
    Ga(#[from] GaError),
    #[error("reasoning: {0}")]
    Reasoning(#[from] ReasoningError),
    #[error("distribution: {0}")]
    Distribution(#[from] DistributionError),
    #[error("persistence: {0}")]
    Storage(#[from] StorageError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
}

impl Error {
    /// True for configuration problems (bad flags, files or parameters), as
    /// opposed to failures while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Ga(GaError::InvalidConfig(_))
                | Error::Moo(MooError::UnknownProblem(_))
                | Error::Moo(MooError::InvalidWeights(_))
                | Error::Moo(MooError::OverConstrained { .. })
                | Error::Reasoning(ReasoningError::InvalidRules(_))
        )
    }
}

impl From<crate::distribution::wire::WireError> for Error {
    fn from(e: crate::distribution::wire::WireError) -> Self {
        Error::Distribution(e.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
