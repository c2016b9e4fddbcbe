use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}:{line}: {message}")]
    Input {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Core(#[from] bspcopula::error::Error),

    #[error("fit stopped after {iterations} iterations without meeting the convergence rule")]
    NotConverged { iterations: usize },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 usage or parse, 3 non-convergence, 4 sampler budget, 1 any other
    /// numerical failure.
    pub fn exit_code(&self) -> i32 {
        use bspcopula::error::Error as E;
        match self {
            Self::Usage(_) | Self::Input { .. } | Self::Io { .. } => 2,
            Self::NotConverged { .. } => 3,
            Self::Core(e) => match e {
                E::SamplerBudget { .. } => 4,
                E::MultiplierNonConvergence { .. } => 3,
                E::ZeroDensity { .. } | E::NegativeDenominator { .. } | E::InfeasibleTargets => 1,
                _ => 2,
            },
        }
    }
}
