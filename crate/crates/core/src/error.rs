use crate::network::Phase;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid measurement plan: {0}")]
    InvalidPlan(String),

    #[error("invalid HIF scenario: {0}")]
    InvalidScenario(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("power flow did not converge after {iterations} iterations (last change {last_change:.3e} pu)")]
    PowerFlowDivergence {
        iterations: usize,
        last_change: f64,
        last: Box<crate::powerflow::PhasorSolution>,
    },

    #[error("phase {phase}: gain matrix is singular, network is unobservable")]
    Unobservable { phase: Phase },

    #[error("phase {phase}: state estimation did not converge after {iterations} iterations (max step {max_step:.3e})")]
    EstimatorDivergence {
        phase: Phase,
        iterations: usize,
        max_step: f64,
        last: Box<crate::model::PhaseState>,
    },

    #[error("critical measurement: K_ii = {0} leaves no residual")]
    CriticalMeasurement(f64),

    #[error("parameter is insensitive: |H_p0| = {0:e}")]
    InsensitiveParameter(f64),

    #[error("measurement set has {got} values, plan has {expected} specs")]
    Misaligned { expected: usize, got: usize },

    #[error("snapshot {index}: {source}")]
    Snapshot { index: usize, source: Box<Error> },

    #[error("step {step}: {source}")]
    Step { step: u8, source: Box<Error> },

    #[error("config: {path}: {message}")]
    Config { path: String, message: String },

    #[error("unknown builtin '{name}', available: {available}")]
    UnknownBuiltin { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input data rather than numerical failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidNetwork(_)
            | Error::InvalidPlan(_)
            | Error::InvalidScenario(_)
            | Error::Config { .. }
            | Error::UnknownBuiltin { .. }
            | Error::Toml(_)
            | Error::Json(_) => true,
            Error::Snapshot { source, .. } | Error::Step { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
