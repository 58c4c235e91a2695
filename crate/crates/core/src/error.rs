use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("track parse error at line {line}: {msg}")]
    TrackParse { line: usize, msg: String },

    #[error("invalid track: {0}")]
    InvalidTrack(String),

    #[error("lateral offset {d} outside the track half width {half_width}")]
    OutOfTrack { d: f64, half_width: f64 },

    #[error("Frenet transform singular: 1 - kappa * d = {0}")]
    FrenetSingular(f64),

    #[error("longitudinal speed {0} below the tire model validity threshold")]
    LowSpeed(f64),

    #[error("linearization failed: {0}")]
    Linearization(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solve record is not converged; sensitivities are undefined")]
    NotConverged,

    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite gradient rejected")]
    NonFiniteGradient,

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("no feasible sample after {0} consecutive rejections")]
    SamplingRegion(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 1 for configuration and input problems, 2 when
    /// the controller or the experiment could not complete.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_)
            | Error::NotConverged
            | Error::SamplingRegion(_)
            | Error::OutOfTrack { .. }
            | Error::FrenetSingular(_)
            | Error::LowSpeed(_)
            | Error::Linearization(_)
            | Error::NonFiniteGradient => 2,
            _ => 1,
        }
    }
}
