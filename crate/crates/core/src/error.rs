use thiserror::Error;

/// Errors produced by the model, the diffusion machinery and the samplers.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a function (e.g. a pair distance `r <= 0`).
    #[error("domain error: {0}")]
    Domain(String),

    /// The collective variable has a vanishing gradient at the requested configuration.
    #[error("singular collective variable: {0}")]
    SingularCv(String),

    /// `alpha * beta * F(z)` is too large to exponentiate.
    #[error("diffusion overflow at z = {z}: exponent {exponent} exceeds {limit}")]
    Overflow { z: f64, exponent: f64, limit: f64 },

    /// Inconsistent or invalid configuration values.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data (profile files and the like).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error comes from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::SingularCv(_) | Error::Overflow { .. }
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                _ => unreachable!("checked to be an io error"),
            }
        } else {
            Error::Parse(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
