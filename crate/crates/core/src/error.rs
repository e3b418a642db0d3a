use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Rank-deficient design, too few samples, or a contrast that does not
    /// conform to the design.
    #[error("design error: {0}")]
    Design(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("binning error: {0}")]
    Binning(String),

    #[error("quadrature did not converge: estimate {estimate:e}, error estimate {error:e} after {subdivisions} subdivisions")]
    Quadrature {
        estimate: f64,
        error: f64,
        subdivisions: usize,
    },

    #[error("method {method} is not applicable: {reason}")]
    NotApplicable { method: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Clone for Error {
    fn clone(&self) -> Self {
        match self {
            Error::Design(m) => Error::Design(m.clone()),
            Error::Input(m) => Error::Input(m.clone()),
            Error::Binning(m) => Error::Binning(m.clone()),
            Error::Quadrature { estimate, error, subdivisions } => Error::Quadrature {
                estimate: *estimate,
                error: *error,
                subdivisions: *subdivisions,
            },
            Error::NotApplicable { method, reason } => Error::NotApplicable {
                method: method.clone(),
                reason: reason.clone(),
            },
            Error::Numerical(m) => Error::Numerical(m.clone()),
            Error::Parse { path, line, column, message } => Error::Parse {
                path: path.clone(),
                line: *line,
                column: *column,
                message: message.clone(),
            },
            Error::Config(m) => Error::Config(m.clone()),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), e.to_string())),
        }
    }
}
