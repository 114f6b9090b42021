use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("refinement cap reached at level {level} with residual {residual:.3e} (target {target:.3e})")]
    RefinementCap {
        level: u8,
        residual: f64,
        target: f64,
    },
    #[error("time limit of {seconds} s exceeded")]
    TimeLimit { seconds: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("outer step {step}: {source}")]
    Step { step: usize, source: Box<Error> },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
