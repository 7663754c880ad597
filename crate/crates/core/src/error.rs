use thiserror::Error;

/// Errors produced by the coded-aperture design library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{axis} extent {extent} is not divisible by kernel extent {kernel}")]
    Divisibility {
        axis: &'static str,
        extent: usize,
        kernel: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("noise amplitude {noise} must be strictly below the coded-aperture amplitude {aperture}")]
    NoiseAmplitude { noise: f64, aperture: f64 },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("infinite PSNR: estimate matches the reference exactly")]
    InfinitePsnr,

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
