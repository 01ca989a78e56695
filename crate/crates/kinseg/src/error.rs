//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinsegError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("poisson noise scale must be positive, got {mu}")]
    NonPositivePoissonScale { mu: f64 },

    #[error(
        "inadmissible potential exponent on channel {channel}: alpha = {alpha} \
         must exceed {bound} for c_max = {c_max}"
    )]
    InadmissibleExponent {
        channel: usize,
        alpha: f64,
        c_max: f64,
        bound: f64,
    },

    #[error("quasi-equilibrium undefined for sigma^2 = 0 (atomic limit)")]
    ZeroDiffusion,

    #[error("CFL step size is not a positive finite number: dt = {dt}")]
    CflViolation { dt: f64 },

    #[error("ground-truth density integrates to zero")]
    ZeroTarget,

    #[error("shape of size {size} does not fit in a {width}x{height} image")]
    ShapeTooLarge {
        size: u32,
        width: u32,
        height: u32,
    },

    #[error("all particles have infinite loss; consensus point undefined")]
    AllLossesInfinite,

    #[error("missing figure artifact: {0}")]
    MissingArtifact(String),

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("TOML parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl KinsegError {
    /// CLI exit code: 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            KinsegError::Config(_)
            | KinsegError::Io(_)
            | KinsegError::Image(_)
            | KinsegError::Json(_)
            | KinsegError::Toml(_)
            | KinsegError::Csv(_)
            | KinsegError::ShapeTooLarge { .. }
            | KinsegError::MissingArtifact(_) => 2,
            _ => 3,
        }
    }
}
