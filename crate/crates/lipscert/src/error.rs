//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate dimension in {0}")]
    DegenerateDim(String),

    /// LayerNorm hit an input with zero standard deviation. This is the
    /// pathological case that makes the layer unbounded; by default it is an
    /// error rather than a silent division.
    #[error("zero variance input to layer_norm")]
    ZeroVariance,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A layer with no finite Lipschitz bound was handed to the certifier.
    #[error("non-Lipschitz layer: {0}")]
    NonLipschitz(String),

    /// The empirical estimate exceeded the proven bound: an implementation
    /// bug by construction, never a valid certificate.
    #[error("certification failure: {0}")]
    CertFailure(String),

    #[error("initialization failure: {0}")]
    InitFailure(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
