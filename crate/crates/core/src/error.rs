use thiserror::Error;

/// Errors raised by the diffusion, training and verification machinery.
#[derive(Debug, Error)]
pub enum CdlmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("token {token} is not a valid clean token")]
    InvalidCleanToken { token: usize },

    #[error("token {token} is outside a vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },

    #[error("impossible transition{}: x0={x0} cannot reach xt={xt} at t={t} (s={s})", position_suffix(*.position))]
    ImpossibleTransition {
        position: Option<usize>,
        x0: usize,
        xt: usize,
        s: f64,
        t: f64,
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("infinite divergence: support of the first argument is not covered by the second")]
    InfiniteDivergence,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state space of {states} sequences exceeds the enumeration cap of {cap}")]
    EnumerationCap { states: u128, cap: u128 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn position_suffix(position: Option<usize>) -> String {
    match position {
        Some(p) => format!(" at position {p}"),
        None => String::new(),
    }
}

pub type Result<T, E = CdlmError> = std::result::Result<T, E>;
