use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes while building or evaluating a graph.
    #[error("graph construction error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },

    /// API used out of order (e.g. backward on a tape that never ran forward).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("profiling error: {0}")]
    Profiling(String),

    #[error("numeric contract violation: {0}")]
    Numeric(String),

    #[error(
        "adaptation diverged at step {step} (domain {domain}): L_ent={l_ent}, L_reg={l_reg}, L_total={l_total}"
    )]
    Divergence {
        step: usize,
        domain: String,
        l_ent: f64,
        l_reg: f64,
        l_total: f64,
    },

    /// Missing, malformed or mismatched input artifact.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for configuration and artifact problems, 3 for runtime/numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Plan(_) | Error::Artifact(_) | Error::Json(_) => 2,
            _ => 3,
        }
    }
}
