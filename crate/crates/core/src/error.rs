use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library error. Every variant carries a stable machine-readable code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad-magic: file does not start with ORGD")]
    BadMagic,
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("nan-value: non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("degenerate-boundary: antipodal normalizer vanished ({0:e})")]
    DegenerateBoundary(f64),
    #[error("empty-ring: ring {0} has an all-zero autocorrelation slice")]
    EmptyRing(usize),
    #[error("gauge-anchor-missing: |c[1]| = {0:e} on ring {1}")]
    GaugeAnchorMissing(f64, usize),
    #[error("sync-disconnected: measurement graph has {0} components")]
    SyncDisconnected(usize),
    #[error("underdetermined: degree {ell}, shell {shell}: {rows} rows for {unknowns} unknowns")]
    Underdetermined { ell: usize, shell: usize, rows: usize, unknowns: usize },
    #[error("singular-system: degree {ell}, shell {shell}")]
    SingularSystem { ell: usize, shell: usize },
    #[error("conjugation-violated: coefficient table is not Hermitian (max defect {0:e})")]
    ConjugationViolated(f64),
    #[error("gauge-mismatch: oracle reproduces gram1 only to {0:e}")]
    GaugeMismatch(f64),
    #[error("packing-failed: placed {placed} of {requested} copies")]
    PackingFailed { placed: usize, requested: usize },
    #[error("missing lower-order autocorrelation for lags {0}")]
    MissingLowerOrder(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::BadMagic => "bad-magic",
            Error::Truncated(_) => "truncated",
            Error::NonFinite(_) => "nan-value",
            Error::DegenerateBoundary(_) => "degenerate-boundary",
            Error::EmptyRing(_) => "empty-ring",
            Error::GaugeAnchorMissing(..) => "gauge-anchor-missing",
            Error::SyncDisconnected(_) => "sync-disconnected",
            Error::Underdetermined { .. } => "underdetermined",
            Error::SingularSystem { .. } => "singular-system",
            Error::ConjugationViolated(_) => "conjugation-violated",
            Error::GaugeMismatch(_) => "gauge-mismatch",
            Error::PackingFailed { .. } => "packing-failed",
            Error::MissingLowerOrder(_) => "missing-lower-order",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input or IO).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateBoundary(_)
                | Error::EmptyRing(_)
                | Error::GaugeAnchorMissing(..)
                | Error::SyncDisconnected(_)
                | Error::Underdetermined { .. }
                | Error::SingularSystem { .. }
                | Error::ConjugationViolated(_)
                | Error::GaugeMismatch(_)
                | Error::PackingFailed { .. }
        )
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
