//! Error types shared across the crate.

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Scenario validation failed. Carries every violation found, not just the first.
    #[error("scenario invalid:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse scenario document: {0}")]
    Parse(#[from] serde_json::Error),

    /// A propagation produced NaN or infinity. Names the time at which it happened.
    #[error("non-finite values during propagation at t = {t}")]
    NonFinite { t: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("active sensor set is empty")]
    EmptyActiveSet,

    #[error("sensor index {index} out of range (suite has {count} sensors)")]
    SensorIndex { index: usize, count: usize },

    /// The centralized filter needs every active sensor on the full horizon.
    #[error("centralized filter unavailable at t = {t}: sensors {missing:?} lack full-horizon data")]
    CrhfUnavailable { t: f64, missing: Vec<usize> },

    #[error("local estimator for sensor {sensor} unavailable at t = {t}: missing horizon samples")]
    LocalUnavailable { sensor: usize, t: f64 },

    /// The weight system is singular or too ill-conditioned to trust.
    #[error("fusion weight system degenerate (condition estimate {cond:.3e})")]
    DegenerateFusion { cond: f64 },

    #[error("fusion inputs inconsistent: {0}")]
    FusionMismatch(String),

    /// Cross-covariance operations require two distinct sensors.
    #[error("sensor pair must consist of two distinct sensors")]
    IdenticalPair,
}
