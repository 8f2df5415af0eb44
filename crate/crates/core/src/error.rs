//! Error type shared by all solver modules.

use thiserror::Error;

/// Errors produced by grid construction, TT arithmetic, operator building,
/// projection, flow generation, integration, and serialization.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Grid construction rejected the requested size or length.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// Two objects that must share grids do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A vector/array length or dimension count does not match.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A mode/dimension index is out of range.
    #[error("invalid index: {index} out of range for dimension count {d}")]
    InvalidIndex { index: usize, d: usize },

    /// The coordinate map Γ is singular or failed to invert cleanly.
    #[error("singular coordinate map: {0}")]
    SingularMap(String),

    /// Re-separation of a transformed coefficient needs more terms than the
    /// configured operator-rank cap allows.
    #[error("operator re-separation rank {required} exceeds the configured cap {cap}")]
    OperatorRankExceeded { required: usize, cap: usize },

    /// A projection frame was requested at a (near) rank-deficient point:
    /// an interface singular value fell below the degeneracy threshold.
    #[error(
        "degenerate projection frame: singular value {sigma:.3e} at bond {bond} \
         below threshold {threshold:.3e}; reduce the rank first"
    )]
    DegenerateFrame {
        bond: usize,
        sigma: f64,
        threshold: f64,
    },

    /// The generator system has A ≈ 0 but b significantly nonzero.
    #[error("inconsistent generator system: A vanishes but ‖b‖ = {b_norm:.3e}")]
    InconsistentSystem { b_norm: f64 },

    /// A run configuration is self-inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A time step produced non-finite values.
    #[error("non-finite values at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },

    /// Integration aborted at a step; wraps the underlying failure.
    #[error("integration aborted at step {step} (t = {t}): {source}")]
    IntegrationAbort {
        step: usize,
        t: f64,
        #[source]
        source: Box<CoreError>,
    },

    /// Dense solves beyond the memory guard are rejected.
    #[error("memory guard: full grid of {points} points exceeds the limit {limit}")]
    MemoryGuard { points: u128, limit: u128 },

    /// A dense linear-algebra backend call failed.
    #[error("linear algebra backend: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    /// Snapshot I/O failure.
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Snapshot contents are malformed.
    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
