use thiserror::Error;

/// Errors raised by the geometry, region and transport layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {re} + {im}i is not strictly inside the disc (|z| must be < 1 - 1e-9)")]
    OutsideDisc { re: f64, im: f64 },

    #[error("tangent vector has hyperbolic norm {norm}, expected 1")]
    NotUnitTangent { norm: f64 },

    #[error("Mobius coefficients are not normalized: |a|^2 - |b|^2 = {det}")]
    NotNormalized { det: f64 },

    #[error("degenerate pair: the two points coincide")]
    DegeneratePair,

    #[error("polyline needs at least 2 points, got {0}")]
    ShortPolyline(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rasterization produced no occupied cells (resolution too coarse or region outside the grid window)")]
    EmptyRaster,

    #[error("point {re} + {im}i escapes the grid window")]
    OutsideWindow { re: f64, im: f64 },

    #[error("empty input region")]
    EmptyRegion,

    #[error("density has zero mass")]
    ZeroMass,

    #[error("unbalanced mass instance: sum rho1 = {rho1}, sum rho2 = {rho2}")]
    Unbalanced { rho1: f64, rho2: f64 },

    #[error("instance has {n} points, above the solver cap of {cap}")]
    TooManyPoints { n: usize, cap: usize },

    #[error("exponent p = {0} is outside [-1/2, +inf]")]
    ExponentOutOfRange(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
