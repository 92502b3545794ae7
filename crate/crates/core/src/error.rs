use thiserror::Error;

/// Failures raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("velocity box too small: f0 at |v| = {lv} is {value:e} relative to its peak (limit 1e-12)")]
    BoundaryTruncation { lv: f64, value: f64 },
    #[error("requested frequency {eta:?} lies outside the gridded range ±{limit}; enlarge the frequency range")]
    Extrapolation { eta: [f64; 3], limit: f64 },
    #[error("near-singular Volterra update at step {step}: |1 - dt/2 K(0)| = {value:e}; reduce dt")]
    NearSingular { step: usize, value: f64 },
    #[error("fit window too short: {points} envelope points (need at least 8)")]
    WindowTooShort { points: usize },
    #[error("weighted norm overflow: exponent {exponent} exceeds 700")]
    WeightOverflow { exponent: f64 },
    #[error("derivative series does not settle within {cap} terms; terms stop decreasing at index {first_nondecreasing}")]
    DivergentSeries { first_nondecreasing: usize, cap: usize },
    #[error("echo time {predicted} lies beyond the horizon t_end = {t_end}")]
    Horizon { predicted: f64, t_end: f64 },
    #[error("non-finite value at step {step} ({what})")]
    NonFinite { step: usize, what: String },
    #[error("stability margin {margin} below the required {kappa_min}")]
    MarginTooSmall { margin: f64, kappa_min: f64 },
    #[error("time step {dt} violates dt*kmax*lv < 1 (value {value})")]
    StepTooLarge { dt: f64, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
