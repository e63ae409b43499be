use thiserror::Error;

/// Errors produced by the simulation, reduction and estimation routines.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("state outside material admissible range in cell {cell}: x = {moisture}, T = {temperature} K")]
    AdmissibleRange {
        cell: usize,
        moisture: f64,
        temperature: f64,
    },

    #[error("mask index {0} is not a surface cell")]
    InvalidMask(usize),

    #[error("time step {dt} s violates the diffusive stability bound; maximal admissible dt = {max_dt} s")]
    StabilityBound { dt: f64, max_dt: f64 },

    #[error("non-finite state detected at t = {time} s")]
    Divergence { time: f64 },

    #[error("moisture undershoot {value} in cell {cell} exceeds the round-off tolerance")]
    NegativeMoisture { cell: usize, value: f64 },

    #[error("steady state not reached before t_max = {t_max} s (residual {residual})")]
    NonConvergence { t_max: f64, residual: f64 },

    #[error("degenerate snapshot set: {0}")]
    DegenerateSnapshots(String),

    #[error("adaptive step size underflow at t = {time} s (stiff system?)")]
    StepSizeUnderflow { time: f64 },

    #[error("response ({d}, {l}, {i}) did not settle: output drift {drift} over the last window")]
    NotSettled { d: usize, l: usize, i: usize, drift: f64 },

    #[error("problem dimension {dim} exceeds the test-scale threshold {threshold}")]
    TestScaleExceeded { dim: usize, threshold: usize },

    #[error("innovation variance {0} is not positive")]
    DegenerateInnovation(f64),

    #[error("undefined normalization: field range is zero")]
    DegenerateRange,
}

pub type Result<T> = std::result::Result<T, CoreError>;
