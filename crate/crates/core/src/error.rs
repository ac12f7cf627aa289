//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("grid too coarse: spacing {spacing_m:.3e} m exceeds tip_gap/20 = {limit_m:.3e} m")]
    GridTooCoarse { spacing_m: f64, limit_m: f64 },

    #[error("relaxation did not converge within {sweeps} sweeps (residual {residual:.3e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("multipole fit region invalid: {0}")]
    FitRegion(String),

    #[error("unknown electrode label `{0}`")]
    UnknownElectrode(String),

    #[error("invalid drive: {0}")]
    Drive(String),

    #[error(
        "drive is not in phase (relative imaginary phasor magnitude {imbalance:.3e}); \
         a phase-mismatched drive has no rf null — use the dynamics module to study it"
    )]
    PhaseMismatchedDrive { imbalance: f64 },

    #[error("newton iteration on the rf field diverged; last iterate ({0:.3e}, {1:.3e}, {2:.3e}) m")]
    NewtonDiverged(f64, f64, f64),

    #[error("position ({0:.3e}, {1:.3e}, {2:.3e}) m outside the model validity ball")]
    OutsideValidityBall(f64, f64, f64),

    #[error("unstable trap configuration: {0}")]
    UnstableConfiguration(String),

    #[error("insufficient calibration targets: missing {0}")]
    CalibrationTargets(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("trajectory escaped the validity ball at t = {escape_time_s:.3e} s")]
    TrajectoryEscaped { escape_time_s: f64 },

    #[error("trajectory too short: {0}")]
    TrajectoryTooShort(String),

    #[error("invalid integration parameters: {0}")]
    Integration(String),

    #[error("invalid cavity geometry: {0}")]
    Cavity(String),

    #[error("photon rate {observed:.3e} exceeded the thinning cap {cap:.3e}")]
    RateCapExceeded { observed: f64, cap: f64 },

    #[error("invalid optics parameters: {0}")]
    Optics(String),

    #[error("fit rejected: {0}")]
    Fit(String),

    #[error("filter section unstable: {0}")]
    FilterUnstable(String),

    #[error("servo loop unstable: {0}")]
    LoopUnstable(String),

    #[error("no unity-gain crossing in the composed open-loop response")]
    NoCrossing,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
