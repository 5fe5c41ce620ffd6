//! Error type shared by all solver stages.

use thiserror::Error;

/// Errors produced by model construction, solvers and simulators.
#[derive(Debug, Error)]
pub enum Error {
    /// A competition level was queried outside the admissible range `[0, I_max]`.
    #[error("competition level {value} outside [0, {i_max}]")]
    CompetitionOutOfRange { value: f64, i_max: f64 },

    /// A point left the admissible trait region, so the implicit competition
    /// level `I` with `R(x, I) = 0` does not exist in `[0, I_max]`.
    #[error("point outside the admissible region: {detail}")]
    Inadmissible { detail: String },

    /// Newton iteration failed to reach the requested residual.
    #[error("Newton failed to converge after {iterations} iterations (last residual {residual:.3e})")]
    NewtonStalled { iterations: usize, residual: f64 },

    /// The initial profile is not strictly concave where the solver needs it.
    #[error("initial profile is not strictly concave: {detail}")]
    NonconcaveInput { detail: String },

    /// A Hessian that must be negative definite was singular or indefinite.
    #[error("degenerate Hessian: {detail}")]
    DegenerateHessian { detail: String },

    /// The fixed-point map showed no contraction; the caller should halve the
    /// interval length and retry.
    #[error("no contraction on interval [{t_start:.6}, {t_end:.6}] after {iterations} iterations (last distance {distance:.3e})")]
    IntervalTooLong {
        t_start: f64,
        t_end: f64,
        iterations: usize,
        distance: f64,
    },

    /// A restart state failed the compatibility conditions it must satisfy.
    #[error("internal consistency failure at t = {t:.6}: {detail}")]
    RestartInconsistent { t: f64, detail: String },

    /// Invalid configuration or parameters.
    #[error("configuration: {0}")]
    Config(String),

    /// The explicit time step violates the diffusion stability bound.
    #[error("CFL violation: dt = {dt:.3e} exceeds h^2/(2 d eps) = {bound:.3e} (eps = {epsilon}, h = {h})")]
    CflViolation {
        dt: f64,
        bound: f64,
        epsilon: f64,
        h: f64,
    },

    /// The simulated total competition left its safety window.
    #[error("viscous simulation blow-up at t = {t:.6}: I_eps = {i_eps:.6e} outside (0, {limit:.3}]")]
    BlowUp { t: f64, i_eps: f64, limit: f64 },
}

impl Error {
    /// Exit-code classification used by the command line front end:
    /// `2` for configuration/usage problems, `1` for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CflViolation { .. } | Error::CompetitionOutOfRange { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
