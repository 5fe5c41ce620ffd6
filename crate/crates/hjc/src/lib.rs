//! Solver for the constrained Hamilton-Jacobi problem
//! `du/dt = |grad u|^2 + R(x, I)` with the running constraint
//! `max_x u(t, .) = 0`, the unknown competition level `I(t)` acting as the
//! multiplier that enforces it.
//!
//! The crate computes the triple `(u, I, xbar)` four independent ways and
//! cross-checks them:
//!
//! - [`trajectory`]: the value function through its optimal-trajectory
//!   representation, solving the Euler-Lagrange two-point boundary value
//!   problem, plus a direct maximization of the action as an oracle;
//! - [`constrained`]: the equivalent ODE-PDE system solved by a fixed-point
//!   iteration on short time intervals;
//! - [`quadratic`]: closed forms for quadratic rates and profiles;
//! - [`viscous`]: a finite-difference simulator of the small-diffusion
//!   selection-mutation model whose densities concentrate on the maximizer.

pub mod constrained;
pub mod error;
pub mod linalg;
pub mod model;
pub mod quadratic;
pub mod trajectory;
pub mod viscous;

pub use error::{Error, Result};
pub use model::{
    recenter_initial, validate_assumptions, AssumptionReport, AxisBox, GrowthConstants,
    GrowthFamily, GrowthModel, GrowthRate, InitialConstants, InitialData, InitialFamily,
    InitialProfile,
};

/// Book chapters double as doctests so the guide can never drift from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(growth_models, "../../../book/src/growth-models.md");
    chapter!(trajectories, "../../../book/src/trajectories.md");
    chapter!(constrained_system, "../../../book/src/constrained-system.md");
    chapter!(quadratic_closed_forms, "../../../book/src/quadratic-closed-forms.md");
    chapter!(viscous_approximation, "../../../book/src/viscous-approximation.md");
    chapter!(command_line, "../../../book/src/command-line.md");
}
