//! Closed forms for quadratic rates and profiles.
//!
//! With `u0 = -x . A0 x / 2` and `R(x, I) = -x . A1 x / 2 + b . x + I0 - I`
//! the extremal is linear in its endpoint, its differential `Gamma` has an
//! explicit matrix-exponential form, and the Hessian of the value function
//! reduces to a one-dimensional quadrature. The constrained maximizer then
//! obeys a small ODE, giving an exact reference for the general solver.

use nalgebra::{DMatrix, DVector};

use crate::constrained::ConstrainedSolution;
use crate::error::{Error, Result};
use crate::linalg::{gauss_legendre, spd_sqrt, sym_eig_range, sym_func, symmetrize};

/// A quadratic instance: both the initial profile and the rate are concave
/// quadratics, with the compatibility normalization `u0` peaked at the origin
/// and `R(0, I0) = 0` built in.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    a0: DMatrix<f64>,
    a1: DMatrix<f64>,
    b: DVector<f64>,
    i0: f64,
}

impl QuadraticProblem {
    pub fn new(a0: DMatrix<f64>, a1: DMatrix<f64>, b: DVector<f64>, i0: f64) -> Result<Self> {
        let d = b.len();
        for (name, m) in [("A0", &a0), ("A1", &a1)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Config(format!("{name} must be {d}x{d}")));
            }
            let asym = (m - m.transpose()).abs().max();
            if asym > 1e-12 * (1.0 + m.abs().max()) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            let (lo, _) = sym_eig_range(m);
            if lo <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be positive definite (min eigenvalue {lo:.3e})"
                )));
            }
        }
        if i0 <= 0.0 {
            return Err(Error::Config(format!("I0 must be positive, got {i0}")));
        }
        Ok(QuadraticProblem { a0, a1, b, i0 })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn i0(&self) -> f64 {
        self.i0
    }

    /// `I(x) = I0 - x . A1 x / 2 + b . x`, the competition level annihilating
    /// the rate at `x`.
    pub fn competition_at(&self, x: &DVector<f64>) -> f64 {
        self.i0 - 0.5 * (&self.a1 * x).dot(x) + self.b.dot(x)
    }

    /// Precomputed spectral data shared by the closed-form evaluations.
    fn kernel(&self) -> QuadraticKernel {
        let m = spd_sqrt(&(&self.a1 * 2.0));
        let d = self.dim();
        let eye = DMatrix::identity(d, d);
        let m_plus = &m + &self.a0 * 2.0;
        let m_minus = &m - &self.a0 * 2.0;
        let dmat = m_plus.lu().solve(&m_minus).expect("M + 2 A0 is positive definite");
        QuadraticKernel {
            m,
            dmat,
            eye,
        }
    }
}

/// Spectral data for the Gamma formula: `M = sqrt(2 A1)` and
/// `D = (M + 2 A0)^{-1} (M - 2 A0)`.
struct QuadraticKernel {
    m: DMatrix<f64>,
    dmat: DMatrix<f64>,
    eye: DMatrix<f64>,
}

impl QuadraticKernel {
    fn exp_m(&self, factor: f64) -> DMatrix<f64> {
        sym_func(&self.m, |l| (factor * l).exp())
    }

    /// `Gamma(s)` and `Gamma'(s)` for the extremal ending at time `t`, in the
    /// overflow-safe arrangement (all exponents nonpositive for `0 <= s <= t`):
    /// `Gamma(s) = (e^{(s-t)M} + e^{-sM} D e^{-tM}) (Id + e^{-tM} D e^{-tM})^{-1}`.
    fn gamma_and_dot(&self, s: f64, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let e_st = self.exp_m(s - t);
        let e_ms = self.exp_m(-s);
        let e_mt = self.exp_m(-t);
        let tail = &e_ms * &self.dmat * &e_mt;
        // Right division X D^{-1} computed as (D^T \ X^T)^T.
        let denom_t = (&self.eye + &e_mt * &self.dmat * &e_mt).transpose().lu();
        let gamma = denom_t
            .solve(&(&e_st + &tail).transpose())
            .expect("B(t) is invertible for positive-definite data")
            .transpose();
        let dot_num = &self.m * &e_st - &self.m * &tail;
        let gamma_dot = denom_t
            .solve(&dot_num.transpose())
            .expect("B(t) is invertible for positive-definite data")
            .transpose();
        (gamma, gamma_dot)
    }
}

/// The differential `Gamma(s)` of the extremal with respect to its endpoint:
/// `Gamma(s) = e^{s M} B(s) B(t)^{-1} e^{-t M}` with `M = sqrt(2 A1)` and
/// `B(s) = Id + e^{-2 s M} (M + 2 A0)^{-1} (M - 2 A0)`.
pub fn gamma_differential(prob: &QuadraticProblem, s: f64, t: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=t).contains(&s) {
        return Err(Error::Config(format!("need 0 <= s <= t, got s = {s}, t = {t}")));
    }
    Ok(prob.kernel().gamma_and_dot(s, t).0)
}

/// `D^2 u(t, .) = -C(t)` with
/// `C(t) = Gamma(0)^T A0 Gamma(0) + int_0^t (Gamma'^T Gamma' / 2 + Gamma^T A1 Gamma) ds`,
/// evaluated by Gauss-Legendre quadrature with `quad_nodes` points. The
/// transpose pairing keeps the result symmetric for non-commuting `A0`, `A1`.
pub fn hessian_closed_form(prob: &QuadraticProblem, t: f64, quad_nodes: usize) -> DMatrix<f64> {
    let d = prob.dim();
    if t == 0.0 {
        return -prob.a0.clone();
    }
    let kernel = prob.kernel();
    let gamma0 = kernel.gamma_and_dot(0.0, t).0;
    let mut c = gamma0.transpose() * &prob.a0 * &gamma0;
    let (nodes, weights) = gauss_legendre(quad_nodes, 0.0, t);
    let mut integral = DMatrix::zeros(d, d);
    for (&s, &w) in nodes.iter().zip(&weights) {
        let (g, gd) = kernel.gamma_and_dot(s, t);
        integral += (gd.transpose() * &gd * 0.5 + g.transpose() * &prob.a1 * &g) * w;
    }
    c += integral;
    let mut hess = -c;
    symmetrize(&mut hess);
    hess
}

/// Long-time limits: maximizer `A1^{-1} b`, competition
/// `I0 + b . A1^{-1} b / 2`, and Hessian `-sqrt(A1 / 2)`.
pub struct AsymptoticLimits {
    pub xbar_inf: DVector<f64>,
    pub i_inf: f64,
    pub hess_inf: DMatrix<f64>,
}

pub fn asymptotic_limits(prob: &QuadraticProblem) -> AsymptoticLimits {
    let xbar_inf = prob
        .a1
        .clone()
        .lu()
        .solve(&prob.b)
        .expect("A1 is positive definite");
    let i_inf = prob.i0 + 0.5 * prob.b.dot(&xbar_inf);
    let hess_inf = -spd_sqrt(&(&prob.a1 * 0.5));
    AsymptoticLimits {
        xbar_inf,
        i_inf,
        hess_inf,
    }
}

/// Options for the reduced-system integration.
#[derive(Debug, Clone)]
pub struct QuadraticSolveOptions {
    /// Gauss-Legendre nodes for each Hessian evaluation.
    pub quad_nodes: usize,
}

impl Default for QuadraticSolveOptions {
    fn default() -> Self {
        QuadraticSolveOptions { quad_nodes: 64 }
    }
}

/// Integrates the reduced maximizer ODE `xbar' = C(t)^{-1} (-A1 xbar + b)`
/// with classical Runge-Kutta and the closed-form `C(t)`, recovering `I`
/// pointwise and the value function as the exact quadratic profile
/// `u(t, x) = -(x - xbar) . C(t) (x - xbar) / 2`.
pub fn solve_quadratic_system(
    prob: &QuadraticProblem,
    t_final: f64,
    dt: f64,
    opts: &QuadraticSolveOptions,
) -> Result<ConstrainedSolution> {
    if !(t_final > 0.0) || !(dt > 0.0) {
        return Err(Error::Config("need positive horizon and step".into()));
    }
    let steps = (t_final / dt).ceil() as usize;
    let dt = t_final / steps as f64;
    let d = prob.dim();

    let mut times = Vec::with_capacity(steps + 1);
    let mut xbar = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    let mut competition = Vec::with_capacity(steps + 1);
    let mut hessians = Vec::with_capacity(steps + 1);

    let field = |c_lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, x: &DVector<f64>| {
        c_lu.solve(&(&prob.b - &prob.a1 * x)).expect("C(t) is positive definite")
    };

    let mut x = DVector::zeros(d);
    let mut hess_here = hessian_closed_form(prob, 0.0, opts.quad_nodes);
    for step in 0..=steps {
        let t = t_final * step as f64 / steps as f64;
        let c_lu = (-&hess_here).lu();
        times.push(t);
        xbar.push(x.clone());
        velocities.push(field(&c_lu, &x));
        competition.push(prob.competition_at(&x));
        hessians.push(hess_here.clone());
        if step == steps {
            break;
        }

        let t_mid = t + 0.5 * dt;
        let t_next = t + dt;
        let hess_mid = hessian_closed_form(prob, t_mid, opts.quad_nodes);
        let hess_next = hessian_closed_form(prob, t_next, opts.quad_nodes);
        let c_mid_lu = (-&hess_mid).lu();
        let c_next_lu = (-&hess_next).lu();

        let k1 = field(&c_lu, &x);
        let k2 = field(&c_mid_lu, &(&x + &k1 * (0.5 * dt)));
        let k3 = field(&c_mid_lu, &(&x + &k2 * (0.5 * dt)));
        let k4 = field(&c_next_lu, &(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        hess_here = hess_next;
    }

    let i_dots: Vec<f64> = (0..=steps)
        .map(|k| (&prob.b - &prob.a1 * &xbar[k]).dot(&velocities[k]))
        .collect();

    ConstrainedSolution::from_closed_form(
        prob.clone(),
        times,
        xbar,
        velocities,
        competition,
        i_dots,
        hessians,
    )
}
