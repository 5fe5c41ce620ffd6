//! The constrained problem as an ODE-PDE system.
//!
//! Instead of imposing `max_x u(t, .) = 0` directly, the solver tracks the
//! maximizer `xbar(t)` and the competition level `I(t)` through
//!
//! ```text
//! R(xbar(t), I(t)) = 0,
//! xbar'(t) = (-D^2 u(t, xbar(t)))^{-1} grad R(xbar(t), I(t)),
//! du/dt    = |grad u|^2 + R(x, I(t)),
//! ```
//!
//! solved on short intervals by a Picard iteration: a candidate maximizer
//! path determines `I` (zeroing the rate), `I` determines `u` (through the
//! trajectory solver), and integrating the maximizer ODE under that `u`
//! produces the next candidate. The map contracts for short intervals, and
//! intervals are chained with the end state restarting the next one.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::sym_eig_range;
use crate::model::{solve_competition_at, GrowthModel, InitialData};
use crate::quadratic::{hessian_closed_form, QuadraticProblem};
use crate::trajectory::{evaluate, EvalOptions, PointEval, ScalarPath, TimeDependentRate};

// ---------------------------------------------------------------------------
// Vector-valued sampled paths
// ---------------------------------------------------------------------------

/// A sampled vector function of time with cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct VectorPath {
    knots: Vec<f64>,
    values: Vec<DVector<f64>>,
    derivs: Vec<DVector<f64>>,
}

impl VectorPath {
    pub fn new(knots: Vec<f64>, values: Vec<DVector<f64>>, derivs: Vec<DVector<f64>>) -> Result<Self> {
        if knots.len() < 2 || knots.len() != values.len() || knots.len() != derivs.len() {
            return Err(Error::Config("path needs matching knots, values and derivatives".into()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("path knots must be strictly increasing".into()));
        }
        Ok(VectorPath { knots, values, derivs })
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        if t <= self.knots[0] {
            return self.values[0].clone();
        }
        if t >= *self.knots.last().unwrap() {
            return self.values.last().unwrap().clone();
        }
        let j = match self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(j) => return self.values[j].clone(),
            Err(j) => j - 1,
        };
        let h = self.knots[j + 1] - self.knots[j];
        let s = (t - self.knots[j]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        &self.values[j] * h00
            + &self.derivs[j] * (h10 * h)
            + &self.values[j + 1] * h01
            + &self.derivs[j + 1] * (h11 * h)
    }
}

// ---------------------------------------------------------------------------
// Options and diagnostics
// ---------------------------------------------------------------------------

/// Knobs for the constrained solve.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Interval length; defaults to [`choose_interval_length`] with `safety`.
    pub delta: Option<f64>,
    /// Fraction of the theoretical interval bound actually used.
    pub safety: f64,
    /// Runge-Kutta sub-steps per interval.
    pub substeps: usize,
    /// Fixed-point stopping tolerance (sup distance between iterates).
    pub tol: f64,
    /// Iteration cap per interval.
    pub max_iter: usize,
    /// Newton tolerance for the inner boundary value solves.
    pub el_tol: f64,
    /// Trajectory grid density per unit time.
    pub nodes_per_unit: f64,
    /// Minimum sub-intervals per trajectory solve.
    pub min_nodes: usize,
    /// Extrapolate the trajectory solves to fourth order.
    pub richardson: bool,
    /// How many times an interval may be halved before giving up.
    pub max_halvings: usize,
    /// Reject (rather than record) iterates leaving the theoretical ball.
    pub strict_ball: bool,
    /// Floor of the tolerance for the restart-state checks between
    /// intervals; widened automatically by the discretization-error estimate
    /// of the configured scheme.
    pub restart_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            delta: None,
            safety: 0.5,
            substeps: 8,
            tol: 1e-9,
            max_iter: 50,
            el_tol: 1e-10,
            nodes_per_unit: 64.0,
            min_nodes: 64,
            richardson: true,
            max_halvings: 10,
            strict_ball: false,
            restart_tol: 1e-6,
        }
    }
}

impl SolveOptions {
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            nodes_per_unit: self.nodes_per_unit,
            min_nodes: self.min_nodes,
            tol: self.el_tol,
            richardson: self.richardson,
        }
    }

    /// Tolerance actually applied to the restart checks: the configured floor
    /// widened by the scheme's expected discretization error (second or
    /// fourth order in the trajectory grid, fourth order in the interval
    /// sub-step through the Hermite path storage).
    fn effective_restart_tol(&self, interval_length: f64) -> f64 {
        let h = 1.0 / self.nodes_per_unit.max(1.0);
        let eval_est = if self.richardson {
            200.0 * h.powi(4)
        } else {
            5.0 * h.powi(2)
        };
        let dt_path = interval_length / self.substeps.max(1) as f64;
        self.restart_tol.max(eval_est + 2.0 * dt_path.powi(4))
    }
}

/// Convergence record of one interval's fixed-point iteration.
#[derive(Debug, Clone, Serialize)]
pub struct IterationTrace {
    pub interval: usize,
    pub t_start: f64,
    pub delta: f64,
    /// Sup distance between consecutive iterates, one entry per iterate.
    pub distances: Vec<f64>,
    /// Interval halvings that preceded this successful attempt.
    pub halvings: usize,
    /// Iterate nodes that left the theoretical containment ball.
    pub ball_exits: usize,
}

impl IterationTrace {
    /// Contraction ratio estimates between consecutive iterate distances.
    pub fn ratios(&self) -> Vec<f64> {
        self.distances
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Elementary operations
// ---------------------------------------------------------------------------

/// The unique competition level zeroing the rate at `x`. Errors when `x` is
/// outside the admissible region `R(x, 0) > 0 >= R(x, I_max)` (the usual sign
/// that an interval was too long and the maximizer escaped).
pub fn solve_i_from_x(model: &GrowthModel, x: &DVector<f64>) -> Result<f64> {
    solve_competition_at(model, x)
}

/// One explicit stage of the maximizer ODE: `x + dt (-hess)^{-1} grad_r`.
pub fn step_xbar(
    hess: &DMatrix<f64>,
    grad_r: &DVector<f64>,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    Ok(x + maximizer_velocity(hess, grad_r)? * dt)
}

/// `(-hess)^{-1} grad_r`, requiring the Hessian to be negative definite.
fn maximizer_velocity(hess: &DMatrix<f64>, grad_r: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(-hess).ok_or_else(|| Error::DegenerateHessian {
        detail: "value Hessian is not negative definite".into(),
    })?;
    Ok(chol.solve(grad_r))
}

/// Geometry of the admissible regions for quadratic rates, used to bound the
/// iteration interval.
struct AdmissibleGeometry {
    /// Gap between the restart region `{R(., I0) >= 0}` and the boundary of
    /// the admissible region `{R(., 0) > 0}`.
    gap: f64,
    /// Bound on `|grad R|` over the admissible region.
    c_m: f64,
}

fn admissible_geometry(model: &GrowthModel, data: &InitialData) -> Result<AdmissibleGeometry> {
    match model.family() {
        crate::model::GrowthFamily::Quadratic { a1, b, i_shift } => {
            let peak = model.rate_peak(data.xbar0())?;
            let i_m_natural = i_shift + 0.5 * b.dot(&peak);
            if i_m_natural <= 0.0 {
                return Err(Error::Config(
                    "the admissible region {R(., 0) > 0} is empty".into(),
                ));
            }
            let head = i_m_natural - data.i0();
            if head < 0.0 {
                return Err(Error::Config(
                    "the restart region {R(., I0) >= 0} is empty".into(),
                ));
            }
            let (_, l_max) = sym_eig_range(a1);
            let r_out = (2.0 * i_m_natural).sqrt();
            let r_in = (2.0 * head).sqrt();
            Ok(AdmissibleGeometry {
                gap: (r_out - r_in) / l_max.sqrt(),
                c_m: l_max.sqrt() * r_out,
            })
        }
        crate::model::GrowthFamily::Custom(_) => {
            // Radial probe from the rate peak: bisection locates the zero
            // crossings of R(., 0) and R(., I0) along sampled directions.
            let d = model.dim();
            let peak = model.rate_peak(data.xbar0())?;
            if model.value_raw(&peak, 0.0) <= 0.0 {
                return Err(Error::Config(
                    "the admissible region {R(., 0) > 0} is empty".into(),
                ));
            }
            let c = model.constants();
            let radius_cap = (c.k0_bar / c.k1_bar).sqrt() * 2.0 + 1.0;
            let dirs = direction_samples(d, 64);
            let mut gap = f64::INFINITY;
            let mut c_m: f64 = 0.0;
            for dir in &dirs {
                let cross = |level: f64| -> f64 {
                    let f = |r: f64| model.value_raw(&(&peak + dir * r), level);
                    let mut lo = 0.0;
                    let mut hi = radius_cap;
                    if f(hi) > 0.0 {
                        return hi;
                    }
                    for _ in 0..80 {
                        let mid = 0.5 * (lo + hi);
                        if f(mid) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    0.5 * (lo + hi)
                };
                let r_omega = cross(0.0);
                let r_omega0 = if model.value_raw(&peak, data.i0()) >= 0.0 {
                    cross(data.i0())
                } else {
                    0.0
                };
                gap = gap.min(r_omega - r_omega0);
                for k in 0..=16 {
                    let r = r_omega * k as f64 / 16.0;
                    c_m = c_m.max(model.grad_raw(&(&peak + dir * r), 0.0).norm());
                    c_m = c_m.max(model.grad_raw(&(&peak + dir * r), model.i_max()).norm());
                }
            }
            Ok(AdmissibleGeometry { gap: gap.max(0.0), c_m })
        }
    }
}

fn direction_samples(d: usize, count: usize) -> Vec<DVector<f64>> {
    if d == 1 {
        return vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)];
    }
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6469_7273);
    (0..count)
        .map(|_| {
            let mut v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0_f64));
            while v.norm() < 1e-6 {
                v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0_f64));
            }
            v.normalize()
        })
        .collect()
}

/// The theoretically safe iteration interval
/// `safety * min(2 L1_bar, sqrt(K1_bar)) / C_M * dist(Omega_0, boundary of Omega)`,
/// exact for quadratic rates (the regions are concentric ellipsoids) and
/// probed radially for custom ones. The time-horizon smallness condition is
/// realized adaptively by interval halving, not by a formula.
pub fn choose_interval_length(
    model: &GrowthModel,
    data: &InitialData,
    _t_final: f64,
    safety: f64,
) -> Result<f64> {
    if !(0.0 < safety && safety <= 1.0) {
        return Err(Error::Config(format!("safety must be in (0, 1], got {safety}")));
    }
    let geom = admissible_geometry(model, data)?;
    if geom.gap <= 0.0 {
        return Err(Error::Config(
            "no gap between the restart region and the admissible boundary".into(),
        ));
    }
    let lc = data.constants();
    let curvature_floor = (2.0 * lc.l1_bar).min(model.constants().k1_bar.sqrt());
    Ok(safety * curvature_floor / geom.c_m * geom.gap)
}

// ---------------------------------------------------------------------------
// Fixed-point iteration on one interval
// ---------------------------------------------------------------------------

/// State restarting an interval: the absolute start time, the maximizer and
/// competition there, and the competition path already laid down on
/// `[0, t_start]` (the value function is re-derived from it on demand).
#[derive(Debug, Clone)]
pub struct RestartState {
    pub t_start: f64,
    pub xbar: DVector<f64>,
    pub competition: f64,
    pub prefix: Option<ScalarPath>,
}

impl RestartState {
    pub fn initial(data: &InitialData) -> Self {
        RestartState {
            t_start: 0.0,
            xbar: data.xbar0().clone(),
            competition: data.i0(),
            prefix: None,
        }
    }
}

/// One interval of the solution: node times (absolute), maximizer positions
/// and velocities, competition values and slopes, and value Hessians at the
/// maximizer.
#[derive(Debug, Clone)]
pub struct SolutionSegment {
    pub times: Vec<f64>,
    pub xbar: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub competition: Vec<f64>,
    pub competition_dot: Vec<f64>,
    pub hessians: Vec<DMatrix<f64>>,
}

/// One candidate maximizer path on an interval, with everything the next
/// Picard sweep needs.
struct IteratePath {
    times: Vec<f64>,
    x: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    i: Vec<f64>,
    i_dot: Vec<f64>,
}

impl IteratePath {
    fn suffix_path(&self) -> ScalarPath {
        ScalarPath::cubic_hermite(self.times.clone(), self.i.clone(), self.i_dot.clone())
            .expect("iterate knots are strictly increasing")
    }

    fn position_path(&self) -> VectorPath {
        VectorPath::new(self.times.clone(), self.x.clone(), self.v.clone())
            .expect("iterate knots are strictly increasing")
    }
}

/// Computes `I = ` root of `R(x, .)` and its time slope along a path point.
fn competition_with_slope(
    model: &GrowthModel,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(f64, f64)> {
    let i = solve_i_from_x(model, x)?;
    let grad = model.grad_raw(x, i);
    let di = model.dr_di_raw(x, i);
    Ok((i, -grad.dot(v) / di))
}

/// Applies the interval map once: given a candidate path, compute the
/// competition it induces, the value function for that competition, and
/// integrate the maximizer ODE under that value function.
fn apply_phi(
    model: &GrowthModel,
    data: &InitialData,
    restart: &RestartState,
    prev: &IteratePath,
    opts: &SolveOptions,
) -> Result<(IteratePath, f64)> {
    let eval_opts = opts.eval_options();
    let suffix = prev.suffix_path();
    let full_path = match &restart.prefix {
        Some(p) => p.concat(&suffix)?,
        None => suffix,
    };
    let rate = TimeDependentRate::new(model.clone(), full_path)?;
    let prev_pos = prev.position_path();

    // Velocity field of the maximizer ODE evaluated along the previous path.
    let field = |t: f64| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let x_here = prev_pos.eval(t);
        let hess = evaluate(&rate, data, t, &x_here, &eval_opts)?.hessian;
        let grad_r = model.grad_raw(&x_here, rate.i_at(t));
        Ok((maximizer_velocity(&hess, &grad_r)?, hess))
    };

    let m = prev.times.len() - 1;
    let mut x = vec![restart.xbar.clone()];
    let mut v = Vec::with_capacity(m + 1);
    let mut dist: f64 = 0.0;
    let (mut f_left, _) = field(prev.times[0])?;
    for j in 0..m {
        let dt = prev.times[j + 1] - prev.times[j];
        let (f_mid, _) = field(prev.times[j] + 0.5 * dt)?;
        let (f_right, _) = field(prev.times[j + 1])?;
        let next = &x[j] + (&f_left + &f_mid * 4.0 + &f_right) * (dt / 6.0);
        dist = dist.max((&next - &prev.x[j + 1]).norm());
        x.push(next);
        v.push(f_left);
        f_left = f_right;
    }
    v.push(f_left);

    let mut i = Vec::with_capacity(m + 1);
    let mut i_dot = Vec::with_capacity(m + 1);
    for j in 0..=m {
        let (ij, dij) = competition_with_slope(model, &x[j], &v[j])?;
        i.push(ij);
        i_dot.push(dij);
    }

    Ok((
        IteratePath {
            times: prev.times.clone(),
            x,
            v,
            i,
            i_dot,
        },
        dist,
    ))
}

/// Runs the Picard iteration on `[t_start, t_start + delta]`.
///
/// The iteration starts from the constant path at the restart maximizer and
/// stops when consecutive paths agree to `opts.tol` in the sup norm over the
/// sub-grid nodes. Three consecutive non-contracting sweeps (or an exhausted
/// iteration budget) signal that the interval is too long; the caller halves
/// it and retries.
pub fn fixed_point_iterate(
    model: &GrowthModel,
    data: &InitialData,
    restart: &RestartState,
    delta: f64,
    opts: &SolveOptions,
) -> Result<(SolutionSegment, IterationTrace)> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("interval length must be positive, got {delta}")));
    }
    let m = opts.substeps.max(1);
    let times: Vec<f64> = (0..=m)
        .map(|j| restart.t_start + delta * j as f64 / m as f64)
        .collect();

    let d = restart.xbar.len();
    let mut current = IteratePath {
        times: times.clone(),
        x: vec![restart.xbar.clone(); m + 1],
        v: vec![DVector::zeros(d); m + 1],
        i: vec![restart.competition; m + 1],
        i_dot: vec![0.0; m + 1],
    };

    let ball_radius = ball_radius(model, data, delta).ok();
    let mut trace = IterationTrace {
        interval: 0,
        t_start: restart.t_start,
        delta,
        distances: Vec::new(),
        halvings: 0,
        ball_exits: 0,
    };

    let mut stagnant = 0usize;
    for iteration in 1..=opts.max_iter {
        let (next, dist) = apply_phi(model, data, restart, &current, opts)?;
        trace.distances.push(dist);

        if let Some(r) = ball_radius {
            let exits = next
                .x
                .iter()
                .filter(|x| (*x - &restart.xbar).norm() > r)
                .count();
            trace.ball_exits += exits;
            if exits > 0 && opts.strict_ball {
                return Err(Error::IntervalTooLong {
                    t_start: restart.t_start,
                    t_end: restart.t_start + delta,
                    iterations: iteration,
                    distance: dist,
                });
            }
        }

        let prev_dist = if trace.distances.len() >= 2 {
            trace.distances[trace.distances.len() - 2]
        } else {
            f64::INFINITY
        };
        stagnant = if dist >= prev_dist && dist > opts.tol {
            stagnant + 1
        } else {
            0
        };
        current = next;

        if dist <= opts.tol {
            let segment = finalize_segment(model, data, restart, &current, opts)?;
            return Ok((segment, trace));
        }
        if stagnant >= 3 {
            return Err(Error::IntervalTooLong {
                t_start: restart.t_start,
                t_end: restart.t_start + delta,
                iterations: iteration,
                distance: dist,
            });
        }
    }
    Err(Error::IntervalTooLong {
        t_start: restart.t_start,
        t_end: restart.t_start + delta,
        iterations: opts.max_iter,
        distance: *trace.distances.last().unwrap_or(&f64::NAN),
    })
}

/// Radius of the containment ball `C_M delta / min(2 L1_bar, sqrt(K1_bar))`.
fn ball_radius(model: &GrowthModel, data: &InitialData, delta: f64) -> Result<f64> {
    let geom = admissible_geometry(model, data)?;
    let lc = data.constants();
    let floor = (2.0 * lc.l1_bar).min(model.constants().k1_bar.sqrt());
    Ok(geom.c_m * delta / floor)
}

/// Recomputes the value Hessians along the converged path with its own
/// competition, producing the stored interval data.
fn finalize_segment(
    model: &GrowthModel,
    data: &InitialData,
    restart: &RestartState,
    path: &IteratePath,
    opts: &SolveOptions,
) -> Result<SolutionSegment> {
    let eval_opts = opts.eval_options();
    let suffix = path.suffix_path();
    let full_path = match &restart.prefix {
        Some(p) => p.concat(&suffix)?,
        None => suffix,
    };
    let rate = TimeDependentRate::new(model.clone(), full_path)?;
    let mut hessians = Vec::with_capacity(path.times.len());
    for (t, x) in path.times.iter().zip(&path.x) {
        hessians.push(evaluate(&rate, data, *t, x, &eval_opts)?.hessian);
    }
    Ok(SolutionSegment {
        times: path.times.clone(),
        xbar: path.x.clone(),
        velocities: path.v.clone(),
        competition: path.i.clone(),
        competition_dot: path.i_dot.clone(),
        hessians,
    })
}

/// Applies the interval map once to an already-computed segment and returns
/// the sup distance, certifying a fixed point.
pub fn verify_fixed_point(
    model: &GrowthModel,
    data: &InitialData,
    restart: &RestartState,
    segment: &SolutionSegment,
    opts: &SolveOptions,
) -> Result<f64> {
    let path = IteratePath {
        times: segment.times.clone(),
        x: segment.xbar.clone(),
        v: segment.velocities.clone(),
        i: segment.competition.clone(),
        i_dot: segment.competition_dot.clone(),
    };
    let (_, dist) = apply_phi(model, data, restart, &path, opts)?;
    Ok(dist)
}

// ---------------------------------------------------------------------------
// The chained solve
// ---------------------------------------------------------------------------

/// Time series of the constrained solution plus an evaluator for `u(t, x)`.
#[derive(Debug, Clone)]
pub struct ConstrainedSolution {
    times: Vec<f64>,
    xbar: Vec<DVector<f64>>,
    velocities: Vec<DVector<f64>>,
    competition: Vec<f64>,
    competition_dot: Vec<f64>,
    hessians: Vec<DMatrix<f64>>,
    evaluator: SolutionEvaluator,
    traces: Vec<IterationTrace>,
}

/// How `u(t, x)` is reconstructed from the stored solution.
#[derive(Debug, Clone)]
pub enum SolutionEvaluator {
    /// Re-solve the trajectory problem under the stored competition path.
    Trajectory {
        data: InitialData,
        rate: TimeDependentRate,
        opts: EvalOptions,
    },
    /// Closed-form quadratic profile `-(x - xbar) . C(t) (x - xbar) / 2`.
    QuadraticProfile {
        prob: QuadraticProblem,
        quad_nodes: usize,
    },
}

impl ConstrainedSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn xbar(&self) -> &[DVector<f64>] {
        &self.xbar
    }

    pub fn velocities(&self) -> &[DVector<f64>] {
        &self.velocities
    }

    pub fn competition(&self) -> &[f64] {
        &self.competition
    }

    pub fn competition_dot(&self) -> &[f64] {
        &self.competition_dot
    }

    pub fn hessians(&self) -> &[DMatrix<f64>] {
        &self.hessians
    }

    pub fn traces(&self) -> &[IterationTrace] {
        &self.traces
    }

    pub fn evaluator(&self) -> &SolutionEvaluator {
        &self.evaluator
    }

    pub fn dim(&self) -> usize {
        self.xbar[0].len()
    }

    pub fn t_final(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Maximizer at an arbitrary time, by cubic Hermite interpolation.
    pub fn xbar_at(&self, t: f64) -> DVector<f64> {
        VectorPath::new(self.times.clone(), self.xbar.clone(), self.velocities.clone())
            .expect("solution grid is strictly increasing")
            .eval(t)
    }

    /// Competition level at an arbitrary time.
    pub fn competition_at(&self, t: f64) -> f64 {
        ScalarPath::cubic_hermite(
            self.times.clone(),
            self.competition.clone(),
            self.competition_dot.clone(),
        )
        .expect("solution grid is strictly increasing")
        .eval(t)
    }

    /// Evaluates `u`, `grad u`, `D^2 u` at `(t, x)`.
    pub fn evaluate(&self, t: f64, x: &DVector<f64>) -> Result<PointEval> {
        match &self.evaluator {
            SolutionEvaluator::Trajectory { data, rate, opts } => evaluate(rate, data, t, x, opts),
            SolutionEvaluator::QuadraticProfile { prob, quad_nodes } => {
                let c = -hessian_closed_form(prob, t, *quad_nodes);
                let dx = x - self.xbar_at(t);
                let cdx = &c * &dx;
                Ok(PointEval {
                    value: -0.5 * cdx.dot(&dx),
                    gradient: -cdx,
                    hessian: -c,
                })
            }
        }
    }

    pub(crate) fn from_closed_form(
        prob: QuadraticProblem,
        times: Vec<f64>,
        xbar: Vec<DVector<f64>>,
        velocities: Vec<DVector<f64>>,
        competition: Vec<f64>,
        competition_dot: Vec<f64>,
        hessians: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("a solution needs at least two samples".into()));
        }
        Ok(ConstrainedSolution {
            times,
            xbar,
            velocities,
            competition,
            competition_dot,
            hessians,
            evaluator: SolutionEvaluator::QuadraticProfile {
                prob,
                quad_nodes: 64,
            },
            traces: Vec::new(),
        })
    }
}

/// Verifies the restart conditions: the maximizer sits in the restart region,
/// the value Hessian lies in the curvature band, the maximum of `u` is still
/// zero at the maximizer, and the rate vanishes there.
fn check_restart(
    model: &GrowthModel,
    data: &InitialData,
    state: &RestartState,
    hess: &DMatrix<f64>,
    u_eval: Option<&PointEval>,
    tol: f64,
) -> Result<()> {
    let fail = |detail: String| -> Result<()> {
        Err(Error::RestartInconsistent {
            t: state.t_start,
            detail,
        })
    };
    let r_at_i0 = model.value_raw(&state.xbar, data.i0());
    if r_at_i0 < -1e-8 {
        return fail(format!(
            "maximizer left the restart region: R(xbar, I0) = {r_at_i0:.3e}"
        ));
    }
    let r_here = model.value_raw(&state.xbar, state.competition);
    if r_here.abs() > 1e-8 {
        return fail(format!("rate does not vanish at the maximizer: {r_here:.3e}"));
    }
    let lc = data.constants();
    let c = model.constants();
    let lower = -(2.0 * lc.l1_under).max(c.k1_under.sqrt());
    let upper = -(2.0 * lc.l1_bar).min(c.k1_bar.sqrt());
    let (hlo, hhi) = sym_eig_range(hess);
    if hlo < lower - tol || hhi > upper + tol {
        return fail(format!(
            "value Hessian eigenvalues [{hlo:.6}, {hhi:.6}] leave the band [{lower:.6}, {upper:.6}]"
        ));
    }
    if let Some(eval) = u_eval {
        if eval.value.abs() > tol {
            return fail(format!("max u drifted from zero: u(t, xbar) = {:.3e}", eval.value));
        }
        if eval.gradient.norm() > tol {
            return fail(format!(
                "maximizer is not critical: |grad u(t, xbar)| = {:.3e}",
                eval.gradient.norm()
            ));
        }
    }
    Ok(())
}

/// Solves the constrained problem on `[0, T]` by chaining interval fixed
/// points, each restarted from the end state of the previous one.
pub fn solve_constrained(
    model: &GrowthModel,
    data: &InitialData,
    t_final: f64,
    opts: &SolveOptions,
) -> Result<ConstrainedSolution> {
    if !(t_final > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {t_final}")));
    }
    if model.dim() != data.dim() {
        return Err(Error::Config("model and initial data dimensions differ".into()));
    }
    // Initial compatibility: max u0 = u0(xbar0) = 0 and R(xbar0, I0) = 0.
    let u0_at = data.value(data.xbar0()).abs();
    let g0_at = data.grad(data.xbar0()).norm();
    let r0_at = model.value_raw(data.xbar0(), data.i0()).abs();
    if u0_at > 1e-9 || g0_at > 1e-9 || r0_at > 1e-9 {
        return Err(Error::RestartInconsistent {
            t: 0.0,
            detail: format!(
                "initial data violates compatibility (|u0(xbar0)| = {u0_at:.3e}, \
                 |grad u0(xbar0)| = {g0_at:.3e}, |R(xbar0, I0)| = {r0_at:.3e}); \
                 consider recenter_initial"
            ),
        });
    }

    let mut delta = match opts.delta {
        Some(d) if d > 0.0 => d,
        Some(d) => return Err(Error::Config(format!("delta must be positive, got {d}"))),
        None => choose_interval_length(model, data, t_final, opts.safety)?,
    };
    delta = delta.min(t_final);

    let mut state = RestartState::initial(data);
    let mut times: Vec<f64> = Vec::new();
    let mut xbar: Vec<DVector<f64>> = Vec::new();
    let mut velocities: Vec<DVector<f64>> = Vec::new();
    let mut competition: Vec<f64> = Vec::new();
    let mut competition_dot: Vec<f64> = Vec::new();
    let mut hessians: Vec<DMatrix<f64>> = Vec::new();
    let mut traces: Vec<IterationTrace> = Vec::new();
    let mut interval = 0usize;

    while state.t_start < t_final - 1e-12 * t_final.max(1.0) {
        let remaining = t_final - state.t_start;
        let mut attempt = delta.min(remaining);
        let mut halvings = 0usize;
        let (segment, mut trace) = loop {
            match fixed_point_iterate(model, data, &state, attempt, opts) {
                Ok(done) => break done,
                // A stubborn interval shows up as missing contraction, as an
                // iterate escaping the admissible region, or as the inner
                // solver giving up on a wild state; all prompt halving.
                Err(
                    e @ (Error::IntervalTooLong { .. }
                    | Error::Inadmissible { .. }
                    | Error::NewtonStalled { .. }),
                ) => {
                    if halvings >= opts.max_halvings {
                        return Err(e);
                    }
                    attempt *= 0.5;
                    halvings += 1;
                    // Future intervals inherit the shortened length.
                    delta = delta.min(attempt);
                }
                Err(e) => return Err(e),
            }
        };
        trace.interval = interval;
        trace.halvings = halvings;
        interval += 1;

        // Append, sharing the joint node with the previous interval.
        let start_idx = if times.is_empty() { 0 } else { 1 };
        for k in start_idx..segment.times.len() {
            times.push(segment.times[k]);
            xbar.push(segment.xbar[k].clone());
            velocities.push(segment.velocities[k].clone());
            competition.push(segment.competition[k]);
            competition_dot.push(segment.competition_dot[k]);
            hessians.push(segment.hessians[k].clone());
        }
        traces.push(trace);

        // Restart state for the next interval.
        let suffix = ScalarPath::cubic_hermite(
            segment.times.clone(),
            segment.competition.clone(),
            segment.competition_dot.clone(),
        )?;
        let prefix = match &state.prefix {
            Some(p) => p.concat(&suffix)?,
            None => suffix,
        };
        let end = segment.times.len() - 1;
        state = RestartState {
            t_start: segment.times[end],
            xbar: segment.xbar[end].clone(),
            competition: segment.competition[end],
            prefix: Some(prefix),
        };

        // Verify the restart conditions before entering the next interval.
        if state.t_start < t_final - 1e-12 * t_final.max(1.0) {
            let rate = TimeDependentRate::new(model.clone(), state.prefix.clone().unwrap())?;
            let eval = evaluate(&rate, data, state.t_start, &state.xbar, &opts.eval_options())?;
            check_restart(
                model,
                data,
                &state,
                &segment.hessians[end],
                Some(&eval),
                opts.effective_restart_tol(segment.times[end] - segment.times[0]),
            )?;
        }
    }

    let rate = TimeDependentRate::new(model.clone(), state.prefix.unwrap())?;
    Ok(ConstrainedSolution {
        times,
        xbar,
        velocities,
        competition,
        competition_dot,
        hessians,
        evaluator: SolutionEvaluator::Trajectory {
            data: data.clone(),
            rate,
            opts: opts.eval_options(),
        },
        traces,
    })
}

// ---------------------------------------------------------------------------
// Residual diagnostics
// ---------------------------------------------------------------------------

/// Pointwise residuals of the equivalent-system identities at one grid time.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    /// `|R(xbar, I)|`.
    pub rate: f64,
    /// `|grad u(t, xbar)|`.
    pub gradient: f64,
    /// `|u(t, xbar)|`.
    pub value: f64,
}

/// Aggregated residuals of a constrained solution.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub per_time: Vec<ResidualRow>,
    pub sup_rate: f64,
    pub sup_gradient: f64,
    pub sup_value: f64,
    /// Largest positive part of `u` over the supplied sample points.
    pub max_positive_part: f64,
    /// Largest decrease of the competition level between grid times.
    pub monotonicity_defect: f64,
}

/// Evaluates the identities `R(xbar, I) = 0`, `grad u(t, xbar) = 0`,
/// `u(t, xbar) = 0` on the solution grid, the sign constraint `u <= 0` at the
/// supplied sample points, and the monotonicity of `I`.
pub fn residuals(
    sol: &ConstrainedSolution,
    model: &GrowthModel,
    _data: &InitialData,
    sample_points: &[(f64, DVector<f64>)],
) -> Result<ResidualReport> {
    let mut per_time = Vec::with_capacity(sol.times.len());
    let mut sup_rate: f64 = 0.0;
    let mut sup_gradient: f64 = 0.0;
    let mut sup_value: f64 = 0.0;
    for k in 0..sol.times.len() {
        let t = sol.times[k];
        let rate = model.value_raw(&sol.xbar[k], sol.competition[k]).abs();
        let eval = sol.evaluate(t, &sol.xbar[k])?;
        let row = ResidualRow {
            t,
            rate,
            gradient: eval.gradient.norm(),
            value: eval.value.abs(),
        };
        sup_rate = sup_rate.max(row.rate);
        sup_gradient = sup_gradient.max(row.gradient);
        sup_value = sup_value.max(row.value);
        per_time.push(row);
    }
    let mut max_positive_part: f64 = 0.0;
    for (t, x) in sample_points {
        let eval = sol.evaluate(*t, x)?;
        max_positive_part = max_positive_part.max(eval.value.max(0.0));
    }
    let mut monotonicity_defect: f64 = 0.0;
    for w in sol.competition.windows(2) {
        monotonicity_defect = monotonicity_defect.max(-(w[1] - w[0]));
    }
    Ok(ResidualReport {
        per_time,
        sup_rate,
        sup_gradient,
        sup_value,
        max_positive_part: max_positive_part.max(0.0),
        monotonicity_defect: monotonicity_defect.max(0.0),
    })
}

/// Deterministic sample points for the global sign check `u <= 0`: a box of
/// half-width `3 max(|xbar0|, |rate peak|) + 3` around the origin, paired
/// with a thinned version of the solution grid.
pub fn positivity_samples(
    sol: &ConstrainedSolution,
    model: &GrowthModel,
    data: &InitialData,
    per_time: usize,
    seed: u64,
) -> Vec<(f64, DVector<f64>)> {
    use rand::prelude::*;
    let d = sol.dim();
    let peak = model
        .rate_peak(data.xbar0())
        .unwrap_or_else(|_| data.xbar0().clone());
    let half_width = 3.0 * data.xbar0().abs().max().max(peak.abs().max()) + 3.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let stride = (sol.times.len() / 24).max(1);
    let mut out = Vec::new();
    for (k, &t) in sol.times.iter().enumerate() {
        if k % stride != 0 && k + 1 != sol.times.len() {
            continue;
        }
        for _ in 0..per_time {
            let x = DVector::from_fn(d, |_, _| rng.random_range(-half_width..half_width));
            out.push((t, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GrowthConstants, InitialConstants};
    use approx::assert_relative_eq;

    fn canonical_constants() -> (GrowthConstants, InitialConstants) {
        (
            GrowthConstants {
                k0_bar: 0.25,
                k1_bar: 1.0,
                k1_under: 1.0,
                k2_bar: 1.0,
                k2_under: 1.0,
                k3: 0.0,
                k4: 0.0,
            },
            InitialConstants {
                l0_under: 1.0,
                l0_bar: 1.0,
                l1_under: 0.5,
                l1_bar: 0.5,
                l2: 1.0,
                l3: 0.0,
            },
        )
    }

    fn canonical() -> (GrowthModel, InitialData) {
        let (gc, ic) = canonical_constants();
        let model = GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, 1.0),
            1.0,
            None,
            gc,
        )
        .unwrap();
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            0.0,
            1.0,
            ic,
        )
        .unwrap();
        (model, data)
    }

    fn stationary() -> (GrowthModel, InitialData) {
        let (gc, ic) = canonical_constants();
        let model = GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            1.0,
            None,
            gc,
        )
        .unwrap();
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            0.0,
            1.0,
            ic,
        )
        .unwrap();
        (model, data)
    }

    #[test]
    fn competition_root_closed_form() {
        let (model, _) = canonical();
        for &(x, expected) in &[(0.0, 1.0), (0.5, 1.25), (0.25, 1.1875)] {
            let i = solve_i_from_x(&model, &DVector::from_element(1, x)).unwrap();
            assert_relative_eq!(i, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn competition_root_outside_admissible_region() {
        let (model, _) = canonical();
        let err = solve_i_from_x(&model, &DVector::from_element(1, 2.0)).unwrap_err();
        assert!(matches!(err, Error::Inadmissible { .. }));
    }

    #[test]
    fn step_xbar_examples() {
        // Equilibrium: zero rate gradient leaves x unchanged.
        let x = DVector::from_element(1, 0.3);
        let out = step_xbar(
            &DMatrix::from_element(1, 1, -1.5),
            &DVector::zeros(1),
            &x,
            0.7,
        )
        .unwrap();
        assert_relative_eq!(out[0], 0.3);

        // Unit Hessian: velocity is the rate gradient itself.
        let out = step_xbar(
            &DMatrix::from_element(1, 1, -1.0),
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            0.1,
        )
        .unwrap();
        assert_relative_eq!(out[0], 0.1);

        // Diagonal inverse in two dimensions.
        let out = step_xbar(
            &(DMatrix::identity(2, 2) * -2.0),
            &DVector::from_vec(vec![4.0, 0.0]),
            &DVector::zeros(2),
            1.0,
        )
        .unwrap();
        assert_relative_eq!(out[0], 2.0);
        assert_relative_eq!(out[1], 0.0);

        // Indefinite Hessian is rejected.
        let err = step_xbar(
            &DMatrix::from_element(1, 1, 0.5),
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateHessian { .. }));
    }

    #[test]
    fn interval_length_canonical_geometry() {
        let (model, data) = canonical();
        // Roots of -x^2 + x + 1: (1 +- sqrt 5)/2; restart region [0, 1];
        // gap = (1 + sqrt 5)/2 - 1, gradient bound sqrt 5.
        let gap = 0.5 * (1.0 + 5.0f64.sqrt()) - 1.0;
        let mu = 1.0 / 5.0f64.sqrt() * gap;
        let full = choose_interval_length(&model, &data, 5.0, 1.0).unwrap();
        assert_relative_eq!(full, mu, epsilon = 1e-12);
        let half = choose_interval_length(&model, &data, 5.0, 0.5).unwrap();
        assert_relative_eq!(half, 0.5 * mu, epsilon = 1e-12);
        assert_relative_eq!(gap, 0.6180339887498949, epsilon = 1e-12);
    }

    #[test]
    fn stationary_interval_converges_in_one_sweep() {
        let (model, data) = stationary();
        let restart = RestartState::initial(&data);
        let (segment, trace) =
            fixed_point_iterate(&model, &data, &restart, 0.2, &SolveOptions::default()).unwrap();
        assert_eq!(trace.distances.len(), 1);
        assert!(trace.distances[0] <= 1e-12);
        for (x, i) in segment.xbar.iter().zip(&segment.competition) {
            assert!(x[0].abs() <= 1e-12);
            assert_relative_eq!(*i, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn canonical_interval_matches_the_closed_form() {
        let (model, data) = canonical();
        let restart = RestartState::initial(&data);
        let (segment, trace) =
            fixed_point_iterate(&model, &data, &restart, 0.1, &SolveOptions::default()).unwrap();
        let end = segment.times.len() - 1;
        assert_relative_eq!(
            segment.xbar[end][0],
            0.5 * (1.0 - (-0.2f64).exp()),
            epsilon = 1e-8
        );
        // Contraction all the way down.
        for r in trace.ratios() {
            assert!(r < 1.0);
        }
        assert!(trace.distances.len() >= 2);
    }

    #[test]
    fn contraction_ratio_shrinks_with_the_interval() {
        let (model, data) = canonical();
        let restart = RestartState::initial(&data);
        let mean_ratio = |delta: f64| {
            let (_, trace) =
                fixed_point_iterate(&model, &data, &restart, delta, &SolveOptions::default())
                    .unwrap();
            let ratios = trace.ratios();
            // Skip the last ratio: it is contaminated by the stopping floor.
            let used = &ratios[..ratios.len().saturating_sub(1)];
            used.iter().sum::<f64>() / used.len() as f64
        };
        let coarse = mean_ratio(0.2);
        let fine = mean_ratio(0.1);
        assert!(coarse < 1.0);
        assert!(fine < coarse, "ratio should shrink: {fine} vs {coarse}");
    }

    #[test]
    fn fixed_point_certificate() {
        let (model, data) = canonical();
        let restart = RestartState::initial(&data);
        let opts = SolveOptions::default();
        let (segment, _) = fixed_point_iterate(&model, &data, &restart, 0.1, &opts).unwrap();
        let dist = verify_fixed_point(&model, &data, &restart, &segment, &opts).unwrap();
        assert!(dist <= 2.0 * opts.tol, "fixed-point defect {dist}");
    }

    #[test]
    fn stationary_solve_is_exact() {
        let (model, data) = stationary();
        let opts = SolveOptions {
            delta: Some(0.25),
            ..SolveOptions::default()
        };
        let sol = solve_constrained(&model, &data, 2.0, &opts).unwrap();
        for (x, i) in sol.xbar().iter().zip(sol.competition()) {
            assert!(x[0].abs() <= 1e-12);
            assert_relative_eq!(*i, 1.0, epsilon = 1e-12);
        }
        let samples = positivity_samples(&sol, &model, &data, 4, 7);
        let report = residuals(&sol, &model, &data, &samples).unwrap();
        assert!(report.sup_rate <= 1e-10);
        assert!(report.sup_gradient <= 1e-10);
        assert!(report.sup_value <= 1e-10);
        assert!(report.max_positive_part <= 1e-10);
        assert!(report.monotonicity_defect <= 1e-12);
    }

    #[test]
    fn canonical_solve_follows_the_transient() {
        let (model, data) = canonical();
        let opts = SolveOptions {
            delta: Some(0.05),
            ..SolveOptions::default()
        };
        let sol = solve_constrained(&model, &data, 1.0, &opts).unwrap();
        for (k, &t) in sol.times().iter().enumerate() {
            let x_exact = 0.5 * (1.0 - (-2.0 * t).exp());
            let i_exact = 1.0 + 0.25 * (1.0 - (-4.0 * t).exp());
            assert!(
                (sol.xbar()[k][0] - x_exact).abs() <= 1e-5,
                "t = {t}: {} vs {x_exact}",
                sol.xbar()[k][0]
            );
            assert!((sol.competition()[k] - i_exact).abs() <= 1e-5);
        }
        // I increases and x stays in the restart region.
        for w in sol.competition().windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        for x in sol.xbar() {
            assert!(model.value_raw(x, data.i0()) >= -1e-8);
        }
    }

    #[test]
    fn perturbing_the_competition_shows_in_the_rate_residual() {
        let (model, data) = stationary();
        let opts = SolveOptions {
            delta: Some(0.25),
            ..SolveOptions::default()
        };
        let mut sol = solve_constrained(&model, &data, 1.0, &opts).unwrap();
        let k = sol.competition.len() / 2;
        sol.competition[k] += 0.01;
        let report = residuals(&sol, &model, &data, &[]).unwrap();
        // dR/dI = -1, so the rate residual reproduces the perturbation.
        assert_relative_eq!(report.sup_rate, 0.01, epsilon = 1e-9);
    }

    #[test]
    fn oversized_interval_requests_halving() {
        let (model, data) = canonical();
        let restart = RestartState::initial(&data);
        let opts = SolveOptions {
            max_iter: 12,
            ..SolveOptions::default()
        };
        let err = fixed_point_iterate(&model, &data, &restart, 40.0, &opts).unwrap_err();
        assert!(matches!(
            err,
            Error::IntervalTooLong { .. } | Error::Inadmissible { .. }
        ));
    }

    #[test]
    fn solve_recovers_from_an_oversized_delta() {
        let (model, data) = canonical();
        let opts = SolveOptions {
            delta: Some(1e6),
            max_iter: 12,
            ..SolveOptions::default()
        };
        let sol = solve_constrained(&model, &data, 0.5, &opts).unwrap();
        assert!(sol.traces()[0].halvings > 0);
        let end = sol.times().len() - 1;
        let x_exact = 0.5 * (1.0 - (-2.0 * 0.5f64).exp());
        assert!((sol.xbar()[end][0] - x_exact).abs() <= 1e-5);
    }

    #[test]
    fn incompatible_initial_data_is_rejected() {
        let (model, _) = canonical();
        let (_, ic) = canonical_constants();
        // Peak shifted away from the rate zero set: R(0.3, 1) != 0.
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.3),
            0.0,
            1.0,
            ic,
        )
        .unwrap();
        let err = solve_constrained(&model, &data, 1.0, &SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RestartInconsistent { .. }));
    }
}
