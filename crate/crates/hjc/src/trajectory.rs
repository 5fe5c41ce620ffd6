//! Value function of the time-dependent problem `du/dt = |grad u|^2 + R(t, x)`
//! through its optimal-trajectory representation.
//!
//! The maximizing trajectory ending at `(t, x)` solves the Euler-Lagrange
//! two-point boundary value problem
//!
//! ```text
//! gamma''(s) = -2 grad R(s, gamma(s)),   gamma'(0) = -2 grad u0(gamma(0)),
//! gamma(t) = x,
//! ```
//!
//! discretized with central second differences on a uniform grid (the Neumann
//! condition enters through a ghost node, keeping the scheme second order) and
//! solved by damped Newton. The value is the action of that trajectory, the
//! gradient is `-gamma'(t)/2`, and the Hessian solves the linearized
//! (variational) system along the trajectory. A direct concave maximization of
//! the discretized action over polygonal paths provides an independent route
//! to the same value.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, BlockTridiag};
use crate::model::{GrowthModel, InitialData};

// ---------------------------------------------------------------------------
// Sampled time paths and the time-dependent rate
// ---------------------------------------------------------------------------

/// A sampled scalar function of time with an interpolation rule: piecewise
/// linear, or piecewise cubic Hermite when knot derivatives are stored.
#[derive(Debug, Clone)]
pub struct ScalarPath {
    knots: Vec<f64>,
    values: Vec<f64>,
    derivs: Option<Vec<f64>>,
}

impl ScalarPath {
    pub fn constant(value: f64, horizon: f64) -> Self {
        ScalarPath {
            knots: vec![0.0, horizon.max(0.0)],
            values: vec![value, value],
            derivs: None,
        }
    }

    pub fn linear(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::validate(&knots, &values)?;
        Ok(ScalarPath {
            knots,
            values,
            derivs: None,
        })
    }

    pub fn cubic_hermite(knots: Vec<f64>, values: Vec<f64>, derivs: Vec<f64>) -> Result<Self> {
        Self::validate(&knots, &values)?;
        if derivs.len() != knots.len() {
            return Err(Error::Config("one derivative per knot required".into()));
        }
        Ok(ScalarPath {
            knots,
            values,
            derivs: Some(derivs),
        })
    }

    fn validate(knots: &[f64], values: &[f64]) -> Result<()> {
        if knots.len() < 2 || knots.len() != values.len() {
            return Err(Error::Config(
                "a path needs at least two knots and matching values".into(),
            ));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("path knots must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn t_start(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interpolated value; clamped to the end values outside the knot span.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.knots[0] {
            return self.values[0];
        }
        if t >= self.t_end() {
            return *self.values.last().unwrap();
        }
        let j = match self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(j) => return self.values[j],
            Err(j) => j - 1,
        };
        let h = self.knots[j + 1] - self.knots[j];
        let s = (t - self.knots[j]) / h;
        match &self.derivs {
            None => self.values[j] * (1.0 - s) + self.values[j + 1] * s,
            Some(d) => {
                let (s2, s3) = (s * s, s * s * s);
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                h00 * self.values[j]
                    + h10 * h * d[j]
                    + h01 * self.values[j + 1]
                    + h11 * h * d[j + 1]
            }
        }
    }

    /// Concatenates `self` on `[t0, join]` with `tail` on `[join, ...]`.
    /// Both pieces must share the join knot and the interpolation kind.
    pub fn concat(&self, tail: &ScalarPath) -> Result<ScalarPath> {
        if (self.t_end() - tail.t_start()).abs() > 1e-12 * (1.0 + self.t_end().abs()) {
            return Err(Error::Config("paths do not join at a common knot".into()));
        }
        let mut knots = self.knots.clone();
        let mut values = self.values.clone();
        knots.extend_from_slice(&tail.knots[1..]);
        values.extend_from_slice(&tail.values[1..]);
        let derivs = match (&self.derivs, &tail.derivs) {
            (Some(a), Some(b)) => {
                let mut d = a.clone();
                d.extend_from_slice(&b[1..]);
                Some(d)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "cannot concatenate linear and Hermite paths".into(),
                ))
            }
        };
        Ok(ScalarPath {
            knots,
            values,
            derivs,
        })
    }
}

/// A growth rate frozen along a competition path: `R(t, x) = R(x, I(t))`.
///
/// The path values are clamped into `[0, I_max]` between knots so that tiny
/// interpolation overshoot near the ends of the admissible range cannot leave
/// the rate's domain.
#[derive(Debug, Clone)]
pub struct TimeDependentRate {
    base: GrowthModel,
    i_path: ScalarPath,
}

impl TimeDependentRate {
    pub fn new(base: GrowthModel, i_path: ScalarPath) -> Result<Self> {
        for &v in i_path.values() {
            base.check_competition(v)?;
        }
        Ok(TimeDependentRate { base, i_path })
    }

    /// Rate with a constant competition level on `[0, horizon]`.
    pub fn constant(base: GrowthModel, i: f64, horizon: f64) -> Result<Self> {
        base.check_competition(i)?;
        Ok(TimeDependentRate {
            base,
            i_path: ScalarPath::constant(i, horizon),
        })
    }

    pub fn base(&self) -> &GrowthModel {
        &self.base
    }

    pub fn i_path(&self) -> &ScalarPath {
        &self.i_path
    }

    pub fn horizon(&self) -> f64 {
        self.i_path.t_end()
    }

    pub fn i_at(&self, t: f64) -> f64 {
        self.i_path.eval(t).clamp(0.0, self.base.i_max())
    }

    pub fn value(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.base.value_raw(x, self.i_at(t))
    }

    pub fn grad(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.base.grad_raw(x, self.i_at(t))
    }

    pub fn hess(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        self.base.hess_raw(x, self.i_at(t))
    }

    fn check_span(&self, t: f64) -> Result<()> {
        if t > self.horizon() * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Config(format!(
                "rate defined on [0, {:.6}] but the trajectory needs [0, {t:.6}]",
                self.horizon()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// A discretized extremal: node times, positions and velocities, ending at
/// the queried `(t, x)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    points: Vec<DVector<f64>>,
    velocities: Vec<DVector<f64>>,
    residual: f64,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn velocities(&self) -> &[DVector<f64>] {
        &self.velocities
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn end_point(&self) -> &DVector<f64> {
        self.points.last().unwrap()
    }

    pub fn end_velocity(&self) -> &DVector<f64> {
        self.velocities.last().unwrap()
    }

    /// Sup norm of the discrete Euler-Lagrange residual achieved by the solve.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Recomputes the sup norm of the interior second-difference residual
    /// `gamma'' + 2 grad R` and the initial-slope residual.
    pub fn el_residual(&self, rate: &TimeDependentRate, data: &InitialData) -> f64 {
        let n = self.points.len() - 1;
        let h = self.times[1] - self.times[0];
        let mut worst: f64 = 0.0;
        for i in 1..n {
            let second =
                (&self.points[i + 1] - &self.points[i] * 2.0 + &self.points[i - 1]) / (h * h);
            let res = second + rate.grad(self.times[i], &self.points[i]) * 2.0;
            worst = worst.max(res.abs().max());
        }
        let bc = &self.velocities[0] + data.grad(&self.points[0]) * 2.0;
        worst.max(bc.abs().max())
    }

    /// Writes the trajectory as CSV rows `s, gamma_0..d, vel_0..d`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        let d = self.points[0].len();
        write!(out, "s")?;
        for k in 0..d {
            write!(out, ",gamma_{k}")?;
        }
        for k in 0..d {
            write!(out, ",vel_{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.times.len() {
            write!(out, "{:.17e}", self.times[i])?;
            for k in 0..d {
                write!(out, ",{:.17e}", self.points[i][k])?;
            }
            for k in 0..d {
                write!(out, ",{:.17e}", self.velocities[i][k])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Euler-Lagrange solve
// ---------------------------------------------------------------------------

/// Solves the Euler-Lagrange problem for the trajectory ending at `(t, x)`
/// on a uniform grid with `n_nodes` sub-intervals, starting Newton from the
/// segment joining the initial maximizer to `x`.
pub fn solve_euler_lagrange(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    n_nodes: usize,
    tol: f64,
) -> Result<Trajectory> {
    if n_nodes < 8 {
        return Err(Error::Config(format!(
            "the boundary value solve needs at least 8 sub-intervals, got {n_nodes}"
        )));
    }
    let init = affine_init(data.xbar0(), x, n_nodes);
    solve_el_with_init(rate, data, t, x, n_nodes, tol, init)
}

/// Same as [`solve_euler_lagrange`] but starting Newton from a caller-supplied
/// path of `n_nodes + 1` points (used to probe uniqueness and to warm-start
/// refined grids).
pub fn solve_euler_lagrange_with_init(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    n_nodes: usize,
    tol: f64,
    init: Vec<DVector<f64>>,
) -> Result<Trajectory> {
    if init.len() != n_nodes + 1 {
        return Err(Error::Config(format!(
            "initial guess has {} points, expected {}",
            init.len(),
            n_nodes + 1
        )));
    }
    solve_el_with_init(rate, data, t, x, n_nodes, tol, init)
}

fn affine_init(from: &DVector<f64>, to: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..=n)
        .map(|i| {
            let s = i as f64 / n as f64;
            from * (1.0 - s) + to * s
        })
        .collect()
}

fn solve_el_with_init(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    n: usize,
    tol: f64,
    mut gamma: Vec<DVector<f64>>,
) -> Result<Trajectory> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("trajectory horizon must be positive, got {t}")));
    }
    rate.check_span(t)?;
    let d = x.len();
    if data.dim() != d || rate.base().dim() != d {
        return Err(Error::Config("dimension mismatch between rate, data and query".into()));
    }
    let h = t / n as f64;
    let times: Vec<f64> = (0..=n).map(|i| t * i as f64 / n as f64).collect();
    gamma[n] = x.clone();

    let residual = |g: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let mut r = Vec::with_capacity(n);
        // Ghost-node form of the Neumann-type condition at s = 0.
        r.push(
            (&g[1] - &g[0]) * (2.0 / (h * h))
                + data.grad(&g[0]) * (4.0 / h)
                + rate.grad(times[0], &g[0]) * 2.0,
        );
        for i in 1..n {
            r.push(
                (&g[i + 1] - &g[i] * 2.0 + &g[i - 1]) * (1.0 / (h * h))
                    + rate.grad(times[i], &g[i]) * 2.0,
            );
        }
        r
    };
    let sup = |r: &[DVector<f64>]| r.iter().map(|v| v.abs().max()).fold(0.0_f64, f64::max);

    let mut res = residual(&gamma);
    let mut res_norm = sup(&res);
    let gamma_scale = gamma.iter().map(|g| g.abs().max()).fold(1.0_f64, f64::max);
    let noise_floor = 64.0 * f64::EPSILON * gamma_scale / (h * h);
    let tol_eff = tol.max(noise_floor);

    let mut iterations = 0;
    while res_norm > tol_eff {
        if iterations >= 50 {
            return Err(Error::NewtonStalled {
                iterations,
                residual: res_norm,
            });
        }
        iterations += 1;

        let eye = DMatrix::<f64>::identity(d, d);
        let mut diag = Vec::with_capacity(n);
        let mut lower = Vec::with_capacity(n - 1);
        let mut upper = Vec::with_capacity(n - 1);
        diag.push(
            &eye * (-2.0 / (h * h))
                + data.hess(&gamma[0]) * (4.0 / h)
                + rate.hess(times[0], &gamma[0]) * 2.0,
        );
        if n > 1 {
            upper.push(&eye * (2.0 / (h * h)));
        }
        for i in 1..n {
            lower.push(&eye * (1.0 / (h * h)));
            diag.push(&eye * (-2.0 / (h * h)) + rate.hess(times[i], &gamma[i]) * 2.0);
            if i + 1 < n {
                upper.push(&eye * (1.0 / (h * h)));
            }
        }
        let rhs: Vec<DMatrix<f64>> = res
            .iter()
            .map(|r| {
                let mut m = DMatrix::zeros(d, 1);
                m.column_mut(0).copy_from(&(-r));
                m
            })
            .collect();
        let step = BlockTridiag { lower, diag, upper }.solve(rhs)?;

        // Damped update: insist on residual decrease.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut candidate = gamma.clone();
            for i in 0..n {
                candidate[i] += step[i].column(0) * alpha;
            }
            let cand_res = residual(&candidate);
            let cand_norm = sup(&cand_res);
            if cand_norm < res_norm || cand_norm <= tol_eff {
                gamma = candidate;
                res = cand_res;
                res_norm = cand_norm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonStalled {
                iterations,
                residual: res_norm,
            });
        }
    }

    // Velocities: the boundary relation at s = 0, central differences inside,
    // and the integral of the acceleration at s = t (clean O(h^2) expansions).
    let mut velocities = Vec::with_capacity(n + 1);
    velocities.push(data.grad(&gamma[0]) * -2.0);
    for i in 1..n {
        velocities.push((&gamma[i + 1] - &gamma[i - 1]) / (2.0 * h));
    }
    let weights = trapezoid_weights(&times);
    let mut accel_integral = DVector::zeros(d);
    for i in 0..=n {
        accel_integral += rate.grad(times[i], &gamma[i]) * weights[i];
    }
    velocities.push(&velocities[0] - accel_integral * 2.0);

    Ok(Trajectory {
        times,
        points: gamma,
        velocities,
        residual: res_norm,
    })
}

fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = times[i + 1] - times[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

// ---------------------------------------------------------------------------
// Value, gradient, Hessian
// ---------------------------------------------------------------------------

/// Action of a trajectory: `u0(gamma(0)) + int(-|gamma'|^2/4 + R(s, gamma))`,
/// by the trapezoid rule on the trajectory grid. Equals `u(t, x)` when the
/// trajectory is the maximizer.
pub fn value_from_trajectory(
    traj: &Trajectory,
    rate: &TimeDependentRate,
    data: &InitialData,
) -> f64 {
    let w = trapezoid_weights(traj.times());
    let mut integral = 0.0;
    for i in 0..traj.times.len() {
        let v = &traj.velocities[i];
        integral += w[i] * (-0.25 * v.norm_squared() + rate.value(traj.times[i], &traj.points[i]));
    }
    data.value(&traj.points[0]) + integral
}

/// `grad u(t, x) = -gamma'(t) / 2`.
pub fn gradient_from_trajectory(traj: &Trajectory) -> DVector<f64> {
    traj.end_velocity() * -0.5
}

/// Sensitivity of the discrete trajectory to its endpoint: solves the
/// variational system along `traj` and returns `Gamma(s_i) = d gamma(s_i)/dx`
/// at every node (`Gamma(t) = Id`).
pub fn solve_variational(
    rate: &TimeDependentRate,
    data: &InitialData,
    traj: &Trajectory,
) -> Result<Vec<DMatrix<f64>>> {
    let n = traj.points.len() - 1;
    let d = traj.points[0].len();
    let h = traj.times[1] - traj.times[0];
    let eye = DMatrix::<f64>::identity(d, d);

    let mut diag = Vec::with_capacity(n);
    let mut lower = Vec::with_capacity(n - 1);
    let mut upper = Vec::with_capacity(n - 1);
    let mut rhs: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(d, d)).collect();
    diag.push(
        &eye * (-2.0 / (h * h))
            + data.hess(&traj.points[0]) * (4.0 / h)
            + rate.hess(traj.times[0], &traj.points[0]) * 2.0,
    );
    if n > 1 {
        upper.push(&eye * (2.0 / (h * h)));
    }
    for i in 1..n {
        lower.push(&eye * (1.0 / (h * h)));
        diag.push(&eye * (-2.0 / (h * h)) + rate.hess(traj.times[i], &traj.points[i]) * 2.0);
        if i + 1 < n {
            upper.push(&eye * (1.0 / (h * h)));
        }
    }
    // The endpoint block couples the last interior row to Gamma(t) = Id.
    let end_coupling = if n > 1 { 1.0 / (h * h) } else { 2.0 / (h * h) };
    rhs[n - 1] = &eye * (-end_coupling);

    let mut cols = BlockTridiag { lower, diag, upper }.solve(rhs)?;
    cols.push(eye);
    Ok(cols)
}

/// `D^2 u(t, x)` from the variational system along a solved trajectory:
/// `-Gamma'(t) / 2`, with the end slope recovered from the integral of the
/// linearized acceleration. The result is symmetrized; `tol` guards the
/// linear solve through spot checks of its residual.
pub fn hessian_at(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    traj: &Trajectory,
    tol: f64,
) -> Result<DMatrix<f64>> {
    if (traj.end_time() - t).abs() > 1e-9 * (1.0 + t.abs())
        || (traj.end_point() - x).abs().max() > 1e-9 * (1.0 + x.abs().max())
    {
        return Err(Error::Config(
            "trajectory endpoint does not match the queried (t, x)".into(),
        ));
    }
    let gammas = solve_variational(rate, data, traj)?;
    let n = traj.points.len() - 1;
    let d = x.len();
    let h = traj.times[1] - traj.times[0];

    // Spot-check the variational residual on a few rows.
    let floor = 64.0 * f64::EPSILON / (h * h);
    let spot_tol = tol.max(floor) * 10.0;
    let spots: Vec<usize> = [1, n / 2, n.saturating_sub(1)]
        .into_iter()
        .filter(|&i| i >= 1 && i < n)
        .collect();
    for i in spots {
        let res = (&gammas[i + 1] - &gammas[i] * 2.0 + &gammas[i - 1]) / (h * h)
            + rate.hess(traj.times[i], &traj.points[i]) * &gammas[i] * 2.0;
        if res.abs().max() > spot_tol * gammas[i].abs().max().max(1.0) {
            return Err(Error::DegenerateHessian {
                detail: format!(
                    "variational solve residual {:.3e} exceeds tolerance at node {i}",
                    res.abs().max()
                ),
            });
        }
    }

    let weights = trapezoid_weights(traj.times());
    let mut slope = data.hess(&traj.points[0]) * &gammas[0] * -2.0;
    let mut integral = DMatrix::zeros(d, d);
    for i in 0..=n {
        integral += rate.hess(traj.times[i], &traj.points[i]) * &gammas[i] * weights[i];
    }
    slope -= integral * 2.0;

    let mut hess = slope * -0.5;
    symmetrize(&mut hess);
    Ok(hess)
}

// ---------------------------------------------------------------------------
// Direct maximization of the action (dynamic programming oracle)
// ---------------------------------------------------------------------------

/// Maximizes the discretized action over polygonal paths ending at `x`,
/// by Newton ascent on the node positions. Strict concavity of the action
/// makes the maximizer unique; this is an independent route to the value
/// computed by [`value_from_trajectory`]. `n_nodes = 1` collapses to the
/// one-shot Hopf-Lax-type bound.
pub fn value_by_direct_maximization(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    n_nodes: usize,
) -> Result<f64> {
    if t == 0.0 {
        return Ok(data.value(x));
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("horizon must be nonnegative, got {t}")));
    }
    rate.check_span(t)?;
    if n_nodes == 0 {
        return Err(Error::Config("direct maximization needs at least one interval".into()));
    }
    let n = n_nodes;
    let d = x.len();
    let h = t / n as f64;
    let times: Vec<f64> = (0..=n).map(|i| t * i as f64 / n as f64).collect();
    let mut g = affine_init(data.xbar0(), x, n);
    g[n] = x.clone();

    let objective = |g: &[DVector<f64>]| -> f64 {
        let mut kinetic = 0.0;
        for i in 0..n {
            kinetic += (&g[i + 1] - &g[i]).norm_squared() / (4.0 * h);
        }
        let mut reaction = 0.0;
        for (i, ti) in times.iter().enumerate() {
            let w = if i == 0 || i == n { 0.5 * h } else { h };
            reaction += w * rate.value(*ti, &g[i]);
        }
        data.value(&g[0]) - kinetic + reaction
    };

    let gradient = |g: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(n);
        out.push(
            data.grad(&g[0]) + (&g[1] - &g[0]) / (2.0 * h) + rate.grad(times[0], &g[0]) * (0.5 * h),
        );
        for i in 1..n {
            out.push(
                (&g[i + 1] - &g[i] * 2.0 + &g[i - 1]) / (2.0 * h)
                    + rate.grad(times[i], &g[i]) * h,
            );
        }
        out
    };
    let sup = |r: &[DVector<f64>]| r.iter().map(|v| v.abs().max()).fold(0.0_f64, f64::max);

    let mut grad = gradient(&g);
    let mut grad_norm = sup(&grad);
    let noise_floor = 64.0 * f64::EPSILON * (1.0 + x.abs().max()) / h;
    let tol = 1e-11_f64.max(noise_floor);
    let mut value = objective(&g);

    let mut iterations = 0;
    while grad_norm > tol {
        if iterations >= 100 {
            return Err(Error::NewtonStalled {
                iterations,
                residual: grad_norm,
            });
        }
        iterations += 1;

        let eye = DMatrix::<f64>::identity(d, d);
        let mut diag = Vec::with_capacity(n);
        let mut lower = Vec::with_capacity(n.saturating_sub(1));
        let mut upper = Vec::with_capacity(n.saturating_sub(1));
        diag.push(
            data.hess(&g[0]) - &eye * (1.0 / (2.0 * h))
                + rate.hess(times[0], &g[0]) * (0.5 * h),
        );
        if n > 1 {
            upper.push(&eye * (1.0 / (2.0 * h)));
        }
        for i in 1..n {
            lower.push(&eye * (1.0 / (2.0 * h)));
            diag.push(&eye * (-1.0 / h) + rate.hess(times[i], &g[i]) * h);
            if i + 1 < n {
                upper.push(&eye * (1.0 / (2.0 * h)));
            }
        }
        let rhs: Vec<DMatrix<f64>> = grad
            .iter()
            .map(|r| {
                let mut m = DMatrix::zeros(d, 1);
                m.column_mut(0).copy_from(&(-r));
                m
            })
            .collect();
        let step = BlockTridiag { lower, diag, upper }.solve(rhs)?;

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut candidate = g.clone();
            for i in 0..n {
                candidate[i] += step[i].column(0) * alpha;
            }
            let cand_value = objective(&candidate);
            let cand_grad = gradient(&candidate);
            let cand_norm = sup(&cand_grad);
            if cand_value > value || cand_norm < grad_norm {
                g = candidate;
                value = cand_value;
                grad = cand_grad;
                grad_norm = cand_norm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonStalled {
                iterations,
                residual: grad_norm,
            });
        }
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Point evaluation with optional Richardson refinement
// ---------------------------------------------------------------------------

/// Value, gradient and Hessian of `u` at one `(t, x)`.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Grid policy for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Base grid density per unit time.
    pub nodes_per_unit: f64,
    /// Never use fewer sub-intervals than this.
    pub min_nodes: usize,
    /// Newton tolerance on the Euler-Lagrange residual (sup norm).
    pub tol: f64,
    /// Solve on the base grid and its refinement and extrapolate the
    /// second-order error away.
    pub richardson: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            nodes_per_unit: 64.0,
            min_nodes: 64,
            tol: 1e-10,
            richardson: true,
        }
    }
}

impl EvalOptions {
    fn node_count(&self, t: f64) -> usize {
        let target = (t * self.nodes_per_unit).ceil().max(self.min_nodes as f64) as usize;
        target.max(8)
    }
}

/// Evaluates `u`, `grad u` and `D^2 u` at `(t, x)` through the trajectory
/// representation. `t = 0` returns the initial data directly.
pub fn evaluate(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    opts: &EvalOptions,
) -> Result<PointEval> {
    if t.abs() <= 1e-13 {
        return Ok(PointEval {
            value: data.value(x),
            gradient: data.grad(x),
            hessian: data.hess(x),
        });
    }
    let n = opts.node_count(t);
    let coarse = solve_euler_lagrange(rate, data, t, x, n, opts.tol)?;
    let coarse_eval = eval_from_traj(rate, data, t, x, &coarse, opts.tol)?;
    if !opts.richardson {
        return Ok(coarse_eval);
    }

    // Refined grid, warm-started from the coarse solution.
    let mut init = Vec::with_capacity(2 * n + 1);
    for i in 0..n {
        init.push(coarse.points()[i].clone());
        init.push((&coarse.points()[i] + &coarse.points()[i + 1]) * 0.5);
    }
    init.push(coarse.points()[n].clone());
    let fine = solve_euler_lagrange_with_init(rate, data, t, x, 2 * n, opts.tol, init)?;
    let fine_eval = eval_from_traj(rate, data, t, x, &fine, opts.tol)?;

    Ok(PointEval {
        value: (4.0 * fine_eval.value - coarse_eval.value) / 3.0,
        gradient: (fine_eval.gradient * 4.0 - coarse_eval.gradient) / 3.0,
        hessian: (fine_eval.hessian * 4.0 - coarse_eval.hessian) / 3.0,
    })
}

fn eval_from_traj(
    rate: &TimeDependentRate,
    data: &InitialData,
    t: f64,
    x: &DVector<f64>,
    traj: &Trajectory,
    tol: f64,
) -> Result<PointEval> {
    Ok(PointEval {
        value: value_from_trajectory(traj, rate, data),
        gradient: gradient_from_trajectory(traj),
        hessian: hessian_at(rate, data, t, x, traj, tol)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GrowthConstants, GrowthModel, InitialConstants, InitialData};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn growth_constants() -> GrowthConstants {
        GrowthConstants {
            k0_bar: 0.25,
            k1_bar: 1.0,
            k1_under: 1.0,
            k2_bar: 1.0,
            k2_under: 1.0,
            k3: 0.0,
            k4: 0.0,
        }
    }

    fn initial_constants() -> InitialConstants {
        InitialConstants {
            l0_under: 1.0,
            l0_bar: 1.0,
            l1_under: 0.5,
            l1_bar: 0.5,
            l2: 1.0,
            l3: 0.0,
        }
    }

    /// R(x) = -x^2 under the constant path I = i_shift, with u0 = -x^2/2.
    fn pure_quadratic_rate() -> (TimeDependentRate, InitialData) {
        let model = GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            1.0,
            None,
            growth_constants(),
        )
        .unwrap();
        let rate = TimeDependentRate::constant(model, 1.0, 10.0).unwrap();
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            0.0,
            1.0,
            initial_constants(),
        )
        .unwrap();
        (rate, data)
    }

    #[test]
    fn exponential_extremal_matches_closed_form() {
        // gamma'' = 4 gamma with gamma'(0) = 2 gamma(0), gamma(1) = 1 has the
        // solution e^{2(s-1)}.
        let (rate, data) = pure_quadratic_rate();
        let traj =
            solve_euler_lagrange(&rate, &data, 1.0, &DVector::from_element(1, 1.0), 1600, 1e-10)
                .unwrap();
        let mut worst: f64 = 0.0;
        for (i, &s) in traj.times().iter().enumerate() {
            worst = worst.max((traj.points()[i][0] - (2.0 * (s - 1.0)).exp()).abs());
        }
        assert!(worst < 1e-5, "sup deviation {worst}");
        assert_relative_eq!(traj.end_velocity()[0], 2.0, epsilon = 1e-5);
        // Boundary condition holds exactly by construction.
        let bc = traj.velocities()[0][0] - 2.0 * traj.points()[0][0];
        assert!(bc.abs() < 1e-12);
        assert!(traj.el_residual(&rate, &data) <= 1e-9);
    }

    #[test]
    fn stationary_query_returns_zero_trajectory() {
        let (rate, data) = pure_quadratic_rate();
        let traj =
            solve_euler_lagrange(&rate, &data, 2.5, &DVector::zeros(1), 64, 1e-10).unwrap();
        for p in traj.points() {
            assert!(p[0].abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_extremal_at_rate_peak() {
        // With R peaked at 1/2 and u0 peaked there too, gamma = 1/2 is the
        // exact extremal for x = 1/2.
        let model = GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, 1.0),
            1.0,
            None,
            growth_constants(),
        )
        .unwrap();
        let rate = TimeDependentRate::constant(model, 1.0, 1.0).unwrap();
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
            0.0,
            1.0,
            initial_constants(),
        )
        .unwrap();
        let traj =
            solve_euler_lagrange(&rate, &data, 0.7, &DVector::from_element(1, 0.5), 32, 1e-12)
                .unwrap();
        for p in traj.points() {
            assert_relative_eq!(p[0], 0.5, epsilon = 1e-12);
        }
        // Zero velocity means the value reduces to u0(c) + t R(c).
        let v = value_from_trajectory(&traj, &rate, &data);
        assert_relative_eq!(v, 0.7 * 0.25, epsilon = 1e-12);
    }

    #[test]
    fn value_and_gradient_match_closed_form() {
        let (rate, data) = pure_quadratic_rate();
        let x = DVector::from_element(1, 1.0);
        let traj = solve_euler_lagrange(&rate, &data, 1.0, &x, 2400, 1e-10).unwrap();
        // The profile -x^2/2 is invariant for this rate, so u(1, 1) = -1/2.
        assert_relative_eq!(value_from_trajectory(&traj, &rate, &data), -0.5, epsilon = 1e-6);
        assert_relative_eq!(gradient_from_trajectory(&traj)[0], -1.0, epsilon = 1e-5);
        // At the maximizer the value stays pinned at zero.
        let traj0 = solve_euler_lagrange(&rate, &data, 1.7, &DVector::zeros(1), 64, 1e-10).unwrap();
        assert!(value_from_trajectory(&traj0, &rate, &data).abs() <= 1e-12);
    }

    #[test]
    fn gradient_is_half_the_end_velocity() {
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            points: vec![DVector::zeros(2), DVector::zeros(2)],
            velocities: vec![DVector::zeros(2), DVector::from_vec(vec![4.0, -2.0])],
            residual: 0.0,
        };
        let g = gradient_from_trajectory(&traj);
        assert_relative_eq!(g[0], -2.0);
        assert_relative_eq!(g[1], 1.0);
    }

    #[test]
    fn hessian_constant_on_pinched_instance() {
        let (rate, data) = pure_quadratic_rate();
        for &(t, x) in &[(0.3, 0.0), (1.0, 0.7), (2.0, -1.3)] {
            let xv = DVector::from_element(1, x);
            let traj = solve_euler_lagrange(&rate, &data, t, &xv, 2000, 1e-10).unwrap();
            let h = hessian_at(&rate, &data, t, &xv, &traj, 1e-10).unwrap();
            assert_relative_eq!(h[(0, 0)], -1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn evaluate_shortcut_at_time_zero() {
        let (rate, data) = pure_quadratic_rate();
        let x = DVector::from_element(1, 0.4);
        let e = evaluate(&rate, &data, 0.0, &x, &EvalOptions::default()).unwrap();
        assert_relative_eq!(e.value, data.value(&x));
        assert_relative_eq!(e.gradient[0], data.grad(&x)[0]);
        assert_relative_eq!(e.hessian[(0, 0)], -1.0);
    }

    #[test]
    fn hessian_approaches_initial_curvature_for_small_times() {
        // A0 = 0.8 (away from the pinched case) so the limit is visible.
        let model = GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            1.0,
            None,
            growth_constants(),
        )
        .unwrap();
        let rate = TimeDependentRate::constant(model, 1.0, 1.0).unwrap();
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 0.8),
            DVector::zeros(1),
            0.0,
            1.0,
            initial_constants(),
        )
        .unwrap();
        let x = DVector::from_element(1, 0.3);
        let mut prev_gap = f64::INFINITY;
        for &t in &[0.04, 0.02, 0.01] {
            let traj = solve_euler_lagrange(&rate, &data, t, &x, 64, 1e-10).unwrap();
            let h = hessian_at(&rate, &data, t, &x, &traj, 1e-10).unwrap();
            let gap = (h[(0, 0)] + 0.8).abs();
            assert!(gap < prev_gap, "Hessian should approach D^2 u0");
            prev_gap = gap;
        }
        assert!(prev_gap < 0.03);
    }

    #[test]
    fn direct_maximization_agrees_with_trajectory_value() {
        let (rate, data) = pure_quadratic_rate();
        let x = DVector::from_element(1, 1.0);
        let v = value_by_direct_maximization(&rate, &data, 1.0, &x, 128).unwrap();
        assert_relative_eq!(v, -0.5, epsilon = 1e-4);
        // Stationary point stays at zero.
        let v0 = value_by_direct_maximization(&rate, &data, 1.3, &DVector::zeros(1), 64).unwrap();
        assert!(v0.abs() <= 1e-12);
    }

    #[test]
    fn direct_maximization_is_cauchy_in_the_node_count() {
        let (rate, data) = pure_quadratic_rate();
        let x = DVector::from_element(1, 1.0);
        let values: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| value_by_direct_maximization(&rate, &data, 1.0, &x, n).unwrap())
            .collect();
        let mut gaps = Vec::new();
        for w in values.windows(2) {
            gaps.push((w[1] - w[0]).abs());
        }
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "gaps {gaps:?}");
    }

    #[test]
    fn single_interval_maximization_is_the_hopf_lax_bound() {
        let (rate, data) = pure_quadratic_rate();
        let x = DVector::from_element(1, 1.0);
        let t = 0.8;
        let v = value_by_direct_maximization(&rate, &data, t, &x, 1).unwrap();
        // Brute-force scan over gamma(0) as an independent oracle.
        let mut best = f64::NEG_INFINITY;
        for k in 0..=400_000 {
            let g0 = -2.0 + 4.0 * k as f64 / 400_000.0;
            let g0v = DVector::from_element(1, g0);
            let cand = data.value(&g0v) - (1.0 - g0) * (1.0 - g0) / (4.0 * t)
                + 0.5 * t * (rate.value(0.0, &g0v) + rate.value(t, &x));
            best = best.max(cand);
        }
        assert_relative_eq!(v, best, epsilon = 1e-8);
    }

    /// A genuinely nonquadratic concave rate for Newton robustness tests.
    struct QuarticRate;

    impl crate::model::GrowthRate for QuarticRate {
        fn value(&self, x: &DVector<f64>, i: f64) -> f64 {
            -x[0].powi(2) - 0.1 * x[0].powi(4) + 1.0 - i
        }
        fn grad_x(&self, x: &DVector<f64>, _i: f64) -> DVector<f64> {
            DVector::from_element(1, -2.0 * x[0] - 0.4 * x[0].powi(3))
        }
        fn hess_x(&self, x: &DVector<f64>, _i: f64) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -2.0 - 1.2 * x[0] * x[0])
        }
        fn dr_di(&self, _x: &DVector<f64>, _i: f64) -> f64 {
            -1.0
        }
    }

    fn quartic_rate() -> (TimeDependentRate, InitialData) {
        let model = GrowthModel::custom(
            1,
            std::sync::Arc::new(QuarticRate),
            1.0,
            growth_constants(),
        )
        .unwrap();
        let rate = TimeDependentRate::constant(model, 1.0, 5.0).unwrap();
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            0.0,
            1.0,
            initial_constants(),
        )
        .unwrap();
        (rate, data)
    }

    #[test]
    fn solution_is_independent_of_the_newton_seed() {
        let (rate, data) = quartic_rate();
        let x = DVector::from_element(1, 1.2);
        let tol = 1e-11;
        let n = 256;
        let affine = solve_euler_lagrange(&rate, &data, 1.5, &x, n, tol).unwrap();
        let constant_init = vec![x.clone(); n + 1];
        let from_constant =
            solve_euler_lagrange_with_init(&rate, &data, 1.5, &x, n, tol, constant_init).unwrap();
        let mut dist: f64 = 0.0;
        for i in 0..=n {
            dist = dist.max((&affine.points()[i] - &from_constant.points()[i]).abs().max());
        }
        assert!(dist <= 10.0 * tol, "distance {dist}");
    }

    #[test]
    fn nonquadratic_dpp_and_el_routes_agree() {
        let (rate, data) = quartic_rate();
        let x = DVector::from_element(1, 0.9);
        let traj = solve_euler_lagrange(&rate, &data, 1.2, &x, 512, 1e-10).unwrap();
        let via_el = value_from_trajectory(&traj, &rate, &data);
        let via_dpp = value_by_direct_maximization(&rate, &data, 1.2, &x, 512).unwrap();
        assert_relative_eq!(via_el, via_dpp, epsilon = 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences_of_the_value() {
        let (rate, data) = quartic_rate();
        let opts = EvalOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..12 {
            let t = rng.random_range(0.2..2.0);
            let x = DVector::from_element(1, rng.random_range(-1.5..1.5));
            let e = evaluate(&rate, &data, t, &x, &opts).unwrap();
            let h = 1e-4 * (1.0 + x.abs().max());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[0] += h;
            xm[0] -= h;
            let vp = evaluate(&rate, &data, t, &xp, &opts).unwrap().value;
            let vm = evaluate(&rate, &data, t, &xm, &opts).unwrap().value;
            let fd = (vp - vm) / (2.0 * h);
            let scale = 1.0 + e.gradient.abs().max();
            assert!(
                (fd - e.gradient[0]).abs() / scale <= 1e-4,
                "fd {fd} vs grad {}",
                e.gradient[0]
            );
        }
    }

    #[test]
    fn hessian_matches_second_differences_of_the_value() {
        let (rate, data) = quartic_rate();
        let opts = EvalOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..6 {
            let t = rng.random_range(0.3..1.5);
            let x = DVector::from_element(1, rng.random_range(-1.0..1.0));
            let e = evaluate(&rate, &data, t, &x, &opts).unwrap();
            let h = 2e-3;
            let at = |offset: f64| {
                let mut y = x.clone();
                y[0] += offset;
                evaluate(&rate, &data, t, &y, &opts).unwrap().value
            };
            let fd = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
            assert!(
                (fd - e.hessian[(0, 0)]).abs() <= 1e-3,
                "fd {fd} vs hess {}",
                e.hessian[(0, 0)]
            );
        }
    }

    #[test]
    fn hessian_respects_the_curvature_band() {
        // Band: [-max(2 L1_under, sqrt(K1_under)), -min(2 L1_bar, sqrt(K1_bar))].
        let (rate, data) = pure_quadratic_rate();
        let opts = EvalOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let t = rng.random_range(0.1..3.0);
            let x = DVector::from_element(1, rng.random_range(-2.0..2.0));
            let e = evaluate(&rate, &data, t, &x, &opts).unwrap();
            let h = e.hessian[(0, 0)];
            assert!(h >= -1.0 - 1e-6 && h <= -1.0 + 1e-6);
        }
    }

    #[test]
    fn value_grows_at_most_quadratically() {
        let (rate, data) = pure_quadratic_rate();
        let opts = EvalOptions {
            richardson: false,
            ..EvalOptions::default()
        };
        let mut fitted: f64 = 0.0;
        for &t in &[0.5, 1.0, 2.0] {
            for k in -6..=6 {
                let x = DVector::from_element(1, k as f64 / 2.0);
                let v = evaluate(&rate, &data, t, &x, &opts).unwrap().value;
                fitted = fitted.max(v.abs() / (1.0 + x.norm_squared()));
            }
        }
        assert!(fitted < 10.0, "quadratic growth constant {fitted}");
    }

    #[test]
    fn concavity_inequality_holds() {
        // sigma u(x) + (1-sigma) u(y) + lambda sigma (1-sigma) |x-y|^2
        // <= u(sigma x + (1-sigma) y), lambda = min(L1_bar, sqrt(K1_bar)/2).
        let (rate, data) = pure_quadratic_rate();
        let opts = EvalOptions::default();
        let lambda = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let t = rng.random_range(0.2..2.0);
            let sigma = rng.random_range(0.0..1.0);
            let x = DVector::from_element(1, rng.random_range(-2.0..2.0));
            let y = DVector::from_element(1, rng.random_range(-2.0..2.0));
            let mid = &x * sigma + &y * (1.0 - sigma);
            let ux = evaluate(&rate, &data, t, &x, &opts).unwrap().value;
            let uy = evaluate(&rate, &data, t, &y, &opts).unwrap().value;
            let um = evaluate(&rate, &data, t, &mid, &opts).unwrap().value;
            let lhs = sigma * ux + (1.0 - sigma) * uy
                + lambda * sigma * (1.0 - sigma) * (&x - &y).norm_squared();
            assert!(lhs <= um + 1e-8, "lhs {lhs} vs um {um}");
        }
    }

    #[test]
    fn rejects_queries_beyond_the_rate_horizon() {
        let (rate, data) = pure_quadratic_rate();
        let err = solve_euler_lagrange(
            &rate,
            &data,
            rate.horizon() + 1.0,
            &DVector::zeros(1),
            64,
            1e-10,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scalar_path_hermite_reproduces_cubics() {
        // A Hermite path through exact samples of t^3 - t is exact.
        let f = |t: f64| t.powi(3) - t;
        let df = |t: f64| 3.0 * t * t - 1.0;
        let knots: Vec<f64> = (0..=4).map(|i| i as f64 * 0.5).collect();
        let path = ScalarPath::cubic_hermite(
            knots.clone(),
            knots.iter().map(|&t| f(t)).collect(),
            knots.iter().map(|&t| df(t)).collect(),
        )
        .unwrap();
        for k in 0..=40 {
            let t = 2.0 * k as f64 / 40.0;
            assert_relative_eq!(path.eval(t), f(t), epsilon = 1e-13);
        }
    }
}
