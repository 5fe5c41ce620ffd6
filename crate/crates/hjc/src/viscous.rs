//! Finite-difference simulator for the small-diffusion selection-mutation
//! model
//!
//! ```text
//! dn/dt - eps lap n = (n / eps) R(x, I_eps(t)),   I_eps = int psi n dx,
//! ```
//!
//! and its logarithmic form `du/dt = eps lap u + |grad u|^2 + R(x, I_eps)`
//! obtained by writing `n = exp(u / eps)`. As `eps` shrinks the density
//! concentrates at the constrained maximizer, `I_eps` approaches the
//! multiplier `I`, and `eps log n` flattens against the constraint
//! `max u = 0`; the diagnostics here quantify all three effects against a
//! reference [`ConstrainedSolution`].
//!
//! The density form steps `log n` (one exponential per neighbor difference
//! keeps the update well conditioned and the density structurally positive),
//! the logarithmic form steps `u` with central differences; both use explicit
//! Euler in time and homogeneous Neumann conditions on a truncated box.

use std::sync::Arc;

use nalgebra::DVector;

use crate::constrained::ConstrainedSolution;
use crate::error::{Error, Result};
use crate::model::{GrowthModel, InitialData};

/// Weight function `psi` for the competition integral.
pub type Weight = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Which form of the model is stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimForm {
    /// Step the density `n` (internally in logarithmic variables).
    Density,
    /// Step `u = eps log n` directly.
    HopfCole,
}

/// Uniform tensor grid in one or two dimensions.
#[derive(Debug, Clone)]
pub struct Grid {
    lo: Vec<f64>,
    counts: Vec<usize>,
    h: f64,
}

impl Grid {
    /// Covers `[lo, hi]` with spacing `h` per axis (the upper bound is pushed
    /// out to the next multiple of `h` when it is not aligned).
    pub fn uniform(lo: Vec<f64>, hi: Vec<f64>, h: f64) -> Result<Self> {
        if lo.is_empty() || lo.len() > 2 || lo.len() != hi.len() {
            return Err(Error::Config(
                "grids are one- or two-dimensional with matching bounds".into(),
            ));
        }
        if !(h > 0.0) {
            return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
        }
        let mut counts = Vec::with_capacity(lo.len());
        for k in 0..lo.len() {
            if !(lo[k] < hi[k]) {
                return Err(Error::Config("grid bounds must satisfy lo < hi".into()));
            }
            let n = ((hi[k] - lo[k]) / h - 1e-9).ceil() as usize + 1;
            if n < 3 {
                return Err(Error::Config("each axis needs at least three grid points".into()));
            }
            counts.push(n);
        }
        Ok(Grid { lo, counts, h })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinates of the flattened index (row-major, first axis fastest).
    pub fn point(&self, idx: usize) -> DVector<f64> {
        match self.dim() {
            1 => DVector::from_element(1, self.lo[0] + idx as f64 * self.h),
            _ => {
                let nx = self.counts[0];
                let (i, j) = (idx % nx, idx / nx);
                DVector::from_vec(vec![
                    self.lo[0] + i as f64 * self.h,
                    self.lo[1] + j as f64 * self.h,
                ])
            }
        }
    }

    /// Trapezoid quadrature weights (tensor product).
    fn quad_weights(&self) -> Vec<f64> {
        let axis = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| if i == 0 || i + 1 == n { 0.5 * self.h } else { self.h })
                .collect()
        };
        match self.dim() {
            1 => axis(self.counts[0]),
            _ => {
                let wx = axis(self.counts[0]);
                let wy = axis(self.counts[1]);
                let mut out = Vec::with_capacity(self.len());
                for y in &wy {
                    for x in &wx {
                        out.push(x * y);
                    }
                }
                out
            }
        }
    }
}

/// Simulation parameters.
#[derive(Clone)]
pub struct ViscousConfig {
    pub epsilon: f64,
    pub grid: Grid,
    pub dt: f64,
    pub form: SimForm,
    /// Competition weight; `None` means `psi = 1`.
    pub psi: Option<Weight>,
    /// Record a full field snapshot every this many steps (the final state is
    /// always recorded).
    pub snapshot_stride: usize,
}

impl ViscousConfig {
    pub fn psi_at(&self, x: &DVector<f64>) -> f64 {
        match &self.psi {
            Some(f) => f(x),
            None => 1.0,
        }
    }
}

/// One recorded field snapshot.
#[derive(Debug, Clone)]
pub struct ViscousState {
    pub t: f64,
    pub i_eps: f64,
    /// `n` for the density form, `u_eps` for the logarithmic form.
    pub field: Vec<f64>,
    /// `eps log n` in both forms (identical to `field` for HopfCole).
    pub eps_log_n: Vec<f64>,
}

/// Per-step scalar record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub i_eps: f64,
    /// Sub-grid argmax of the field (quadratic interpolation around the
    /// maximal node).
    pub argmax: Vec<f64>,
    pub max_eps_log_n: f64,
}

/// Full output of one simulation run.
#[derive(Debug)]
pub struct ViscousSeries {
    pub grid: Grid,
    pub epsilon: f64,
    pub form: SimForm,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<ViscousState>,
}

impl ViscousSeries {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().unwrap()
    }

    pub fn final_state(&self) -> &ViscousState {
        self.snapshots.last().unwrap()
    }
}

/// Neumann-mirrored neighbor pairs along each axis of a flattened index.
fn neighbor_pairs(grid: &Grid, idx: usize) -> [(usize, usize); 2] {
    let reflect = |i: usize, n: usize| -> (usize, usize) {
        let prev = if i == 0 { 1 } else { i - 1 };
        let next = if i + 1 == n { n - 2 } else { i + 1 };
        (prev, next)
    };
    match grid.dim() {
        1 => {
            let (p, n) = reflect(idx, grid.counts[0]);
            [(p, n), (idx, idx)]
        }
        _ => {
            let nx = grid.counts[0];
            let (i, j) = (idx % nx, idx / nx);
            let (ip, inx) = reflect(i, grid.counts[0]);
            let (jp, jn) = reflect(j, grid.counts[1]);
            [(ip + j * nx, inx + j * nx), (i + jp * nx, i + jn * nx)]
        }
    }
}

/// Runs the explicit scheme up to `t_final`, recording scalar diagnostics at
/// every step. The initial density is `exp(u0 / eps)` normalized so that
/// `I_eps(0) = I0` (density form), while the logarithmic form starts from
/// `u0` itself with `I_eps(0)` computed from it.
pub fn simulate_viscous(
    model: &GrowthModel,
    data: &InitialData,
    cfg: &ViscousConfig,
    t_final: f64,
) -> Result<ViscousSeries> {
    let grid = &cfg.grid;
    let d = grid.dim();
    if model.dim() != d || data.dim() != d {
        return Err(Error::Config("grid, model and data dimensions differ".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    if !(t_final > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {t_final}")));
    }
    let h = grid.spacing();
    let cfl_bound = h * h / (2.0 * d as f64 * cfg.epsilon);
    if cfg.dt > cfl_bound * (1.0 + 1e-12) {
        return Err(Error::CflViolation {
            dt: cfg.dt,
            bound: cfl_bound,
            epsilon: cfg.epsilon,
            h,
        });
    }

    let n_pts = grid.len();
    let points: Vec<DVector<f64>> = (0..n_pts).map(|i| grid.point(i)).collect();
    let quad: Vec<f64> = {
        let w = grid.quad_weights();
        (0..n_pts).map(|i| w[i] * cfg.psi_at(&points[i])).collect()
    };
    let eps = cfg.epsilon;
    let i_limit = 2.0 * model.i_max();

    // State: log n for the density form, u for the logarithmic form.
    let mut field: Vec<f64> = match cfg.form {
        SimForm::Density => points.iter().map(|x| data.value(x) / eps).collect(),
        SimForm::HopfCole => points.iter().map(|x| data.value(x)).collect(),
    };
    if cfg.form == SimForm::Density {
        let mass: f64 = quad.iter().zip(&field).map(|(w, l)| w * l.exp()).sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Config(
                "initial density has no mass on the grid; enlarge the box".into(),
            ));
        }
        let shift = (data.i0() / mass).ln();
        for l in &mut field {
            *l += shift;
        }
    }

    let i_of = |field: &[f64]| -> f64 {
        match cfg.form {
            SimForm::Density => quad.iter().zip(field).map(|(w, l)| w * l.exp()).sum(),
            SimForm::HopfCole => quad.iter().zip(field).map(|(w, u)| w * (u / eps).exp()).sum(),
        }
    };

    let steps = (t_final / cfg.dt).ceil().max(1.0) as usize;
    let dt = t_final / steps as f64;
    let stride = cfg.snapshot_stride.max(1);

    let mut records = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::new();
    let mut i_eps = i_of(&field);
    let guard = |t: f64, i_eps: f64| -> Result<()> {
        if !(i_eps > 0.0) || !(i_eps <= i_limit) || !i_eps.is_finite() {
            return Err(Error::BlowUp {
                t,
                i_eps,
                limit: i_limit,
            });
        }
        Ok(())
    };
    guard(0.0, i_eps)?;

    let record = |t: f64, i_eps: f64, field: &[f64], grid: &Grid| -> StepRecord {
        let (argmax, max_val) = subgrid_argmax(grid, field);
        let max_eps_log_n = match cfg.form {
            SimForm::Density => eps * max_val,
            SimForm::HopfCole => max_val,
        };
        StepRecord {
            t,
            i_eps,
            argmax,
            max_eps_log_n,
        }
    };
    let snapshot = |t: f64, i_eps: f64, field: &[f64]| -> ViscousState {
        let (field_out, eps_log_n) = match cfg.form {
            SimForm::Density => (
                field.iter().map(|l| l.exp()).collect::<Vec<f64>>(),
                field.iter().map(|l| eps * l).collect(),
            ),
            SimForm::HopfCole => (field.to_vec(), field.to_vec()),
        };
        ViscousState {
            t,
            i_eps,
            field: field_out,
            eps_log_n,
        }
    };

    records.push(record(0.0, i_eps, &field, grid));
    snapshots.push(snapshot(0.0, i_eps, &field));

    let mut next = vec![0.0; n_pts];
    for step in 1..=steps {
        let t = t_final * step as f64 / steps as f64;
        match cfg.form {
            SimForm::Density => {
                for idx in 0..n_pts {
                    let l = field[idx];
                    let mut lap_ratio = 0.0;
                    for (p, q) in neighbor_pairs(grid, idx).iter().take(d) {
                        lap_ratio +=
                            ((field[*p] - l).exp() - 2.0 + (field[*q] - l).exp()) / (h * h);
                    }
                    let r = model.value_raw(&points[idx], i_eps);
                    next[idx] = l + dt * (eps * lap_ratio + r / eps);
                }
            }
            SimForm::HopfCole => {
                for idx in 0..n_pts {
                    let u = field[idx];
                    let mut lap = 0.0;
                    let mut grad_sq = 0.0;
                    for (p, q) in neighbor_pairs(grid, idx).iter().take(d) {
                        lap += (field[*p] - 2.0 * u + field[*q]) / (h * h);
                        let g = (field[*q] - field[*p]) / (2.0 * h);
                        grad_sq += g * g;
                    }
                    let r = model.value_raw(&points[idx], i_eps);
                    next[idx] = u + dt * (eps * lap + grad_sq + r);
                }
            }
        }
        std::mem::swap(&mut field, &mut next);
        i_eps = i_of(&field);
        guard(t, i_eps)?;
        records.push(record(t, i_eps, &field, grid));
        if step % stride == 0 || step == steps {
            snapshots.push(snapshot(t, i_eps, &field));
        }
    }

    Ok(ViscousSeries {
        grid: grid.clone(),
        epsilon: eps,
        form: cfg.form,
        records,
        snapshots,
    })
}

/// Argmax with one quadratic-interpolation correction per axis, plus the
/// maximal nodal value.
fn subgrid_argmax(grid: &Grid, field: &[f64]) -> (Vec<f64>, f64) {
    let mut best = 0;
    for (i, v) in field.iter().enumerate() {
        if *v > field[best] {
            best = i;
        }
    }
    let x = grid.point(best);
    let mut out: Vec<f64> = x.iter().copied().collect();
    let h = grid.spacing();
    for (axis, (p, q)) in neighbor_pairs(grid, best).iter().take(grid.dim()).enumerate() {
        // Skip the correction against mirrored neighbors at the boundary.
        if *p == best || *q == best || *p == *q {
            continue;
        }
        let (fm, f0, fp) = (field[*p], field[best], field[*q]);
        let denom = fm - 2.0 * f0 + fp;
        if denom < 0.0 {
            let shift = 0.5 * (fm - fp) / denom;
            if shift.abs() <= 1.0 {
                out[axis] += shift * h;
            }
        }
    }
    (out, field[best])
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Concentration errors of one run against a constrained reference solution.
#[derive(Debug, Clone)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub i_eps: f64,
    /// `|argmax n_eps - xbar(t)|`.
    pub argmax_err: f64,
    /// `|I_eps - I(t)|`.
    pub i_err: f64,
    /// Estimated concentration mass `I_eps / psi(argmax)`.
    pub rho_hat: f64,
    /// Reference mass `I(t) / psi(xbar(t))`.
    pub rho_ref: f64,
    pub max_eps_log_n: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub epsilon: f64,
    pub rows: Vec<DiagnosticsRow>,
    pub sup_argmax_err: f64,
    pub sup_i_err: f64,
    pub final_argmax_err: f64,
    pub final_i_err: f64,
}

/// Compares a simulated series against a constrained reference on the same
/// horizon: maximizer location, competition level and concentration mass.
pub fn concentration_diagnostics(
    series: &ViscousSeries,
    reference: &ConstrainedSolution,
    cfg: &ViscousConfig,
) -> DiagnosticsReport {
    let mut rows = Vec::with_capacity(series.records.len());
    let mut sup_argmax: f64 = 0.0;
    let mut sup_i: f64 = 0.0;
    for rec in &series.records {
        let xbar = reference.xbar_at(rec.t);
        let i_ref = reference.competition_at(rec.t);
        let argmax = DVector::from_vec(rec.argmax.clone());
        let argmax_err = (&argmax - &xbar).norm();
        let i_err = (rec.i_eps - i_ref).abs();
        sup_argmax = sup_argmax.max(argmax_err);
        sup_i = sup_i.max(i_err);
        rows.push(DiagnosticsRow {
            t: rec.t,
            i_eps: rec.i_eps,
            argmax_err,
            i_err,
            rho_hat: rec.i_eps / cfg.psi_at(&argmax),
            rho_ref: i_ref / cfg.psi_at(&xbar),
            max_eps_log_n: rec.max_eps_log_n,
        });
    }
    let last = rows.last().expect("a run records at least its initial state");
    DiagnosticsReport {
        epsilon: series.epsilon,
        sup_argmax_err: sup_argmax,
        sup_i_err: sup_i,
        final_argmax_err: last.argmax_err,
        final_i_err: last.i_err,
        rows,
    }
}

/// Sup difference between `eps log n` from a density run and `u_eps` from a
/// logarithmic run at matching snapshot times; a mesh-consistency diagnostic,
/// reported rather than asserted.
pub fn hopf_cole_gap(density: &ViscousSeries, hopf_cole: &ViscousSeries) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for a in &density.snapshots {
        if let Some(b) = hopf_cole
            .snapshots
            .iter()
            .find(|s| (s.t - a.t).abs() <= 1e-9 * (1.0 + a.t))
        {
            let gap = a
                .eps_log_n
                .iter()
                .zip(&b.eps_log_n)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0_f64, f64::max);
            out.push((a.t, gap));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GrowthConstants, InitialConstants};
    use crate::quadratic::{solve_quadratic_system, QuadraticProblem, QuadraticSolveOptions};
    use nalgebra::DMatrix;

    fn constants() -> (GrowthConstants, InitialConstants) {
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

    fn stationary() -> (GrowthModel, InitialData) {
        let (gc, ic) = constants();
        (
            GrowthModel::quadratic(
                DMatrix::from_element(1, 1, 2.0),
                DVector::zeros(1),
                1.0,
                None,
                gc,
            )
            .unwrap(),
            InitialData::quadratic(
                DMatrix::from_element(1, 1, 1.0),
                DVector::zeros(1),
                0.0,
                1.0,
                ic,
            )
            .unwrap(),
        )
    }

    fn config(epsilon: f64, h: f64, dt: f64, form: SimForm) -> ViscousConfig {
        ViscousConfig {
            epsilon,
            grid: Grid::uniform(vec![-2.0], vec![2.0], h).unwrap(),
            dt,
            form,
            psi: None,
            snapshot_stride: 50,
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let (model, data) = stationary();
        let cfg = config(0.1, 0.02, 0.1, SimForm::Density);
        let err = simulate_viscous(&model, &data, &cfg, 0.5).unwrap_err();
        assert!(matches!(err, Error::CflViolation { .. }));
    }

    #[test]
    fn competition_integral_is_the_trapezoid_mass() {
        // With psi = 1 the recorded I_eps of a density run is exactly the
        // trapezoid mass of n on the grid.
        let (model, data) = stationary();
        let cfg = config(0.1, 0.05, 1e-3, SimForm::Density);
        let series = simulate_viscous(&model, &data, &cfg, 0.01).unwrap();
        let state = series.final_state();
        let w = cfg.grid.quad_weights();
        let mass: f64 = w.iter().zip(&state.field).map(|(w, n)| w * n).sum();
        assert!((mass - state.i_eps).abs() <= 1e-12 * mass);
    }

    #[test]
    fn density_stays_structurally_positive() {
        let (model, data) = stationary();
        let cfg = config(0.05, 0.02, 2e-3, SimForm::Density);
        let series = simulate_viscous(&model, &data, &cfg, 0.2).unwrap();
        for s in &series.snapshots {
            assert!(s.eps_log_n.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn stationary_concentration_tightens_with_epsilon() {
        let (model, data) = stationary();
        let mut i_devs = Vec::new();
        for &eps in &[0.1, 0.05] {
            let dt = 0.8 * 0.02 * 0.02 / (2.0 * eps);
            let cfg = config(eps, 0.02, dt, SimForm::Density);
            let series = simulate_viscous(&model, &data, &cfg, 1.0).unwrap();
            let rec = series.final_record();
            // The maximizer never leaves the origin cell.
            assert!(rec.argmax[0].abs() <= 0.02, "argmax {}", rec.argmax[0]);
            i_devs.push((rec.i_eps - 1.0).abs());
        }
        assert!(
            i_devs[1] < i_devs[0],
            "competition deviation should shrink with eps: {i_devs:?}"
        );
        // Within a few eps of the limit at both viscosities.
        assert!(i_devs[0] <= 0.3);
    }

    #[test]
    fn log_density_and_direct_forms_stay_close() {
        let (model, data) = stationary();
        let dt = 5e-4;
        let density = simulate_viscous(&model, &data, &config(0.1, 0.05, dt, SimForm::Density), 0.25)
            .unwrap();
        let hopf =
            simulate_viscous(&model, &data, &config(0.1, 0.05, dt, SimForm::HopfCole), 0.25)
                .unwrap();
        let gaps = hopf_cole_gap(&density, &hopf);
        assert!(!gaps.is_empty());
        for (_, gap) in &gaps {
            assert!(gap.is_finite());
        }
        // Same solution, different discretizations: the gap is mesh-level.
        let final_gap = gaps.last().unwrap().1;
        assert!(final_gap <= 0.05, "gap {final_gap}");
    }

    #[test]
    fn runaway_initial_mass_trips_the_guard() {
        let (model, _) = stationary();
        let (_, ic) = constants();
        // A profile shifted up by 10 makes exp(u0/eps) astronomically heavy;
        // the logarithmic form keeps u0 as is and must detect the blow-up.
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            10.0,
            1.0,
            ic,
        )
        .unwrap();
        let cfg = config(0.1, 0.05, 1e-3, SimForm::HopfCole);
        let err = simulate_viscous(&model, &data, &cfg, 0.5).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn diagnostics_against_the_closed_form_reference() {
        let (model, data) = stationary();
        let prob = QuadraticProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            1.0,
        )
        .unwrap();
        let reference =
            solve_quadratic_system(&prob, 0.5, 0.01, &QuadraticSolveOptions::default()).unwrap();
        let cfg = config(0.05, 0.02, 2e-3, SimForm::Density);
        let series = simulate_viscous(&model, &data, &cfg, 0.5).unwrap();
        let report = concentration_diagnostics(&series, &reference, &cfg);
        assert_eq!(report.rows.len(), series.records.len());
        // Stationary instance: the maximizer error is at most one cell and
        // rho_hat approaches I0 / psi(0) = 1.
        assert!(report.sup_argmax_err <= 0.02 + 1e-12);
        let last = report.rows.last().unwrap();
        assert!((last.rho_hat - 1.0).abs() <= 0.3);
        assert!((last.rho_ref - 1.0).abs() <= 1e-12);
    }
}
