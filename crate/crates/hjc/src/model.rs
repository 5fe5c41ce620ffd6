//! Growth-rate and initial-data families, their derivatives, and numerical
//! validation of the standing structural assumptions.
//!
//! The rate `R(x, I)` is strictly concave in the trait `x` and strictly
//! decreasing in the competition level `I`; the initial profile `u0` is
//! strictly concave with its maximum normalized to zero. Quadratic families
//! get exact (eigenvalue-based) checks; custom callables are sampled.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::sym_eig_range;

/// Numerical slack accepted before a validated inequality counts as violated.
const CHECK_SLACK: f64 = 1e-9;

/// Residual tolerance for the initial compatibility conditions.
const COMPAT_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Growth model
// ---------------------------------------------------------------------------

/// User-supplied rate with analytic derivatives.
///
/// The two `mixed_*` hooks and `third_x_sup` feed only the assumption
/// validator; models that do not provide them get those checks skipped.
pub trait GrowthRate: Send + Sync {
    fn value(&self, x: &DVector<f64>, i: f64) -> f64;
    fn grad_x(&self, x: &DVector<f64>, i: f64) -> DVector<f64>;
    fn hess_x(&self, x: &DVector<f64>, i: f64) -> DMatrix<f64>;
    fn dr_di(&self, x: &DVector<f64>, i: f64) -> f64;
    /// d^2 R / dI dx, if available.
    fn mixed_di_dx(&self, _x: &DVector<f64>, _i: f64) -> Option<DVector<f64>> {
        None
    }
    /// d^3 R / dI dx_i dx_j, if available.
    fn mixed_di_dxx(&self, _x: &DVector<f64>, _i: f64) -> Option<DMatrix<f64>> {
        None
    }
    /// Pointwise bound on the third x-derivative tensor, if available.
    fn third_x_sup(&self, _x: &DVector<f64>, _i: f64) -> Option<f64> {
        None
    }
}

/// The rate family.
#[derive(Clone)]
pub enum GrowthFamily {
    /// `R(x, I) = -x . A1 x / 2 + b . x + i_shift - I`.
    Quadratic {
        a1: DMatrix<f64>,
        b: DVector<f64>,
        i_shift: f64,
    },
    /// Arbitrary rate through analytic callables.
    Custom(Arc<dyn GrowthRate>),
}

impl fmt::Debug for GrowthFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrowthFamily::Quadratic { a1, b, i_shift } => f
                .debug_struct("Quadratic")
                .field("a1", a1)
                .field("b", b)
                .field("i_shift", i_shift)
                .finish(),
            GrowthFamily::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Constants entering the structural bounds on `R`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GrowthConstants {
    pub k0_bar: f64,
    pub k1_bar: f64,
    pub k1_under: f64,
    pub k2_bar: f64,
    pub k2_under: f64,
    pub k3: f64,
    pub k4: f64,
}

/// A growth rate together with its admissible competition range and the
/// constants its concavity/monotonicity bounds are checked against.
#[derive(Debug, Clone)]
pub struct GrowthModel {
    family: GrowthFamily,
    dim: usize,
    i_max: f64,
    constants: GrowthConstants,
}

/// Value and derivatives of `R` at one point.
#[derive(Debug, Clone)]
pub struct RateEval {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub hess_x: DMatrix<f64>,
    pub dr_di: f64,
}

impl GrowthModel {
    /// Quadratic rate. When `i_max` is `None` it defaults to
    /// `i_shift + b . A1^{-1} b / 2`, the level at which the maximum of
    /// `R(., I)` crosses zero.
    pub fn quadratic(
        a1: DMatrix<f64>,
        b: DVector<f64>,
        i_shift: f64,
        i_max: Option<f64>,
        constants: GrowthConstants,
    ) -> Result<Self> {
        let dim = b.len();
        if a1.nrows() != dim || a1.ncols() != dim {
            return Err(Error::Config(format!(
                "A1 is {}x{} but b has length {dim}",
                a1.nrows(),
                a1.ncols()
            )));
        }
        let asym = (&a1 - a1.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + a1.abs().max()) {
            return Err(Error::Config("A1 must be symmetric".into()));
        }
        let (lo, _) = sym_eig_range(&a1);
        if lo <= 0.0 {
            return Err(Error::Config(format!(
                "A1 must be positive definite (min eigenvalue {lo:.3e})"
            )));
        }
        let peak_gain = 0.5 * quadratic_peak_gain(&a1, &b)?;
        let i_max = i_max.unwrap_or(i_shift + peak_gain);
        if i_max <= 0.0 {
            return Err(Error::Config(format!("I_max must be positive, got {i_max}")));
        }
        Ok(GrowthModel {
            family: GrowthFamily::Quadratic { a1, b, i_shift },
            dim,
            i_max,
            constants,
        })
    }

    /// Custom rate from analytic callables.
    pub fn custom(
        dim: usize,
        rate: Arc<dyn GrowthRate>,
        i_max: f64,
        constants: GrowthConstants,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if i_max <= 0.0 {
            return Err(Error::Config(format!("I_max must be positive, got {i_max}")));
        }
        Ok(GrowthModel {
            family: GrowthFamily::Custom(rate),
            dim,
            i_max,
            constants,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn i_max(&self) -> f64 {
        self.i_max
    }

    pub fn constants(&self) -> &GrowthConstants {
        &self.constants
    }

    pub fn family(&self) -> &GrowthFamily {
        &self.family
    }

    /// The maximizer of `R(., I)` (independent of `I` for both families with
    /// concave rates): `A1^{-1} b` for the quadratic family, Newton-located
    /// for custom rates starting from `start`.
    pub fn rate_peak(&self, start: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.family {
            GrowthFamily::Quadratic { a1, b, .. } => a1
                .clone()
                .lu()
                .solve(b)
                .ok_or_else(|| Error::Config("A1 is numerically singular".into())),
            GrowthFamily::Custom(_) => {
                let mut x = start.clone();
                for _ in 0..100 {
                    let g = self.grad_raw(&x, self.i_max);
                    if g.norm() <= 1e-12 {
                        return Ok(x);
                    }
                    let h = self.hess_raw(&x, self.i_max);
                    let step = h.lu().solve(&g).ok_or_else(|| Error::DegenerateHessian {
                        detail: "singular rate Hessian while locating the peak".into(),
                    })?;
                    x -= step;
                }
                let residual = self.grad_raw(&x, self.i_max).norm();
                Err(Error::NewtonStalled {
                    iterations: 100,
                    residual,
                })
            }
        }
    }

    /// Value plus first/second derivatives at `(x, I)`.
    ///
    /// `I` must lie in `[0, I_max]`.
    pub fn eval_growth(&self, x: &DVector<f64>, i: f64) -> Result<RateEval> {
        self.check_competition(i)?;
        Ok(RateEval {
            value: self.value_raw(x, i),
            grad_x: self.grad_raw(x, i),
            hess_x: self.hess_raw(x, i),
            dr_di: self.dr_di_raw(x, i),
        })
    }

    pub(crate) fn check_competition(&self, i: f64) -> Result<()> {
        if !i.is_finite() || i < 0.0 || i > self.i_max {
            return Err(Error::CompetitionOutOfRange {
                value: i,
                i_max: self.i_max,
            });
        }
        Ok(())
    }

    /// `R(x, I)` without the competition-range guard. Solver-internal paths
    /// keep `I` admissible by construction.
    pub(crate) fn value_raw(&self, x: &DVector<f64>, i: f64) -> f64 {
        match &self.family {
            GrowthFamily::Quadratic { a1, b, i_shift } => {
                -0.5 * (a1 * x).dot(x) + b.dot(x) + i_shift - i
            }
            GrowthFamily::Custom(r) => r.value(x, i),
        }
    }

    pub(crate) fn grad_raw(&self, x: &DVector<f64>, i: f64) -> DVector<f64> {
        match &self.family {
            GrowthFamily::Quadratic { a1, b, .. } => b - a1 * x,
            GrowthFamily::Custom(r) => r.grad_x(x, i),
        }
    }

    pub(crate) fn hess_raw(&self, x: &DVector<f64>, i: f64) -> DMatrix<f64> {
        match &self.family {
            GrowthFamily::Quadratic { a1, .. } => -a1.clone(),
            GrowthFamily::Custom(r) => r.hess_x(x, i),
        }
    }

    pub(crate) fn dr_di_raw(&self, x: &DVector<f64>, i: f64) -> f64 {
        match &self.family {
            GrowthFamily::Quadratic { .. } => -1.0,
            GrowthFamily::Custom(r) => r.dr_di(x, i),
        }
    }
}

/// `b . A1^{-1} b`, the gain of the rate maximum over its value at the origin.
fn quadratic_peak_gain(a1: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
    let sol = a1
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Config("A1 is numerically singular".into()))?;
    Ok(b.dot(&sol))
}

// ---------------------------------------------------------------------------
// Initial data
// ---------------------------------------------------------------------------

/// User-supplied initial profile with analytic derivatives.
pub trait InitialProfile: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Pointwise bound on the third derivative tensor, if available.
    fn third_sup(&self, _x: &DVector<f64>) -> Option<f64> {
        None
    }
}

/// The initial-profile family.
#[derive(Clone)]
pub enum InitialFamily {
    /// `u0(x) = -(x - peak) . A0 (x - peak) / 2 + offset`.
    QuadraticU0 {
        a0: DMatrix<f64>,
        peak: DVector<f64>,
        offset: f64,
    },
    /// Arbitrary concave profile through callables.
    CustomU0(Arc<dyn InitialProfile>),
}

impl fmt::Debug for InitialFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialFamily::QuadraticU0 { a0, peak, offset } => f
                .debug_struct("QuadraticU0")
                .field("a0", a0)
                .field("peak", peak)
                .field("offset", offset)
                .finish(),
            InitialFamily::CustomU0(_) => f.write_str("CustomU0(..)"),
        }
    }
}

/// Concavity and growth constants for the initial profile.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InitialConstants {
    pub l0_under: f64,
    pub l0_bar: f64,
    pub l1_under: f64,
    pub l1_bar: f64,
    pub l2: f64,
    pub l3: f64,
}

/// Initial profile, initial competition level, and the profile maximizer.
#[derive(Debug, Clone)]
pub struct InitialData {
    family: InitialFamily,
    i0: f64,
    xbar0: DVector<f64>,
    constants: InitialConstants,
}

impl InitialData {
    pub fn quadratic(
        a0: DMatrix<f64>,
        peak: DVector<f64>,
        offset: f64,
        i0: f64,
        constants: InitialConstants,
    ) -> Result<Self> {
        let dim = peak.len();
        if a0.nrows() != dim || a0.ncols() != dim {
            return Err(Error::Config(format!(
                "A0 is {}x{} but peak has length {dim}",
                a0.nrows(),
                a0.ncols()
            )));
        }
        let (lo, _) = sym_eig_range(&a0);
        if lo <= 0.0 {
            return Err(Error::Config(format!(
                "A0 must be positive definite (min eigenvalue {lo:.3e})"
            )));
        }
        if i0 <= 0.0 {
            return Err(Error::Config(format!("I0 must be positive, got {i0}")));
        }
        let xbar0 = peak.clone();
        Ok(InitialData {
            family: InitialFamily::QuadraticU0 { a0, peak, offset },
            i0,
            xbar0,
            constants,
        })
    }

    pub fn custom(
        profile: Arc<dyn InitialProfile>,
        i0: f64,
        xbar0: DVector<f64>,
        constants: InitialConstants,
    ) -> Result<Self> {
        if i0 <= 0.0 {
            return Err(Error::Config(format!("I0 must be positive, got {i0}")));
        }
        Ok(InitialData {
            family: InitialFamily::CustomU0(profile),
            i0,
            xbar0,
            constants,
        })
    }

    pub fn dim(&self) -> usize {
        self.xbar0.len()
    }

    pub fn i0(&self) -> f64 {
        self.i0
    }

    pub fn xbar0(&self) -> &DVector<f64> {
        &self.xbar0
    }

    pub fn constants(&self) -> &InitialConstants {
        &self.constants
    }

    pub fn family(&self) -> &InitialFamily {
        &self.family
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.family {
            InitialFamily::QuadraticU0 { a0, peak, offset } => {
                let y = x - peak;
                -0.5 * (a0 * &y).dot(&y) + offset
            }
            InitialFamily::CustomU0(p) => p.value(x),
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.family {
            InitialFamily::QuadraticU0 { a0, peak, .. } => -(a0 * (x - peak)),
            InitialFamily::CustomU0(p) => p.grad(x),
        }
    }

    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.family {
            InitialFamily::QuadraticU0 { a0, .. } => -a0.clone(),
            InitialFamily::CustomU0(p) => p.hess(x),
        }
    }
}

/// Additive shift of a custom profile, produced by [`recenter_initial`].
struct ShiftedProfile {
    inner: Arc<dyn InitialProfile>,
    shift: f64,
}

impl InitialProfile for ShiftedProfile {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.inner.value(x) + self.shift
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.grad(x)
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hess(x)
    }
    fn third_sup(&self, x: &DVector<f64>) -> Option<f64> {
        self.inner.third_sup(x)
    }
}

/// Normalizes initial data: locates the maximizer by Newton on the gradient,
/// shifts the profile so the maximum is exactly zero, and re-solves the
/// initial competition level so `R(xbar0, I0) = 0` whenever the relocated
/// maximizer broke that compatibility.
pub fn recenter_initial(data: &InitialData, model: &GrowthModel) -> Result<InitialData> {
    // Newton on grad u0 = 0.
    let mut x = data.xbar0.clone();
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let g = data.grad(&x);
        residual = g.norm();
        if residual <= 1e-13 {
            converged = true;
            break;
        }
        let h = data.hess(&x);
        let (_, hi) = sym_eig_range(&h);
        if hi >= 0.0 {
            return Err(Error::NonconcaveInput {
                detail: format!("Hessian of u0 not negative definite at {x:?}"),
            });
        }
        let step = h.lu().solve(&g).ok_or_else(|| Error::NonconcaveInput {
            detail: "singular Hessian of u0".into(),
        })?;
        x -= step;
    }
    if !converged {
        return Err(Error::NonconcaveInput {
            detail: format!("Newton on grad u0 stalled (residual {residual:.3e})"),
        });
    }

    let peak_value = data.value(&x);
    let family = match &data.family {
        InitialFamily::QuadraticU0 { a0, peak, offset } => InitialFamily::QuadraticU0 {
            a0: a0.clone(),
            peak: peak.clone(),
            offset: offset - peak_value,
        },
        InitialFamily::CustomU0(p) => {
            if peak_value.abs() == 0.0 {
                InitialFamily::CustomU0(p.clone())
            } else {
                InitialFamily::CustomU0(Arc::new(ShiftedProfile {
                    inner: p.clone(),
                    shift: -peak_value,
                }))
            }
        }
    };

    // Restore the initial compatibility R(xbar0, I0) = 0 if the maximizer moved.
    let mut i0 = data.i0;
    if model.value_raw(&x, i0).abs() > 1e-12 {
        if let Ok(fixed) = solve_competition_at(model, &x) {
            i0 = fixed;
        }
    }

    Ok(InitialData {
        family,
        i0,
        xbar0: x,
        constants: data.constants,
    })
}

/// The unique `I` in `[0, I_max]` with `R(x, I) = 0`, by safeguarded Newton.
/// Requires `R(x, 0) > 0 >= R(x, I_max)`.
pub(crate) fn solve_competition_at(model: &GrowthModel, x: &DVector<f64>) -> Result<f64> {
    let at_zero = model.value_raw(x, 0.0);
    let at_max = model.value_raw(x, model.i_max());
    if at_zero <= 0.0 || at_max > 0.0 {
        return Err(Error::Inadmissible {
            detail: format!(
                "R(x, 0) = {at_zero:.6e}, R(x, I_max) = {at_max:.6e}; no root in [0, I_max]"
            ),
        });
    }
    let mut lo = 0.0;
    let mut hi = model.i_max();
    let mut i = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = model.value_raw(x, i);
        if f.abs() <= 1e-13 {
            return Ok(i.clamp(0.0, model.i_max()));
        }
        if f > 0.0 {
            lo = i;
        } else {
            hi = i;
        }
        let df = model.dr_di_raw(x, i);
        let mut next = i - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        i = next;
    }
    let f = model.value_raw(x, i);
    if f.abs() <= 1e-12 {
        Ok(i.clamp(0.0, model.i_max()))
    } else {
        Err(Error::NewtonStalled {
            iterations: 200,
            residual: f.abs(),
        })
    }
}

// ---------------------------------------------------------------------------
// Assumption validation
// ---------------------------------------------------------------------------

/// Axis-aligned sampling region.
#[derive(Debug, Clone, Serialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config("box bounds must have equal, nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::Config("box must satisfy lo < hi componentwise".into()));
        }
        Ok(AxisBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| 0.5 * (self.lo[k] + self.hi[k]))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..self.dim()).all(|k| x[k] >= self.lo[k] && x[k] <= self.hi[k])
    }

    /// Deterministic sample set: corners (for d <= 3), the center and a
    /// seeded uniform cloud of `samples` points.
    pub fn sample_points(&self, samples: usize) -> Vec<DVector<f64>> {
        let d = self.dim();
        let mut pts = Vec::new();
        if d <= 3 {
            for mask in 0..(1usize << d) {
                pts.push(DVector::from_fn(d, |k, _| {
                    if mask >> k & 1 == 1 {
                        self.hi[k]
                    } else {
                        self.lo[k]
                    }
                }));
            }
        }
        pts.push(self.center());
        let mut rng = ChaCha8Rng::seed_from_u64(0x484a43);
        for _ in 0..samples {
            pts.push(DVector::from_fn(d, |k, _| {
                rng.random_range(self.lo[k]..=self.hi[k])
            }));
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

/// One validated assumption: worst margin (positive = violation size) and
/// where it was attained.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub description: String,
    pub status: CheckStatus,
    pub margin: f64,
    pub location: Option<Vec<f64>>,
    pub competition: Option<f64>,
    pub note: Option<String>,
}

impl AssumptionCheck {
    fn from_worst(
        name: &str,
        description: &str,
        worst: f64,
        location: Option<Vec<f64>>,
        competition: Option<f64>,
        note: Option<String>,
    ) -> Self {
        AssumptionCheck {
            name: name.into(),
            description: description.into(),
            status: if worst <= CHECK_SLACK {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            margin: worst,
            location,
            competition,
            note,
        }
    }

    fn skipped(name: &str, description: &str, reason: &str) -> Self {
        AssumptionCheck {
            name: name.into(),
            description: description.into(),
            status: CheckStatus::Skipped,
            margin: 0.0,
            location: None,
            competition: None,
            note: Some(reason.into()),
        }
    }
}

/// Outcome of [`validate_assumptions`].
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failed(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail).collect()
    }

    pub fn find(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Plain-text rendering, one line per check.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "SKIP",
            };
            out.push_str(&format!(
                "{status}  {:<8} margin {: >12.4e}  {}",
                c.name, c.margin, c.description
            ));
            if let Some(loc) = &c.location {
                out.push_str(&format!("  at x = {loc:?}"));
            }
            if let Some(i) = c.competition {
                out.push_str(&format!(", I = {i:.6}"));
            }
            if let Some(n) = &c.note {
                out.push_str(&format!("  [{n}]"));
            }
            out.push('\n');
        }
        out
    }
}

/// Tracks the worst (largest) violation across sampled points.
struct WorstTracker {
    worst: f64,
    location: Option<Vec<f64>>,
    competition: Option<f64>,
}

impl WorstTracker {
    fn new() -> Self {
        WorstTracker {
            worst: f64::NEG_INFINITY,
            location: None,
            competition: None,
        }
    }

    fn update(&mut self, value: f64, x: &DVector<f64>, i: Option<f64>) {
        if value > self.worst {
            self.worst = value;
            self.location = Some(x.iter().copied().collect());
            self.competition = i;
        }
    }
}

/// Checks every structural assumption on `model` and `data`.
///
/// Quadratic families are checked exactly through eigenvalue bounds and the
/// sampling parameters are ignored for those inequalities; custom callables
/// are sampled over `region` and a competition grid. The quadratic-decay
/// envelopes are validated in coordinates centered at the rate peak (the
/// origin normalization of the underlying theory) and over the competition
/// range `[I0, I_max]` that the constrained dynamics can realize.
pub fn validate_assumptions(
    model: &GrowthModel,
    data: &InitialData,
    region: &AxisBox,
    samples: usize,
) -> AssumptionReport {
    let mut checks = Vec::new();
    let c = model.constants();
    let lc = data.constants();
    let i_lo = data.i0().clamp(0.0, model.i_max());
    let i_hi = model.i_max();

    let peak = model
        .rate_peak(data.xbar0())
        .or_else(|_| model.rate_peak(&region.center()));

    match model.family() {
        GrowthFamily::Quadratic { a1, b, i_shift } => {
            let (lmin, lmax) = sym_eig_range(a1);
            let gain = quadratic_peak_gain(a1, b).unwrap_or(f64::NAN);
            let i_m_natural = i_shift + 0.5 * gain;
            let peak_x: Option<Vec<f64>> =
                peak.as_ref().ok().map(|p| p.iter().copied().collect());

            // (asrmax): max_x R(x, I_max) = 0, attained at the rate peak.
            checks.push(AssumptionCheck::from_worst(
                "asrmax",
                "max_x R(x, I_max) = 0",
                (i_m_natural - model.i_max()).abs(),
                peak_x.clone(),
                Some(model.i_max()),
                Some("origin normalization informative only; peak may sit away from 0".into()),
            ));

            // (asr): quadratic envelopes, exact in peak-centered coordinates.
            // Lower: (K1_under - A1/2) psd and I <= I_max.
            let (qlo, _) = sym_eig_range(&(DMatrix::identity(a1.nrows(), a1.ncols()) * c.k1_under - a1 * 0.5));
            let lower_worst = (-qlo).max(i_hi - i_m_natural);
            // Upper: (K1_bar - A1/2) nsd and K0_bar >= I_max - I0.
            let (_, qhi) = sym_eig_range(&(DMatrix::identity(a1.nrows(), a1.ncols()) * c.k1_bar - a1 * 0.5));
            let upper_worst = qhi.max(i_m_natural - i_lo - c.k0_bar);
            checks.push(AssumptionCheck::from_worst(
                "asr",
                "-K1_under |x|^2 <= R <= K0_bar - K1_bar |x|^2 (peak-centered, I in [I0, I_max])",
                lower_worst.max(upper_worst),
                peak_x.clone(),
                None,
                Some("exact eigenvalue check".into()),
            ));

            // (asrD2): -2 K1_under <= -A1 <= -2 K1_bar < 0.
            let worst = (2.0 * c.k1_bar - lmin).max(lmax - 2.0 * c.k1_under).max(-c.k1_bar);
            checks.push(AssumptionCheck::from_worst(
                "asrD2",
                "-2 K1_under <= D^2 R <= -2 K1_bar < 0",
                worst,
                None,
                None,
                Some("exact eigenvalue check".into()),
            ));

            // (asrDi): dR/dI = -1 for the quadratic family.
            checks.push(AssumptionCheck::from_worst(
                "asrDi",
                "-K2_under <= dR/dI <= -K2_bar < 0",
                (c.k2_bar - 1.0).max(1.0 - c.k2_under).max(-c.k2_bar),
                None,
                None,
                None,
            ));

            // (asr23), (asRD3): the quadratic family has vanishing mixed and
            // third derivatives.
            checks.push(AssumptionCheck::from_worst(
                "asr23",
                "|d2R/dIdx| + |d3R/dIdxdx| <= K3",
                -c.k3,
                None,
                None,
                Some("identically zero for the quadratic family".into()),
            ));
            checks.push(AssumptionCheck::from_worst(
                "asRD3",
                "||D^3 R|| <= K4",
                -c.k4,
                None,
                None,
                Some("identically zero for the quadratic family".into()),
            ));
        }
        GrowthFamily::Custom(rate) => {
            let xs = region.sample_points(samples.max(1));
            let n_i = 9;
            let i_grid: Vec<f64> = (0..n_i)
                .map(|k| i_lo + (i_hi - i_lo) * k as f64 / (n_i - 1) as f64)
                .collect();

            // (asrmax): Newton-located peak of R(., I_max).
            match &peak {
                Ok(p) => {
                    let v = model.value_raw(p, i_hi);
                    checks.push(AssumptionCheck::from_worst(
                        "asrmax",
                        "max_x R(x, I_max) = 0",
                        v.abs(),
                        Some(p.iter().copied().collect()),
                        Some(i_hi),
                        None,
                    ));
                }
                Err(e) => checks.push(AssumptionCheck::skipped(
                    "asrmax",
                    "max_x R(x, I_max) = 0",
                    &format!("peak location failed: {e}"),
                )),
            }

            let center = peak.as_ref().ok().cloned().unwrap_or_else(|| region.center());

            let mut asr = WorstTracker::new();
            let mut asrd2 = WorstTracker::new();
            let mut asrdi = WorstTracker::new();
            let mut asr23 = WorstTracker::new();
            let mut asrd3 = WorstTracker::new();
            let mut have_mixed = true;
            let mut have_third = true;
            for x in &xs {
                let y2 = (x - &center).norm_squared();
                for &i in &i_grid {
                    let v = model.value_raw(x, i);
                    asr.update((-c.k1_under * y2 - v).max(v - c.k0_bar + c.k1_bar * y2), x, Some(i));
                    let h = model.hess_raw(x, i);
                    let (hlo, hhi) = sym_eig_range(&h);
                    asrd2.update((-2.0 * c.k1_under - hlo).max(hhi + 2.0 * c.k1_bar), x, Some(i));
                    let di = model.dr_di_raw(x, i);
                    asrdi.update((-c.k2_under - di).max(di + c.k2_bar), x, Some(i));
                    match (rate.mixed_di_dx(x, i), rate.mixed_di_dxx(x, i)) {
                        (Some(g), Some(m)) => {
                            let worst = g.abs().max() + m.abs().max() - c.k3;
                            asr23.update(worst, x, Some(i));
                        }
                        _ => have_mixed = false,
                    }
                    match rate.third_x_sup(x, i) {
                        Some(s) => asrd3.update(s - c.k4, x, Some(i)),
                        None => have_third = false,
                    }
                }
            }
            checks.push(AssumptionCheck::from_worst(
                "asr",
                "-K1_under |x|^2 <= R <= K0_bar - K1_bar |x|^2 (peak-centered, I in [I0, I_max])",
                asr.worst,
                asr.location.clone(),
                asr.competition,
                Some("sampled".into()),
            ));
            checks.push(AssumptionCheck::from_worst(
                "asrD2",
                "-2 K1_under <= D^2 R <= -2 K1_bar < 0",
                asrd2.worst.max(-c.k1_bar),
                asrd2.location.clone(),
                asrd2.competition,
                Some("sampled".into()),
            ));
            checks.push(AssumptionCheck::from_worst(
                "asrDi",
                "-K2_under <= dR/dI <= -K2_bar < 0",
                asrdi.worst.max(-c.k2_bar),
                asrdi.location.clone(),
                asrdi.competition,
                Some("sampled".into()),
            ));
            if have_mixed {
                checks.push(AssumptionCheck::from_worst(
                    "asr23",
                    "|d2R/dIdx| + |d3R/dIdxdx| <= K3",
                    asr23.worst,
                    asr23.location.clone(),
                    asr23.competition,
                    Some("sampled".into()),
                ));
            } else {
                checks.push(AssumptionCheck::skipped(
                    "asr23",
                    "|d2R/dIdx| + |d3R/dIdxdx| <= K3",
                    "mixed derivatives not supplied by the custom rate",
                ));
            }
            if have_third {
                checks.push(AssumptionCheck::from_worst(
                    "asRD3",
                    "||D^3 R|| <= K4",
                    asrd3.worst,
                    asrd3.location.clone(),
                    asrd3.competition,
                    Some("sampled".into()),
                ));
            } else {
                checks.push(AssumptionCheck::skipped(
                    "asRD3",
                    "||D^3 R|| <= K4",
                    "third derivatives not supplied by the custom rate",
                ));
            }
        }
    }

    // Initial-profile checks.
    match data.family() {
        InitialFamily::QuadraticU0 { a0, peak, offset } => {
            let (lmin, lmax) = sym_eig_range(a0);
            let d = a0.nrows();
            // (asu): exact, centered at the profile peak.
            let (qlo, _) = sym_eig_range(&(DMatrix::identity(d, d) * lc.l1_under - a0 * 0.5));
            let lower_worst = (-qlo).max(-(offset + lc.l0_under));
            let (_, qhi) = sym_eig_range(&(DMatrix::identity(d, d) * lc.l1_bar - a0 * 0.5));
            let upper_worst = qhi.max(offset - lc.l0_bar);
            checks.push(AssumptionCheck::from_worst(
                "asu",
                "-L0_under - L1_under |x|^2 <= u0 <= L0_bar - L1_bar |x|^2 (peak-centered)",
                lower_worst.max(upper_worst),
                Some(peak.iter().copied().collect()),
                None,
                Some("exact eigenvalue check".into()),
            ));
            // (asuD2).
            checks.push(AssumptionCheck::from_worst(
                "asuD2",
                "-2 L1_under <= D^2 u0 <= -2 L1_bar",
                (2.0 * lc.l1_bar - lmin).max(lmax - 2.0 * lc.l1_under),
                None,
                None,
                Some("exact eigenvalue check".into()),
            ));
            // (asuD1): sampled (derived bound, informative).
            let mut tracker = WorstTracker::new();
            for x in region.sample_points(samples.max(1)) {
                let g = data.grad(&x).norm();
                tracker.update(g - lc.l2 * (1.0 + x.norm()), &x, None);
            }
            checks.push(AssumptionCheck::from_worst(
                "asuD1",
                "|grad u0| <= L2 (1 + |x|)",
                tracker.worst,
                tracker.location.clone(),
                None,
                Some("sampled; implied by the concavity envelope".into()),
            ));
            // (asuD3).
            checks.push(AssumptionCheck::from_worst(
                "asuD3",
                "||D^3 u0|| <= L3",
                -lc.l3,
                None,
                None,
                Some("identically zero for the quadratic family".into()),
            ));
        }
        InitialFamily::CustomU0(profile) => {
            let xs = region.sample_points(samples.max(1));
            let center = data.xbar0().clone();
            let mut asu = WorstTracker::new();
            let mut asud2 = WorstTracker::new();
            let mut asud1 = WorstTracker::new();
            let mut asud3 = WorstTracker::new();
            let mut have_third = true;
            for x in &xs {
                let y2 = (x - &center).norm_squared();
                let v = data.value(x);
                asu.update(
                    (-lc.l0_under - lc.l1_under * y2 - v).max(v - lc.l0_bar + lc.l1_bar * y2),
                    x,
                    None,
                );
                let h = data.hess(x);
                let (hlo, hhi) = sym_eig_range(&h);
                asud2.update((-2.0 * lc.l1_under - hlo).max(hhi + 2.0 * lc.l1_bar), x, None);
                asud1.update(data.grad(x).norm() - lc.l2 * (1.0 + x.norm()), x, None);
                match profile.third_sup(x) {
                    Some(s) => asud3.update(s - lc.l3, x, None),
                    None => have_third = false,
                }
            }
            checks.push(AssumptionCheck::from_worst(
                "asu",
                "-L0_under - L1_under |x|^2 <= u0 <= L0_bar - L1_bar |x|^2 (peak-centered)",
                asu.worst,
                asu.location.clone(),
                None,
                Some("sampled".into()),
            ));
            checks.push(AssumptionCheck::from_worst(
                "asuD2",
                "-2 L1_under <= D^2 u0 <= -2 L1_bar",
                asud2.worst,
                asud2.location.clone(),
                None,
                Some("sampled".into()),
            ));
            checks.push(AssumptionCheck::from_worst(
                "asuD1",
                "|grad u0| <= L2 (1 + |x|)",
                asud1.worst,
                asud1.location.clone(),
                None,
                Some("sampled; implied by the concavity envelope".into()),
            ));
            if have_third {
                checks.push(AssumptionCheck::from_worst(
                    "asuD3",
                    "||D^3 u0|| <= L3",
                    asud3.worst,
                    asud3.location.clone(),
                    None,
                    Some("sampled".into()),
                ));
            } else {
                checks.push(AssumptionCheck::skipped(
                    "asuD3",
                    "||D^3 u0|| <= L3",
                    "third derivatives not supplied by the custom profile",
                ));
            }
        }
    }

    // (as:u0-I0): initial compatibility.
    let xbar0 = data.xbar0();
    let u_at = data.value(xbar0).abs();
    let g_at = data.grad(xbar0).norm();
    let r_at = model.value_raw(xbar0, data.i0()).abs();
    checks.push(AssumptionCheck::from_worst(
        "asu0I0",
        "max u0 = u0(xbar0) = 0 and R(xbar0, I0) = 0",
        u_at.max(g_at).max(r_at) - COMPAT_TOL,
        Some(xbar0.iter().copied().collect()),
        Some(data.i0()),
        None,
    ));

    AssumptionReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn default_growth_constants() -> GrowthConstants {
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

    pub(crate) fn default_initial_constants() -> InitialConstants {
        InitialConstants {
            l0_under: 1.0,
            l0_bar: 1.0,
            l1_under: 0.5,
            l1_bar: 0.5,
            l2: 1.0,
            l3: 0.0,
        }
    }

    fn canonical_model() -> GrowthModel {
        GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, 1.0),
            1.0,
            None,
            default_growth_constants(),
        )
        .unwrap()
    }

    fn canonical_data() -> InitialData {
        InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
            0.0,
            1.0,
            default_initial_constants(),
        )
        .unwrap()
    }

    #[test]
    fn eval_growth_at_origin() {
        let m = canonical_model();
        let e = m.eval_growth(&DVector::from_element(1, 0.0), 1.0).unwrap();
        assert_relative_eq!(e.value, 0.0);
        assert_relative_eq!(e.grad_x[0], 1.0);
        assert_relative_eq!(e.hess_x[(0, 0)], -2.0);
        assert_relative_eq!(e.dr_di, -1.0);
    }

    #[test]
    fn eval_growth_annihilates_at_asymptotic_pair() {
        // The long-time maximizer/competition pair zeroes the rate.
        let m = canonical_model();
        let e = m.eval_growth(&DVector::from_element(1, 0.5), 1.25).unwrap();
        assert_relative_eq!(e.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn eval_growth_two_dimensional() {
        let m = GrowthModel::quadratic(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
            DVector::zeros(2),
            2.0,
            None,
            default_growth_constants(),
        )
        .unwrap();
        let e = m.eval_growth(&DVector::from_vec(vec![1.0, 1.0]), 2.0).unwrap();
        assert_relative_eq!(e.value, -2.5);
        assert_relative_eq!(e.grad_x[0], -1.0);
        assert_relative_eq!(e.grad_x[1], -4.0);
    }

    #[test]
    fn eval_growth_rejects_out_of_range_competition() {
        let m = canonical_model();
        let err = m.eval_growth(&DVector::zeros(1), 2.0).unwrap_err();
        assert!(matches!(err, Error::CompetitionOutOfRange { .. }));
        let err = m.eval_growth(&DVector::zeros(1), -0.1).unwrap_err();
        assert!(matches!(err, Error::CompetitionOutOfRange { .. }));
    }

    #[test]
    fn quadratic_i_max_default() {
        // I_max = i_shift + b . A1^{-1} b / 2 = 1 + 0.25.
        assert_relative_eq!(canonical_model().i_max(), 1.25);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let models = [
            canonical_model(),
            GrowthModel::quadratic(
                DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
                DVector::from_vec(vec![0.5, -0.2]),
                1.0,
                None,
                default_growth_constants(),
            )
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in &models {
            let d = m.dim();
            for _ in 0..100 {
                let x = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
                let i = rng.random_range(0.0..m.i_max());
                let e = m.eval_growth(&x, i).unwrap();
                let h = 1e-5;
                for k in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (m.value_raw(&xp, i) - m.value_raw(&xm, i)) / (2.0 * h);
                    let scale = 1.0 + e.grad_x[k].abs();
                    assert!((fd - e.grad_x[k]).abs() / scale < 1e-6);
                }
                let fd_i = (m.value_raw(&x, i + h) - m.value_raw(&x, i - h)) / (2.0 * h);
                assert!((fd_i - e.dr_di).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn canonical_instance_passes_all_checks() {
        let region = AxisBox::new(vec![-3.0], vec![4.0]).unwrap();
        let report = validate_assumptions(&canonical_model(), &canonical_data(), &region, 50);
        assert!(report.all_pass(), "{}", report.render_text());
        // The matrix inequalities hold with equality: zero margin.
        assert_relative_eq!(report.find("asrD2").unwrap().margin, 0.0);
        assert_relative_eq!(report.find("asuD2").unwrap().margin, 0.0);
    }

    #[test]
    fn inconsistent_concavity_constant_fails_with_margin() {
        // Declaring L1_bar = 0.6 demands D^2 u0 <= -1.2, but A0 = 1.
        let mut constants = default_initial_constants();
        constants.l1_bar = 0.6;
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            0.0,
            1.0,
            constants,
        )
        .unwrap();
        let region = AxisBox::new(vec![-3.0], vec![4.0]).unwrap();
        let report = validate_assumptions(&canonical_model(), &data, &region, 10);
        let check = report.find("asuD2").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        assert_relative_eq!(check.margin, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn initial_compatibility_passes_on_canonical() {
        let region = AxisBox::new(vec![-3.0], vec![4.0]).unwrap();
        let report = validate_assumptions(&canonical_model(), &canonical_data(), &region, 10);
        assert_eq!(report.find("asu0I0").unwrap().status, CheckStatus::Pass);
    }

    #[test]
    fn recenter_is_identity_on_normalized_data() {
        let out = recenter_initial(&canonical_data(), &canonical_model()).unwrap();
        assert_relative_eq!(out.xbar0()[0], 0.0);
        assert_relative_eq!(out.value(out.xbar0()), 0.0);
        assert_relative_eq!(out.i0(), 1.0);
    }

    #[test]
    fn recenter_removes_offset() {
        let data = InitialData::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            -3.0,
            1.0,
            default_initial_constants(),
        )
        .unwrap();
        let out = recenter_initial(&data, &canonical_model()).unwrap();
        match out.family() {
            InitialFamily::QuadraticU0 { offset, .. } => assert_relative_eq!(*offset, 0.0),
            _ => panic!("family changed"),
        }
    }

    struct WobblyProfile;

    impl InitialProfile for WobblyProfile {
        fn value(&self, x: &DVector<f64>) -> f64 {
            -x[0] * x[0] + 0.1 * x[0].sin()
        }
        fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, -2.0 * x[0] + 0.1 * x[0].cos())
        }
        fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -2.0 - 0.1 * x[0].sin())
        }
    }

    #[test]
    fn recenter_locates_wobbly_maximizer() {
        // Independent oracle: bisection on grad u0 = -2x + 0.1 cos x.
        let g = |x: f64| -2.0 * x + 0.1 * x.cos();
        let (mut lo, mut hi) = (0.0f64, 0.1f64);
        assert!(g(lo) > 0.0 && g(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle_root = 0.5 * (lo + hi);

        let data = InitialData::custom(
            Arc::new(WobblyProfile),
            1.0,
            DVector::from_element(1, 0.3),
            default_initial_constants(),
        )
        .unwrap();
        let model = GrowthModel::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            1.0,
            None,
            default_growth_constants(),
        )
        .unwrap();
        let out = recenter_initial(&data, &model).unwrap();
        assert_relative_eq!(out.xbar0()[0], oracle_root, epsilon = 1e-10);
        assert!(out.grad(out.xbar0()).norm() <= 1e-12);
        assert_relative_eq!(out.value(out.xbar0()), 0.0, epsilon = 1e-15);
        // The maximizer moved off the rate zero-set, so I0 was re-solved.
        assert_relative_eq!(model.value_raw(out.xbar0(), out.i0()), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn recenter_is_idempotent() {
        let data = InitialData::custom(
            Arc::new(WobblyProfile),
            1.0,
            DVector::from_element(1, 0.3),
            default_initial_constants(),
        )
        .unwrap();
        let model = canonical_model();
        let once = recenter_initial(&data, &model).unwrap();
        let twice = recenter_initial(&once, &model).unwrap();
        assert!((once.xbar0() - twice.xbar0()).norm() <= 1e-12);
        assert!((once.value(once.xbar0()) - twice.value(twice.xbar0())).abs() <= 1e-12);
        assert!((once.i0() - twice.i0()).abs() <= 1e-12);
    }

    #[test]
    fn solve_competition_matches_closed_form() {
        let m = canonical_model();
        // R(x, I) = -x^2 + x + 1 - I, so the root is I = 1 + x - x^2.
        for &(x, expected) in &[(0.0, 1.0), (0.5, 1.25), (0.25, 1.1875)] {
            let i = solve_competition_at(&m, &DVector::from_element(1, x)).unwrap();
            assert_relative_eq!(i, expected, epsilon = 1e-12);
        }
    }
}
