//! JSON run configuration.
//!
//! A single document describes the model, the initial data, solver and
//! simulator options, and output settings. Unknown keys are rejected.
//! Only quadratic families are expressible in JSON; custom rates and
//! profiles are a library-level feature.

use hjc::constrained::SolveOptions;
use hjc::linalg::sym_eig_range;
use hjc::model::{AxisBox, GrowthConstants, GrowthModel, InitialConstants, InitialData};
use hjc::viscous::{Grid, SimForm, ViscousConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

fn default_seed() -> u64 {
    0
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub validation: ValidationSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub viscous: ViscousSpec,
    /// Seed for every randomized sampling step (sign checks, reports).
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// Growth-rate specification: `R(x, I) = -x . A1 x / 2 + b . x + i_shift - I`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Only `"quadratic"` is accepted.
    pub family: String,
    pub a1: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub i_shift: f64,
    /// Admissible competition ceiling; default `i_shift + b . A1^{-1} b / 2`.
    #[serde(default)]
    pub i_max: Option<f64>,
    #[serde(default)]
    pub constants: GrowthConstantsSpec,
}

/// Structural constants for the rate; omitted entries are derived from the
/// matrices (tight values).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GrowthConstantsSpec {
    #[serde(default)]
    pub k0_bar: Option<f64>,
    #[serde(default)]
    pub k1_bar: Option<f64>,
    #[serde(default)]
    pub k1_under: Option<f64>,
    #[serde(default)]
    pub k2_bar: Option<f64>,
    #[serde(default)]
    pub k2_under: Option<f64>,
    #[serde(default)]
    pub k3: Option<f64>,
    #[serde(default)]
    pub k4: Option<f64>,
}

/// Initial profile specification:
/// `u0(x) = -(x - peak) . A0 (x - peak) / 2 + offset`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Only `"quadratic"` is accepted.
    pub family: String,
    pub a0: Vec<Vec<f64>>,
    pub peak: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
    pub i0: f64,
    #[serde(default)]
    pub constants: InitialConstantsSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialConstantsSpec {
    #[serde(default)]
    pub l0_under: Option<f64>,
    #[serde(default)]
    pub l0_bar: Option<f64>,
    #[serde(default)]
    pub l1_under: Option<f64>,
    #[serde(default)]
    pub l1_bar: Option<f64>,
    #[serde(default)]
    pub l2: Option<f64>,
    #[serde(default)]
    pub l3: Option<f64>,
}

/// Constrained-solver options (see the library's `SolveOptions`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub t_final: f64,
    pub delta: Option<f64>,
    pub safety: f64,
    pub substeps: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub el_tol: f64,
    pub nodes_per_unit: f64,
    pub min_nodes: usize,
    pub richardson: bool,
    pub max_halvings: usize,
    pub strict_ball: bool,
    pub restart_tol: f64,
    /// Sample points per retained grid time for the sign check `u <= 0`.
    pub positivity_samples_per_time: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let o = SolveOptions::default();
        SolverSpec {
            t_final: 5.0,
            delta: o.delta,
            safety: o.safety,
            substeps: o.substeps,
            tol: o.tol,
            max_iter: o.max_iter,
            el_tol: o.el_tol,
            nodes_per_unit: o.nodes_per_unit,
            min_nodes: o.min_nodes,
            richardson: o.richardson,
            max_halvings: o.max_halvings,
            strict_ball: o.strict_ball,
            restart_tol: o.restart_tol,
            positivity_samples_per_time: 8,
        }
    }
}

/// Assumption-validation sampling region.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSpec {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub samples: usize,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec {
            box_lo: vec![],
            box_hi: vec![],
            samples: 200,
        }
    }
}

/// Oracle cross-validation options.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    /// Step of the reduced-ODE reference integration.
    pub dt: f64,
    /// Gauss-Legendre nodes for each closed-form Hessian.
    pub quad_nodes: usize,
    /// Exit-0 threshold on the maximal disagreement.
    pub tolerance: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            dt: 0.005,
            quad_nodes: 64,
            tolerance: 1e-5,
        }
    }
}

/// Viscous-simulation sweep options.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ViscousSpec {
    pub epsilons: Vec<f64>,
    pub grid_lo: Vec<f64>,
    pub grid_hi: Vec<f64>,
    pub h: f64,
    /// Time step shared by every run of the sweep; default is 90% of the
    /// tightest diffusion stability bound across the sweep, capped by an
    /// advective bound.
    pub dt: Option<f64>,
    /// `"density"` or `"hopf_cole"`.
    pub form: String,
    pub t_final: f64,
    /// Dump the full field every this many steps (0 disables dumps).
    pub dump_every: usize,
}

impl Default for ViscousSpec {
    fn default() -> Self {
        ViscousSpec {
            epsilons: vec![0.1, 0.05],
            grid_lo: vec![-3.0],
            grid_hi: vec![4.0],
            h: 0.01,
            dt: None,
            form: "density".into(),
            t_final: 1.0,
            dump_every: 0,
        }
    }
}

/// The quadratic example instance: `A0 = 1, A1 = 2, b = 1, I0 = 1` in one
/// dimension, with the tight constants that pin the value Hessian to -1.
pub fn canonical_preset() -> RunConfig {
    RunConfig {
        model: ModelSpec {
            family: "quadratic".into(),
            a1: vec![vec![2.0]],
            b: vec![1.0],
            i_shift: 1.0,
            i_max: None,
            constants: GrowthConstantsSpec::default(),
        },
        initial: InitialSpec {
            family: "quadratic".into(),
            a0: vec![vec![1.0]],
            peak: vec![0.0],
            offset: 0.0,
            i0: 1.0,
            constants: InitialConstantsSpec::default(),
        },
        solver: SolverSpec {
            t_final: 5.0,
            delta: Some(0.05),
            ..SolverSpec::default()
        },
        validation: ValidationSpec {
            box_lo: vec![-3.0],
            box_hi: vec![4.0],
            samples: 200,
        },
        oracle: OracleSpec::default(),
        viscous: ViscousSpec::default(),
        seed: 42,
    }
}

/// Fully resolved problem: model, initial data and solver options.
#[derive(Debug)]
pub struct BuiltProblem {
    pub model: GrowthModel,
    pub data: InitialData,
    pub solve_options: SolveOptions,
    pub validation_box: AxisBox,
}

fn matrix_from(rows: &[Vec<f64>], name: &str) -> anyhow::Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        anyhow::bail!("{name} must be a nonempty square matrix");
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn require_finite(values: impl IntoIterator<Item = f64>, what: &str) -> anyhow::Result<()> {
    for v in values {
        if !v.is_finite() {
            anyhow::bail!("{what} contains a non-finite value");
        }
    }
    Ok(())
}

impl RunConfig {
    /// Resolves the configuration into solver-ready objects, deriving any
    /// omitted structural constants from the matrices.
    pub fn build(&self) -> anyhow::Result<BuiltProblem> {
        if self.model.family != "quadratic" {
            anyhow::bail!(
                "model.family: only \"quadratic\" is supported by the command line \
                 (custom rates are a library feature), got \"{}\"",
                self.model.family
            );
        }
        if self.initial.family != "quadratic" {
            anyhow::bail!(
                "initial.family: only \"quadratic\" is supported by the command line, got \"{}\"",
                self.initial.family
            );
        }
        let a1 = matrix_from(&self.model.a1, "model.a1")?;
        let a0 = matrix_from(&self.initial.a0, "initial.a0")?;
        let b = DVector::from_vec(self.model.b.clone());
        let peak = DVector::from_vec(self.initial.peak.clone());
        require_finite(self.model.b.iter().copied(), "model.b")?;
        require_finite(self.initial.peak.iter().copied(), "initial.peak")?;
        require_finite(a1.iter().copied(), "model.a1")?;
        require_finite(a0.iter().copied(), "initial.a0")?;
        require_finite(
            [self.model.i_shift, self.initial.offset, self.initial.i0],
            "scalar parameters",
        )?;

        let (a1_lo, a1_hi) = sym_eig_range(&a1);
        let (a0_lo, a0_hi) = sym_eig_range(&a0);
        if a1_lo <= 0.0 || a0_lo <= 0.0 {
            anyhow::bail!("model.a1 and initial.a0 must be positive definite");
        }

        let gain = {
            let sol = a1.clone().lu().solve(&b).ok_or_else(|| {
                anyhow::anyhow!("model.a1 is numerically singular")
            })?;
            b.dot(&sol)
        };
        let i_m_natural = self.model.i_shift + 0.5 * gain;
        let c = &self.model.constants;
        let growth = GrowthConstants {
            k0_bar: c.k0_bar.unwrap_or((i_m_natural - self.initial.i0).max(1e-6)),
            k1_bar: c.k1_bar.unwrap_or(0.5 * a1_lo),
            k1_under: c.k1_under.unwrap_or(0.5 * a1_hi),
            k2_bar: c.k2_bar.unwrap_or(1.0),
            k2_under: c.k2_under.unwrap_or(1.0),
            k3: c.k3.unwrap_or(0.0),
            k4: c.k4.unwrap_or(0.0),
        };
        let lc = &self.initial.constants;
        let initial_constants = InitialConstants {
            l0_under: lc.l0_under.unwrap_or(1.0),
            l0_bar: lc.l0_bar.unwrap_or(1.0),
            l1_under: lc.l1_under.unwrap_or(0.5 * a0_hi),
            l1_bar: lc.l1_bar.unwrap_or(0.5 * a0_lo),
            l2: lc.l2.unwrap_or(a0_hi * (1.0 + peak.norm())),
            l3: lc.l3.unwrap_or(0.0),
        };

        let model = GrowthModel::quadratic(a1, b, self.model.i_shift, self.model.i_max, growth)?;
        let data = InitialData::quadratic(
            a0,
            peak,
            self.initial.offset,
            self.initial.i0,
            initial_constants,
        )?;

        let s = &self.solver;
        if !(s.t_final > 0.0) {
            anyhow::bail!("solver.t_final must be positive");
        }
        let solve_options = SolveOptions {
            delta: s.delta,
            safety: s.safety,
            substeps: s.substeps,
            tol: s.tol,
            max_iter: s.max_iter,
            el_tol: s.el_tol,
            nodes_per_unit: s.nodes_per_unit,
            min_nodes: s.min_nodes,
            richardson: s.richardson,
            max_halvings: s.max_halvings,
            strict_ball: s.strict_ball,
            restart_tol: s.restart_tol,
        };

        let d = model.dim();
        let validation_box = if self.validation.box_lo.is_empty() {
            let peak_abs = data.xbar0().abs().max();
            let w = 3.0 + 3.0 * peak_abs;
            AxisBox::new(vec![-w; d], vec![w; d])?
        } else {
            AxisBox::new(self.validation.box_lo.clone(), self.validation.box_hi.clone())?
        };
        if validation_box.dim() != d {
            anyhow::bail!("validation box dimension does not match the model");
        }

        Ok(BuiltProblem {
            model,
            data,
            solve_options,
            validation_box,
        })
    }

    /// Viscous configuration for one epsilon of the sweep. The time step is
    /// shared across the sweep so runs differ only through epsilon.
    pub fn viscous_config(&self, epsilon: f64) -> anyhow::Result<ViscousConfig> {
        let v = &self.viscous;
        let form = match v.form.as_str() {
            "density" => SimForm::Density,
            "hopf_cole" => SimForm::HopfCole,
            other => anyhow::bail!(
                "viscous.form must be \"density\" or \"hopf_cole\", got \"{other}\""
            ),
        };
        let grid = Grid::uniform(v.grid_lo.clone(), v.grid_hi.clone(), v.h)?;
        let dt = match v.dt {
            Some(dt) if dt > 0.0 => dt,
            Some(dt) => anyhow::bail!("viscous.dt must be positive, got {dt}"),
            None => {
                let eps_max = v
                    .epsilons
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let diffusive = v.h * v.h / (2.0 * grid.dim() as f64 * eps_max);
                let advective = v.h / 16.0;
                0.9 * diffusive.min(advective)
            }
        };
        Ok(ViscousConfig {
            epsilon,
            grid,
            dt,
            form,
            psi: None,
            snapshot_stride: if v.dump_every == 0 { usize::MAX } else { v.dump_every },
        })
    }
}
