//! The four subcommands: validate, solve, oracle, viscous.

use std::path::Path;

use hjc::constrained::{positivity_samples, residuals, solve_constrained, ConstrainedSolution};
use hjc::linalg::sym_eigen;
use hjc::model::validate_assumptions;
use hjc::quadratic::{solve_quadratic_system, QuadraticProblem, QuadraticSolveOptions};
use hjc::viscous::{concentration_diagnostics, simulate_viscous, DiagnosticsReport, ViscousSeries};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::config::{BuiltProblem, RunConfig};
use crate::output::{fmt, write_atomic, Csv};
use crate::ExitWith;

/// Checks every structural assumption and writes the report as text and JSON.
/// Exit 0 only when every check passes.
pub fn cmd_validate(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<i32> {
    let built = cfg.build()?;
    let report = validate_assumptions(
        &built.model,
        &built.data,
        &built.validation_box,
        cfg.validation.samples,
    );
    let text = report.render_text();
    print!("{text}");
    write_atomic(&out_dir.join("report.txt"), &text)?;
    write_atomic(
        &out_dir.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    if report.all_pass() {
        Ok(0)
    } else {
        let names: Vec<&str> = report.failed().iter().map(|c| c.name.as_str()).collect();
        Err(ExitWith::new(1, format!("assumption checks failed: {}", names.join(", "))).into())
    }
}

fn run_validation_gate(cfg: &RunConfig, built: &BuiltProblem) -> anyhow::Result<()> {
    let report = validate_assumptions(
        &built.model,
        &built.data,
        &built.validation_box,
        cfg.validation.samples,
    );
    if !report.all_pass() {
        let names: Vec<&str> = report.failed().iter().map(|c| c.name.as_str()).collect();
        return Err(ExitWith::new(
            1,
            format!(
                "assumption validation failed ({}); fix the configuration or pass --skip-validate",
                names.join(", ")
            ),
        )
        .into());
    }
    Ok(())
}

/// Solves the constrained problem, writing the solution time series as CSV
/// and a JSON summary with final values, residuals and iteration traces.
pub fn cmd_solve(cfg: &RunConfig, out_dir: &Path, skip_validate: bool) -> anyhow::Result<i32> {
    let built = cfg.build()?;
    if !skip_validate {
        run_validation_gate(cfg, &built)?;
    }

    let sol = match solve_constrained(
        &built.model,
        &built.data,
        cfg.solver.t_final,
        &built.solve_options,
    ) {
        Ok(sol) => sol,
        Err(e) => {
            let payload = json!({
                "error": { "kind": error_kind(&e), "message": e.to_string() }
            });
            write_atomic(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&payload)?)?;
            return Err(e.into());
        }
    };

    let samples = positivity_samples(
        &sol,
        &built.model,
        &built.data,
        cfg.solver.positivity_samples_per_time,
        cfg.seed,
    );
    let report = residuals(&sol, &built.model, &built.data, &samples)?;

    let d = sol.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..d).map(|k| format!("xbar_{k}")));
    header.push("I".into());
    header.extend((0..d).map(|k| format!("hess_eig_{k}")));
    header.extend(["res_R".into(), "res_grad".into(), "res_maxu".into()]);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for k in 0..sol.times().len() {
        let mut row = vec![fmt(sol.times()[k])];
        row.extend(sol.xbar()[k].iter().map(|v| fmt(*v)));
        row.push(fmt(sol.competition()[k]));
        let eig = sym_eigen(&sol.hessians()[k]);
        row.extend(eig.values.iter().map(|v| fmt(*v)));
        let res = &report.per_time[k];
        row.extend([fmt(res.rate), fmt(res.gradient), fmt(res.value)]);
        csv.row(&row);
    }
    write_atomic(&out_dir.join("solution.csv"), &csv.finish())?;

    let last = sol.times().len() - 1;
    let summary = json!({
        "t_final": sol.t_final(),
        "final": {
            "t": sol.times()[last],
            "xbar": sol.xbar()[last].iter().copied().collect::<Vec<f64>>(),
            "i": sol.competition()[last],
            "hess_eigenvalues": sym_eigen(&sol.hessians()[last]).values.iter().copied().collect::<Vec<f64>>(),
        },
        "residuals": {
            "sup_rate": report.sup_rate,
            "sup_gradient": report.sup_gradient,
            "sup_value": report.sup_value,
            "max_positive_part": report.max_positive_part,
            "monotonicity_defect": report.monotonicity_defect,
        },
        "intervals": sol.traces().len(),
        "traces": sol.traces(),
        "validation": if skip_validate { "skipped" } else { "passed" },
        "seed": cfg.seed,
    });
    write_atomic(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "solved to t = {}: xbar = {:?}, I = {}, residual sups (R, grad, u) = ({:.3e}, {:.3e}, {:.3e})",
        sol.t_final(),
        sol.xbar()[last].as_slice(),
        sol.competition()[last],
        report.sup_rate,
        report.sup_gradient,
        report.sup_value
    );
    Ok(0)
}

fn error_kind(e: &hjc::Error) -> &'static str {
    match e {
        hjc::Error::CompetitionOutOfRange { .. } => "competition_out_of_range",
        hjc::Error::Inadmissible { .. } => "inadmissible",
        hjc::Error::NewtonStalled { .. } => "newton_stalled",
        hjc::Error::NonconcaveInput { .. } => "nonconcave_input",
        hjc::Error::DegenerateHessian { .. } => "degenerate_hessian",
        hjc::Error::IntervalTooLong { .. } => "interval_too_long",
        hjc::Error::RestartInconsistent { .. } => "restart_inconsistent",
        hjc::Error::Config(_) => "config",
        hjc::Error::CflViolation { .. } => "cfl_violation",
        hjc::Error::BlowUp { .. } => "blow_up",
    }
}

/// Extracts the closed-form instance from the configuration; only quadratic
/// data normalized to a zero-peak profile is eligible.
fn quadratic_problem(cfg: &RunConfig, built: &BuiltProblem) -> anyhow::Result<QuadraticProblem> {
    let peak = DVector::from_vec(cfg.initial.peak.clone());
    if peak.abs().max() > 1e-12 || cfg.initial.offset.abs() > 1e-12 {
        anyhow::bail!(
            "the closed-form reference requires the initial profile peaked at the origin with zero offset"
        );
    }
    if (cfg.model.i_shift - cfg.initial.i0).abs() > 1e-12 {
        anyhow::bail!("the closed-form reference requires model.i_shift = initial.i0");
    }
    let d = built.model.dim();
    let a0 = DMatrix::from_fn(d, d, |i, j| cfg.initial.a0[i][j]);
    let a1 = DMatrix::from_fn(d, d, |i, j| cfg.model.a1[i][j]);
    Ok(QuadraticProblem::new(
        a0,
        a1,
        DVector::from_vec(cfg.model.b.clone()),
        cfg.initial.i0,
    )?)
}

/// Runs the general solver and the closed-form reduced system side by side
/// and writes per-time columns for both plus their differences. Exit 0 only
/// when the largest difference stays within the configured tolerance.
pub fn cmd_oracle(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<i32> {
    let built = cfg.build()?;
    let prob = quadratic_problem(cfg, &built)?;

    let sol = solve_constrained(
        &built.model,
        &built.data,
        cfg.solver.t_final,
        &built.solve_options,
    )?;
    let reference = solve_quadratic_system(
        &prob,
        cfg.solver.t_final,
        cfg.oracle.dt,
        &QuadraticSolveOptions {
            quad_nodes: cfg.oracle.quad_nodes,
        },
    )?;

    let d = sol.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..d).map(|k| format!("xbar_solver_{k}")));
    header.extend((0..d).map(|k| format!("xbar_oracle_{k}")));
    header.extend(["i_solver".into(), "i_oracle".into(), "dxbar".into(), "di".into()]);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);

    let mut max_dx: f64 = 0.0;
    let mut max_di: f64 = 0.0;
    for (k, &t) in sol.times().iter().enumerate() {
        let xs = &sol.xbar()[k];
        let is = sol.competition()[k];
        let xo = reference.xbar_at(t);
        let io = reference.competition_at(t);
        let dx = (xs - &xo).abs().max();
        let di = (is - io).abs();
        max_dx = max_dx.max(dx);
        max_di = max_di.max(di);
        let mut row = vec![fmt(t)];
        row.extend(xs.iter().map(|v| fmt(*v)));
        row.extend(xo.iter().map(|v| fmt(*v)));
        row.extend([fmt(is), fmt(io), fmt(dx), fmt(di)]);
        csv.row(&row);
    }
    write_atomic(&out_dir.join("oracle.csv"), &csv.finish())?;
    let summary = json!({
        "t_final": cfg.solver.t_final,
        "max_dxbar": max_dx,
        "max_di": max_di,
        "tolerance": cfg.oracle.tolerance,
        "within_tolerance": max_dx.max(max_di) <= cfg.oracle.tolerance,
    });
    write_atomic(&out_dir.join("oracle_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "oracle comparison over [0, {}]: max |dxbar| = {max_dx:.3e}, max |dI| = {max_di:.3e} (tolerance {})",
        cfg.solver.t_final, cfg.oracle.tolerance
    );
    if max_dx.max(max_di) <= cfg.oracle.tolerance {
        Ok(0)
    } else {
        Err(ExitWith::new(
            1,
            format!(
                "solver and closed form disagree beyond tolerance: max diff {:.3e} > {:.3e}",
                max_dx.max(max_di),
                cfg.oracle.tolerance
            ),
        )
        .into())
    }
}

/// Runs the viscous sweep (one simulation per epsilon, concurrently up to
/// `HJC_THREADS`), writes per-epsilon diagnostics CSVs and a cross-epsilon
/// summary.
pub fn cmd_viscous(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<i32> {
    let built = cfg.build()?;
    if cfg.viscous.epsilons.is_empty() {
        anyhow::bail!("viscous.epsilons must list at least one viscosity");
    }
    if built.model.dim() > 2 {
        anyhow::bail!("the viscous simulator covers one and two dimensions only");
    }

    // Shared constrained reference over the sweep horizon.
    let reference = solve_constrained(
        &built.model,
        &built.data,
        cfg.viscous.t_final,
        &built.solve_options,
    )?;

    let cap = std::env::var("HJC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(cfg.viscous.epsilons.len().max(1));

    let mut results: Vec<(f64, hjc::Result<ViscousSeries>)> = Vec::new();
    for batch in cfg.viscous.epsilons.chunks(cap) {
        let mut outcomes: Vec<Option<(f64, hjc::Result<ViscousSeries>)>> =
            (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| -> anyhow::Result<()> {
            let mut handles = Vec::new();
            for &eps in batch {
                let viscous_cfg = cfg.viscous_config(eps)?;
                let model = &built.model;
                let data = &built.data;
                handles.push(scope.spawn(move || {
                    (eps, simulate_viscous(model, data, &viscous_cfg, cfg.viscous.t_final))
                }));
            }
            for (slot, handle) in handles.into_iter().enumerate() {
                outcomes[slot] = Some(handle.join().expect("simulation thread panicked"));
            }
            Ok(())
        })?;
        results.extend(outcomes.into_iter().flatten());
    }

    let mut reports: Vec<DiagnosticsReport> = Vec::new();
    for (eps, outcome) in results {
        let series = outcome?;
        let viscous_cfg = cfg.viscous_config(eps)?;
        let report = concentration_diagnostics(&series, &reference, &viscous_cfg);
        write_diagnostics_csv(&report, &series, out_dir)?;
        if cfg.viscous.dump_every > 0 {
            write_field_dump(&series, out_dir)?;
        }
        reports.push(report);
    }

    // Cross-epsilon comparison, largest viscosity first.
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[b].epsilon.total_cmp(&reports[a].epsilon));
    let per_eps: Vec<serde_json::Value> = order
        .iter()
        .map(|&i| {
            let r = &reports[i];
            json!({
                "epsilon": r.epsilon,
                "final_i_err": r.final_i_err,
                "final_argmax_err": r.final_argmax_err,
                "sup_i_err": r.sup_i_err,
                "sup_argmax_err": r.sup_argmax_err,
            })
        })
        .collect();
    let shrinking = order.windows(2).all(|w| {
        reports[w[1]].final_i_err < reports[w[0]].final_i_err
            && reports[w[1]].final_argmax_err < reports[w[0]].final_argmax_err
    });
    let summary = json!({
        "t_final": cfg.viscous.t_final,
        "form": cfg.viscous.form,
        "per_epsilon": per_eps,
        "errors_shrink_with_epsilon": shrinking,
    });
    write_atomic(&out_dir.join("viscous_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    for &i in &order {
        let r = &reports[i];
        println!(
            "eps = {:<6}: |I_eps - I|(T) = {:.4e}, |argmax - xbar|(T) = {:.4e}",
            r.epsilon, r.final_i_err, r.final_argmax_err
        );
    }
    Ok(0)
}

fn eps_tag(eps: f64) -> String {
    format!("{eps}").replace('.', "p")
}

fn write_diagnostics_csv(
    report: &DiagnosticsReport,
    series: &ViscousSeries,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let d = series.grid.dim();
    let mut header: Vec<String> = vec!["t".into(), "i_eps".into()];
    header.extend((0..d).map(|k| format!("argmax_{k}")));
    header.push("max_eps_log_n".into());
    header.extend(["err_argmax".into(), "err_i".into(), "rho_hat".into(), "rho_ref".into()]);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for (rec, row) in series.records.iter().zip(&report.rows) {
        let mut cells = vec![fmt(rec.t), fmt(rec.i_eps)];
        cells.extend(rec.argmax.iter().map(|v| fmt(*v)));
        cells.push(fmt(rec.max_eps_log_n));
        cells.extend([fmt(row.argmax_err), fmt(row.i_err), fmt(row.rho_hat), fmt(row.rho_ref)]);
        csv.row(&cells);
    }
    write_atomic(
        &out_dir.join(format!("viscous_eps{}.csv", eps_tag(series.epsilon))),
        &csv.finish(),
    )?;
    Ok(())
}

/// Flat text dump: one row per grid point and snapshot, coordinates then value.
fn write_field_dump(series: &ViscousSeries, out_dir: &Path) -> anyhow::Result<()> {
    let d = series.grid.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..d).map(|k| format!("x_{k}")));
    header.push("value".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for snap in &series.snapshots {
        for idx in 0..series.grid.len() {
            let x = series.grid.point(idx);
            let mut cells = vec![fmt(snap.t)];
            cells.extend(x.iter().map(|v| fmt(*v)));
            cells.push(fmt(snap.field[idx]));
            csv.row(&cells);
        }
    }
    write_atomic(
        &out_dir.join(format!("fields_eps{}.csv", eps_tag(series.epsilon))),
        &csv.finish(),
    )?;
    Ok(())
}

/// Convenience wrapper used by integration tests: full solve plus residuals.
pub fn solve_with_report(
    cfg: &RunConfig,
) -> anyhow::Result<(ConstrainedSolution, hjc::constrained::ResidualReport)> {
    let built = cfg.build()?;
    let sol = solve_constrained(
        &built.model,
        &built.data,
        cfg.solver.t_final,
        &built.solve_options,
    )?;
    let samples = positivity_samples(
        &sol,
        &built.model,
        &built.data,
        cfg.solver.positivity_samples_per_time,
        cfg.seed,
    );
    let report = residuals(&sol, &built.model, &built.data, &samples)?;
    Ok((sol, report))
}
