use insens_core::audit::{constant_scan, observability_ratio};
use insens_core::cascade::{
    insensitivity_derivative_adjoint, insensitivity_derivative_fd, solve_cascade_nonlinear,
    CascadeProblem,
};
use insens_core::control::{
    control_sweep, nonlinear_insensitize, ControlResult, ControlSpec, OuterSettings,
};
use insens_core::manufactured::{convergence_study, Manufactured};
use insens_core::sampling::{stream_rng, ModeBasis};
use insens_core::weights::WeightParams;
use insens_core::{l2_norm, Complex64, Grid, HalfStepField, Propagator, Trajectory};
use rayon::prelude::*;

use crate::config::{RunConfig, Which};
use crate::error::{CliError, CliResult};
use crate::output::{num, read_half_step, OutputDir};

/// Lines for the terminal; files go to the output directory.
pub type Summary = Vec<String>;

fn relative_drift(series: &[f64]) -> f64 {
    let first = series[0];
    let worst = series.iter().map(|q| (q - first).abs()).fold(0.0, f64::max);
    if first != 0.0 {
        worst / first.abs()
    } else {
        worst
    }
}

/// `⟨(D4 − D2)u, u⟩ + (Re ζ/2)·∫|u|⁴`.
fn energy(prop: &Propagator, zeta: Complex64, u: &[Complex64]) -> f64 {
    let grid = prop.grid();
    let hu = prop.operator().apply(u);
    let quad: f64 = hu.iter().zip(u).map(|(h, v)| -(h * v.conj()).re).sum();
    let quartic: f64 = u.iter().map(|v| v.norm_sqr().powi(2)).sum();
    (quad + 0.5 * zeta.re * quartic) * grid.dx()
}

pub fn simulate(cfg: &RunConfig, out: &OutputDir) -> CliResult<Summary> {
    let grid = cfg.grid()?;
    let prop = Propagator::new(&grid)?;
    let zeta = cfg.zeta();
    let u = prop.solve_forward_nonlinear(
        &cfg.initial_state(&grid),
        &cfg.source(&grid, Which::F0),
        zeta,
    )?;
    out.write_trajectory("u", &u)?;
    let norms = u.norms();
    let mass: Vec<f64> = norms.iter().map(|n| n * n).collect();
    let en: Vec<f64> = u
        .snapshots()
        .iter()
        .map(|s| energy(&prop, zeta, s))
        .collect();
    let rows: Vec<Vec<String>> = (0..=grid.steps())
        .map(|n| vec![num(grid.t(n)), num(mass[n]), num(en[n])])
        .collect();
    out.write_csv("series.csv", &["t", "mass", "energy"], &rows)?;
    let (dn, dm, de) = (
        relative_drift(&norms),
        relative_drift(&mass),
        relative_drift(&en),
    );
    out.write_csv(
        "summary.csv",
        &["quantity", "value"],
        &[
            vec!["max_norm_drift".into(), num(dn)],
            vec!["max_mass_drift".into(), num(dm)],
            vec!["max_energy_drift".into(), num(de)],
        ],
    )?;
    Ok(vec![format!(
        "simulate: {} steps, max relative drift of the L2 norm {dn:.3e}, of the energy {de:.3e}",
        grid.steps()
    )])
}

fn cascade_problem(cfg: &RunConfig, grid: &Grid, cmd: &str) -> CliResult<CascadeProblem> {
    let (omega, obs) = cfg.control_masks(cmd)?;
    Ok(CascadeProblem::new(grid, omega, obs)?
        .with_u0(cfg.initial_state(grid))?
        .with_f0(&cfg.source(grid, Which::F0))
        .with_f1(&cfg.source(grid, Which::F1))
        .with_zeta(cfg.zeta()))
}

fn synthesize(
    prop: &Propagator,
    problem: &CascadeProblem,
    specs: &[ControlSpec],
    outer: &OuterSettings,
) -> Vec<insens_core::Result<ControlResult>> {
    if problem.zeta == Complex64::new(0.0, 0.0) {
        control_sweep(prop, problem, specs)
    } else {
        specs
            .par_iter()
            .map(|s| nonlinear_insensitize(prop, problem, s, outer))
            .collect()
    }
}

fn mode_name(spec: &ControlSpec) -> &'static str {
    match spec.mode {
        insens_core::control::ControlMode::Plain => "plain",
        insens_core::control::ControlMode::CarlemanWeighted => "carleman_weighted",
    }
}

pub fn control(cfg: &RunConfig, out: &OutputDir) -> CliResult<Summary> {
    let grid = cfg.grid()?;
    let prop = Propagator::new(&grid)?;
    let problem = cascade_problem(cfg, &grid, "control")?;
    let specs = cfg.control_specs()?;
    let outer = cfg.outer_settings()?;
    let free = solve_cascade_nonlinear(&prop, &problem)?;
    let free_norm = l2_norm(&grid, &free.v0)?;
    let results = synthesize(&prop, &problem, &specs, &outer);

    let mut rows = Vec::new();
    let mut summary = vec![format!("control: uncontrolled |v(0)| = {free_norm:.6e}")];
    let mut failure = None;
    for (k, (spec, res)) in specs.iter().zip(results).enumerate() {
        match res {
            Ok(r) => {
                out.write_half_step(&format!("h_{k}"), &r.h)?;
                let sol = solve_cascade_nonlinear(&prop, &problem.clone().with_control(&r.h))?;
                write_profile(out, &format!("profile_{k}.csv"), &sol.u, &sol.v)?;
                let hist: Vec<Vec<String>> = r
                    .cg_residual_history
                    .iter()
                    .enumerate()
                    .map(|(i, v)| vec![i.to_string(), num(*v)])
                    .collect();
                out.write_csv(
                    &format!("cg_history_{k}.csv"),
                    &["iteration", "relative_residual"],
                    &hist,
                )?;
                let status = if r.converged {
                    "converged"
                } else {
                    "not_converged"
                };
                rows.push(vec![
                    k.to_string(),
                    num(spec.epsilon),
                    mode_name(spec).into(),
                    status.into(),
                    num(r.v0_norm),
                    num(free_norm),
                    r.cg_iterations.to_string(),
                    num(*r.cg_residual_history.last().unwrap_or(&0.0)),
                    r.outer_iterations.to_string(),
                    num(r.h.norm()),
                    num(r.j_insensitivity_bound),
                ]);
                summary.push(format!(
                    "  eps {:.1e}: |v(0)| = {:.6e}, {} CR iterations, {status}",
                    spec.epsilon, r.v0_norm, r.cg_iterations
                ));
            }
            Err(e) => {
                let mut row = vec![
                    k.to_string(),
                    num(spec.epsilon),
                    mode_name(spec).into(),
                    format!("error: {e}"),
                ];
                row.extend(std::iter::repeat_n(String::new(), 7));
                rows.push(row);
                summary.push(format!("  eps {:.1e}: failed: {e}", spec.epsilon));
                failure.get_or_insert(e);
            }
        }
    }
    out.write_csv(
        "controls.csv",
        &[
            "index",
            "epsilon",
            "mode",
            "status",
            "v0_norm",
            "free_v0_norm",
            "cg_iterations",
            "final_relative_residual",
            "outer_iterations",
            "h_norm",
            "j_insensitivity_bound",
        ],
        &rows,
    )?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

fn write_profile(out: &OutputDir, name: &str, u: &Trajectory, v: &Trajectory) -> CliResult<()> {
    let grid = u.grid();
    let (un, vn) = (u.norms(), v.norms());
    let rows: Vec<Vec<String>> = (0..=grid.steps())
        .map(|n| vec![num(grid.t(n)), num(un[n]), num(vn[n])])
        .collect();
    out.write_csv(name, &["t", "u_norm", "v_norm"], &rows)?;
    Ok(())
}

/// `log₂|D(τ₁)−D(τ₂)| / |D(τ₂)−D(τ₃)|` for halving steps; `NaN` when the
/// differences vanish, as they do when `J` is exactly quadratic in `τ`.
fn richardson_slope(fd: &[f64]) -> f64 {
    if fd.len() < 3 {
        return f64::NAN;
    }
    let (a, b) = ((fd[0] - fd[1]).abs(), (fd[1] - fd[2]).abs());
    if a == 0.0 || b == 0.0 {
        f64::NAN
    } else {
        (a / b).log2()
    }
}

pub fn insensitize_check(cfg: &RunConfig, out: &OutputDir) -> CliResult<Summary> {
    let grid = cfg.grid()?;
    let prop = Propagator::new(&grid)?;
    let problem = cascade_problem(cfg, &grid, "insensitize-check")?;
    let check = cfg.require_insensitize()?;
    let h: HalfStepField = match &check.control_file {
        Some(path) => read_half_step(path, &grid)?,
        None => {
            let mut spec = match &cfg.control {
                Some(_) => cfg.control_specs()?.remove(0),
                None => ControlSpec::plain(check.epsilon),
            };
            spec.epsilon = check.epsilon;
            let outer = if cfg.control.is_some() {
                cfg.outer_settings()?
            } else {
                OuterSettings::default()
            };
            synthesize(&prop, &problem, &[spec], &outer).remove(0)?.h
        }
    };
    let controlled = problem.clone().with_control(&h);
    let v0 = solve_cascade_nonlinear(&prop, &controlled)?.v0;
    let v0_norm = l2_norm(&grid, &v0)?;
    let baseline_problem = problem.clone().with_control(&HalfStepField::zeros(&grid));
    let v0_base = solve_cascade_nonlinear(&prop, &baseline_problem)?.v0;

    let basis = ModeBasis::new(&grid);
    let rows = (0..check.directions as u64)
        .into_par_iter()
        .map(|k| {
            let dir = basis.random_unit(&mut stream_rng(cfg.seed, k));
            let adj = insensitivity_derivative_adjoint(&grid, &dir, &v0)?;
            let base = insensitivity_derivative_adjoint(&grid, &dir, &v0_base)?;
            let fd = check
                .taus
                .iter()
                .map(|&t| insensitivity_derivative_fd(&prop, &controlled, &dir, t))
                .collect::<insens_core::Result<Vec<f64>>>()?;
            Ok((adj, base, fd))
        })
        .collect::<insens_core::Result<Vec<_>>>()?;

    let mut columns = vec![
        "direction".to_string(),
        "adjoint".into(),
        "baseline_adjoint".into(),
    ];
    columns.extend(check.taus.iter().map(|t| format!("fd_tau_{}", num(*t))));
    columns.extend(["max_fd_gap".to_string(), "richardson_slope".into()]);
    let (mut max_adj, mut max_base, mut max_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut table = Vec::new();
    for (k, (adj, base, fd)) in rows.iter().enumerate() {
        let gap = fd.iter().map(|d| (d - adj).abs()).fold(0.0, f64::max);
        max_adj = max_adj.max(adj.abs());
        max_base = max_base.max(base.abs());
        max_gap = max_gap.max(gap);
        let mut row = vec![k.to_string(), num(*adj), num(*base)];
        row.extend(fd.iter().map(|d| num(*d)));
        row.extend([num(gap), num(richardson_slope(fd))]);
        table.push(row);
    }
    let col_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    out.write_csv("insensitivity.csv", &col_refs, &table)?;
    let bound = max_adj <= v0_norm;
    let ratio = if max_adj > 0.0 {
        max_base / max_adj
    } else {
        f64::INFINITY
    };
    out.write_csv(
        "summary.csv",
        &["quantity", "value"],
        &[
            vec!["v0_norm".into(), num(v0_norm)],
            vec!["max_abs_derivative".into(), num(max_adj)],
            vec!["cauchy_schwarz_bound_holds".into(), bound.to_string()],
            vec!["baseline_max_abs_derivative".into(), num(max_base)],
            vec!["baseline_to_controlled_ratio".into(), num(ratio)],
            vec!["max_fd_adjoint_gap".into(), num(max_gap)],
        ],
    )?;
    Ok(vec![format!(
        "insensitize-check: max|dJ| = {max_adj:.3e} (|v(0)| = {v0_norm:.3e}, bound holds: {bound}), uncontrolled/controlled = {ratio:.3e}, max FD gap {max_gap:.2e}"
    )])
}

pub fn carleman_scan(cfg: &RunConfig, out: &OutputDir) -> CliResult<Summary> {
    let grid = cfg.grid()?;
    let prop = Propagator::new(&grid)?;
    let (omega, obs) = cfg.masks("carleman-scan")?;
    let audit = cfg.require_audit()?;
    let settings = cfg.sample_settings(audit);
    let x0 = cfg.x0();
    let scan = constant_scan(
        &prop,
        &audit.lambdas,
        &audit.mus,
        x0,
        &settings,
        &omega,
        &obs,
        audit.estimate,
    )?;
    let rows: Vec<Vec<String>> = scan
        .iter()
        .map(|r| {
            vec![
                num(r.lambda),
                num(r.mu),
                r.samples.to_string(),
                num(r.summary.max),
                num(r.summary.median),
                num(r.summary.min),
            ]
        })
        .collect();
    out.write_csv(
        "scan.csv",
        &[
            "lambda",
            "mu",
            "samples",
            "max_log_ratio",
            "median_log_ratio",
            "min_log_ratio",
        ],
        &rows,
    )?;
    let mut summary = vec![format!(
        "carleman-scan: {} cells × {} samples",
        scan.len(),
        settings.samples
    )];
    if audit.observability {
        let rho = cfg.rho(audit)?;
        let mut obs_rows = Vec::new();
        for &lambda in &audit.lambdas {
            for &mu in &audit.mus {
                let p = WeightParams::new(lambda, mu, x0, grid.horizon(), grid.length())?;
                let table = observability_ratio(&prop, &settings, &p, &omega, &obs, &rho)?;
                for r in &table.rows {
                    obs_rows.push(vec![
                        num(lambda),
                        num(mu),
                        r.sample_id.to_string(),
                        num(r.lhs.ln()),
                        num(r.rhs_obs.ln()),
                        num(r.rhs_source.ln()),
                        num(r.log_ratio),
                    ]);
                }
                summary.push(format!(
                    "  observability λ={lambda} μ={mu}: max ln ratio {:.4e}",
                    table.summary.max
                ));
            }
        }
        out.write_csv(
            "observability.csv",
            &[
                "lambda",
                "mu",
                "sample",
                "ln_lhs",
                "ln_rhs_obs",
                "ln_rhs_source",
                "log_ratio",
            ],
            &obs_rows,
        )?;
    }
    Ok(summary)
}

pub fn convergence(cfg: &RunConfig, out: &OutputDir) -> CliResult<Summary> {
    let conv = cfg.require_convergence()?;
    let sol = Manufactured {
        length: cfg.grid.length,
        amplitude: conv.amplitude,
        zeta: cfg.zeta(),
    };
    let levels: Vec<(usize, usize)> = conv.levels.iter().map(|l| (l[0], l[1])).collect();
    let study = convergence_study(cfg.grid.horizon, &levels, &sol)?;
    let rows: Vec<Vec<String>> = study
        .levels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let order = if k == 0 {
                String::new()
            } else {
                num(study.orders[k - 1])
            };
            vec![
                l.nodes.to_string(),
                l.steps.to_string(),
                num(l.dx),
                num(l.dt),
                num(l.error),
                order,
            ]
        })
        .collect();
    out.write_csv(
        "convergence.csv",
        &[
            "nodes",
            "steps",
            "dx",
            "dt",
            "max_l2_error",
            "observed_order",
        ],
        &rows,
    )?;
    if study.levels.iter().any(|l| !l.error.is_finite()) {
        return Err(CliError::Core(insens_core::Error::Divergence(
            "non-finite error in refinement study".into(),
        )));
    }
    Ok(vec![format!(
        "convergence: observed orders {:.3?}",
        study.orders
    )])
}
