use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ethena_ctl::fh_solver::{cc_integral_diagnostic, closed_form_a_mu0_tanh, value_fh};
use ethena_ctl::ih_solver::{stationary_moments, IHFeedback};
use ethena_ctl::simulator::{mc_objective, simulate_pair, HorizonKind, Policy, SimConfig};
use ethena_ctl::verifier::{run_battery, BatteryOptions, DOMINANCE_SCALES};
use ethena_ctl::{integrate_backward, solve_ih, validate, FHCoefficientPath, IHSolution};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot::{line_plot, Series};

pub const IH_SOLUTION_HEADER: [&str; 21] = [
    "alpha1",
    "alpha2",
    "alpha3",
    "alpha4",
    "alpha5",
    "alpha6",
    "gamma_N",
    "gamma_D",
    "gamma_0",
    "c_lin",
    "paper_C_formula",
    "kappa_star",
    "eig_re_1",
    "eig_re_2",
    "stat_mean_D",
    "stat_mean_N",
    "stat_var_D",
    "stat_var_N",
    "stat_cov_DN",
    "fixedpoint_residual",
    "iterations",
];

pub const FH_COEFFICIENTS_HEADER: [&str; 13] = [
    "t",
    "A",
    "B",
    "C",
    "E",
    "F",
    "G",
    "Gamma_N",
    "Gamma_D",
    "Gamma_0",
    "cc_ode",
    "cc_integral",
    "A_closed_form_mu0",
];

pub const PATHS_HEADER: [&str; 9] =
    ["t", "D_ih", "N_ih", "X_ih", "gamma_ih", "D_fh", "N_fh", "X_fh", "gamma_fh"];

pub const MC_HEADER: [&str; 6] =
    ["policy_label", "horizon_kind", "n_paths", "estimate", "std_error", "analytic_value"];

pub const RESIDUALS_HEADER: [&str; 6] =
    ["check_name", "max_abs_residual", "tolerance", "passed", "grid_spec", "notes"];

pub const LEDGER_HEADER: [&str; 4] = ["formula", "printed_value_or_profile", "certified_value", "gap"];

/// Shortest text that still carries 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    Ok(&cfg.out_dir)
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    Ok(prepare_out(cfg)?.join(name))
}

fn write_svg(cfg: &RunConfig, name: &str, svg: String) -> Result<(), CliError> {
    let path = out_file(cfg, name)?;
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_validate(cfg: &RunConfig) -> Result<(), CliError> {
    let report = validate(&cfg.model);
    println!("passed: {}", report.passed);
    println!("kappa_star: {}", report.kappa_star);
    for v in &report.violations {
        println!("violation: {} (observed {})", v.constraint, v.observed);
    }
    for v in &report.advisories {
        println!("advisory: {} (observed {})", v.constraint, v.observed);
    }
    report.into_result()?;
    Ok(())
}

fn solve_ih_checked(cfg: &RunConfig) -> Result<IHSolution, CliError> {
    Ok(solve_ih(&cfg.model)?)
}

fn solve_fh_checked(cfg: &RunConfig, steps: usize) -> Result<FHCoefficientPath, CliError> {
    cfg.model.lam_t()?;
    cfg.model.horizon()?;
    Ok(integrate_backward(&cfg.model, steps)?)
}

pub fn cmd_solve_ih(cfg: &RunConfig) -> Result<(), CliError> {
    let s = solve_ih_checked(cfg)?;
    let a = s.coefficients;
    let fb = s.feedback;
    let moments = stationary_moments(&s, &cfg.model).ok();
    let stat = |f: fn(&ethena_ctl::ih_solver::StationaryMoments) -> f64| {
        moments.as_ref().map_or(String::new(), |m| num(f(m)))
    };
    let row = vec![
        num(a.alpha1),
        num(a.alpha2),
        num(a.alpha3),
        num(a.alpha4),
        num(a.alpha5),
        num(a.alpha6),
        num(fb.gamma_n),
        num(fb.gamma_d),
        num(fb.gamma_0),
        num(fb.c_lin),
        num(s.c_closed_form),
        num(cfg.model.kappa_star()),
        num(s.eigen_real_parts[0]),
        num(s.eigen_real_parts[1]),
        stat(|m| m.mean[0]),
        stat(|m| m.mean[1]),
        stat(|m| m.covariance[0][0]),
        stat(|m| m.covariance[1][1]),
        stat(|m| m.covariance[0][1]),
        num(s.fixedpoint_residual),
        s.iterations.to_string(),
    ];
    let path = out_file(cfg, "ih_solution.csv")?;
    write_csv(&path, &IH_SOLUTION_HEADER, &[row])?;
    println!(
        "gamma_N={:.6} gamma_D={:.6} gamma_0={:.6} eig_re={:?} ({} iterations)",
        fb.gamma_n, fb.gamma_d, fb.gamma_0, s.eigen_real_parts, s.iterations
    );
    if s.unstable {
        println!("warning: closed loop is not stable; stationary moments omitted");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn write_fh_coefficients(cfg: &RunConfig, path: &FHCoefficientPath) -> Result<(), CliError> {
    let cc = cc_integral_diagnostic(&cfg.model, path);
    let mu0 = cfg.model.mu() == 0.0;
    let rows = (0..path.len())
        .map(|i| {
            let closed = if mu0 {
                num(closed_form_a_mu0_tanh(path.grid[i], &cfg.model)?)
            } else {
                String::new()
            };
            Ok(vec![
                num(path.grid[i]),
                num(path.a[i]),
                num(path.b[i]),
                num(path.c[i]),
                num(path.e[i]),
                num(path.f[i]),
                num(path.g[i]),
                num(path.gamma_n[i]),
                num(path.gamma_d[i]),
                num(path.gamma_0[i]),
                num(cc[i].cc_ode),
                num(cc[i].cc_integral),
                closed,
            ])
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let file = out_file(cfg, "fh_coefficients.csv")?;
    write_csv(&file, &FH_COEFFICIENTS_HEADER, &rows)?;
    println!("wrote {}", file.display());
    Ok(())
}

pub fn cmd_solve_fh(cfg: &RunConfig) -> Result<(), CliError> {
    let path = solve_fh_checked(cfg, cfg.fh_steps)?;
    let last = path.len() - 1;
    println!(
        "steps={} V(0,d0,n0)={:.10} Gamma_N(T)={}",
        path.step_count,
        value_fh(&path, 0.0, cfg.model.d0, cfg.model.n0)?,
        path.gamma_n[last]
    );
    write_fh_coefficients(cfg, &path)
}

pub fn cmd_plot_gamma(cfg: &RunConfig) -> Result<(), CliError> {
    let ih = solve_ih_checked(cfg)?;
    let path = solve_fh_checked(cfg, cfg.fh_steps)?;
    write_fh_coefficients(cfg, &path)?;
    if !cfg.emit_plots {
        return Ok(());
    }
    let t = path.grid.clone();
    let flat = |v: f64| vec![v; t.len()];
    let IHFeedback { gamma_n, gamma_d, gamma_0, .. } = ih.feedback;
    for (file, name, fh, ih_value) in [
        ("fig1_gamma0.svg", "Gamma_0", &path.gamma_0, gamma_0),
        ("fig1_gammaN.svg", "Gamma_N", &path.gamma_n, gamma_n),
        ("fig1_gammaD.svg", "Gamma_D", &path.gamma_d, gamma_d),
    ] {
        let svg = line_plot(
            &format!("{name}: finite vs infinite horizon"),
            "t",
            name,
            &[
                Series::finite(format!("{name}(t), T={}", path.horizon), t.clone(), fh.clone()),
                Series::infinite("stationary", t.clone(), flat(ih_value)),
            ],
        );
        write_svg(cfg, file, svg)?;
    }
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let ih = solve_ih_checked(cfg)?;
    let path = Arc::new(solve_fh_checked(cfg, cfg.fh_steps)?);
    let (ih_rec, fh_rec) = simulate_pair(&cfg.model, &ih, &path, &cfg.sim)?;
    let gamma = |g: &[f64], i: usize| g.get(i).map_or(String::new(), |&v| num(v));
    let rows: Vec<Vec<String>> = (0..ih_rec.t.len())
        .map(|i| {
            vec![
                num(ih_rec.t[i]),
                num(ih_rec.d[i]),
                num(ih_rec.n[i]),
                num(ih_rec.x[i]),
                gamma(&ih_rec.gamma, i),
                num(fh_rec.d[i]),
                num(fh_rec.n[i]),
                num(fh_rec.x[i]),
                gamma(&fh_rec.gamma, i),
            ]
        })
        .collect();
    let file = out_file(cfg, "paths.csv")?;
    write_csv(&file, &PATHS_HEADER, &rows)?;
    let last = ih_rec.t.len() - 1;
    println!(
        "seed={} N_T: finite={:.6} infinite={:.6}",
        cfg.sim.seed, fh_rec.n[last], ih_rec.n[last]
    );
    println!("wrote {}", file.display());

    if cfg.emit_plots {
        for (file, name, fh, ihv) in [
            ("fig2_D.svg", "D", &fh_rec.d, &ih_rec.d),
            ("fig2_N.svg", "N", &fh_rec.n, &ih_rec.n),
            ("fig2_X.svg", "X", &fh_rec.x, &ih_rec.x),
        ] {
            let svg = line_plot(
                &format!("{name}: one sample path (seed {})", cfg.sim.seed),
                "t",
                name,
                &[
                    Series::finite("finite horizon", fh_rec.t.clone(), fh.clone()),
                    Series::infinite("infinite horizon", ih_rec.t.clone(), ihv.clone()),
                ],
            );
            write_svg(cfg, file, svg)?;
        }
    }
    Ok(())
}

pub fn cmd_mc(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.model;
    let path = Arc::new(solve_fh_checked(cfg, cfg.fh_steps)?);
    let ih = solve_ih_checked(cfg)?;
    let mut rows = Vec::new();

    let optimal = Policy::FiniteHorizon(Arc::clone(&path));
    let value = value_fh(&path, 0.0, p.d0, p.n0)?;
    let mut fh_policies = vec![(optimal.clone(), Some(value))];
    fh_policies.extend(DOMINANCE_SCALES.iter().map(|&s| (optimal.clone().scaled(s), None)));
    for (policy, analytic) in fh_policies {
        let est = mc_objective(p, &policy, &cfg.sim, HorizonKind::Finite)?;
        println!("{}: {:.6e} +- {:.2e}", policy.label(), est.estimate, est.std_error);
        rows.push(vec![
            policy.label(),
            HorizonKind::Finite.as_str().into(),
            est.n_paths.to_string(),
            num(est.estimate),
            num(est.std_error),
            analytic.map_or(String::new(), num),
        ]);
    }

    let horizon = cfg.mc_ih_horizon.unwrap_or(5.0 / p.rho);
    let ih_sim = SimConfig {
        dt: cfg.mc_ih_dt,
        steps: (horizon / cfg.mc_ih_dt).round().max(1.0) as usize,
        ..cfg.sim
    };
    let policy = Policy::InfiniteHorizon(ih.feedback);
    let est = mc_objective(p, &policy, &ih_sim, HorizonKind::Infinite)?;
    println!(
        "{} (truncated at {}): {:.6e} +- {:.2e}",
        policy.label(),
        ih_sim.horizon(),
        est.estimate,
        est.std_error
    );
    rows.push(vec![
        policy.label(),
        HorizonKind::Infinite.as_str().into(),
        est.n_paths.to_string(),
        num(est.estimate),
        num(est.std_error),
        num(ih.value(p.d0, p.n0)),
    ]);

    let file = out_file(cfg, "mc_objective.csv")?;
    write_csv(&file, &MC_HEADER, &rows)?;
    println!("wrote {}", file.display());
    Ok(())
}

/// Steps of the finite-horizon certificate: 2000 per unit of horizon, at
/// least 2000.
fn certificate_steps(horizon: f64) -> usize {
    ((2000.0 * horizon).round() as usize).max(2000)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let horizon = cfg.model.horizon()?;
    cfg.model.lam_t()?;
    let mut ih = solve_ih_checked(cfg)?;
    if let Some(offsets) = cfg.alpha_offsets {
        let a = &mut ih.coefficients;
        for (coef, off) in [
            &mut a.alpha1,
            &mut a.alpha2,
            &mut a.alpha3,
            &mut a.alpha4,
            &mut a.alpha5,
            &mut a.alpha6,
        ]
        .into_iter()
        .zip(offsets)
        {
            *coef += off;
        }
        ih.feedback = IHFeedback::from_coefficients(&ih.coefficients, &cfg.model);
        println!("note: coefficients perturbed by {offsets:?}");
    }
    let options = BatteryOptions {
        fh_steps: certificate_steps(horizon),
        sim: cfg.sim,
        tolerance_overrides: cfg.verify_tolerances.clone(),
        ..BatteryOptions::default()
    };
    let outcome = run_battery(&cfg.model, &ih, &options)?;

    let rows: Vec<Vec<String>> = outcome
        .reports
        .iter()
        .map(|r| {
            let notes = if r.asserted { r.notes.clone() } else { format!("[informational] {}", r.notes) };
            vec![
                r.check_name.clone(),
                num(r.max_abs_residual),
                num(r.tolerance),
                r.passed.to_string(),
                r.grid_spec.clone(),
                notes,
            ]
        })
        .collect();
    let file = out_file(cfg, "residuals.csv")?;
    write_csv(&file, &RESIDUALS_HEADER, &rows)?;
    println!("wrote {}", file.display());

    let ledger: Vec<Vec<String>> = outcome
        .ledger
        .iter()
        .map(|e| {
            vec![
                e.formula.clone(),
                e.printed_value_or_profile.clone(),
                e.certified_value.clone(),
                num(e.gap),
            ]
        })
        .collect();
    let file = out_file(cfg, "discrepancy_ledger.csv")?;
    write_csv(&file, &LEDGER_HEADER, &ledger)?;
    println!("wrote {}", file.display());

    for r in &outcome.reports {
        let status = match (r.passed, r.asserted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!(
            "{status} {:<32} {:>12.4e} (tol {:.1e})",
            r.check_name, r.max_abs_residual, r.tolerance
        );
    }
    if outcome.all_asserted_pass() {
        Ok(())
    } else {
        Err(CliError::Domain("verification failed".into()))
    }
}

/// `solve-ih`, `solve-fh`, `plot-gamma`, `simulate` and `verify` in order,
/// stopping at the first failure.
pub fn cmd_reproduce(cfg: &RunConfig) -> Result<(), CliError> {
    cmd_solve_ih(cfg)?;
    cmd_solve_fh(cfg)?;
    cmd_plot_gamma(cfg)?;
    cmd_simulate(cfg)?;
    cmd_verify(cfg)
}
