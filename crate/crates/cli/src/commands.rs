//! The `simulate`, `solve` and `optimize` subcommands.

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;
use teugels_see::cauchy::{build_problem, run, simulate_noise, CoefficientCheck};
use teugels_see::control::{cost, CostEstimate};
use teugels_see::levy::{validate_triplet, ValidationReport};
use teugels_see::see::{
    apriori_estimate_check, check_bounds, check_coercivity, ito_energy_residual, solve_ensemble,
    BoundReport, CoercivityConstants, CoercivityReport, EstimateReport,
};
use teugels_see::teugels::{
    build_moment_functional, realized_covariation, CovariationReport, PolynomialBasis,
};

use crate::config::{ExperimentConfig, Format};
use crate::output::{float, numbered, Sink};

#[derive(Serialize)]
struct SimulateReport<'a> {
    paths: usize,
    steps: usize,
    seed: u64,
    moment_conditions: ValidationReport,
    basis_dim: usize,
    orthonormality_error: f64,
    basis: &'a PolynomialBasis,
    worst_z_score: f64,
    worst_martingale_z_score: f64,
    covariation: CovariationReport,
}

/// Lévy paths, Teugels basis, increments and covariation diagnostics.
pub fn simulate(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let triplet = cfg.triplet()?;
    let moment_conditions = validate_triplet(&triplet, cfg.levy.lambda0);
    let grid = cfg.time_grid()?;
    let sample = simulate_noise(
        &triplet,
        cfg.teugels.k_max,
        cfg.teugels.rank_tolerance,
        grid,
        cfg.ensemble.paths,
        cfg.ensemble.seed,
    )?;
    let functional = build_moment_functional(&triplet, cfg.teugels.k_max)?;
    let covariation = realized_covariation(&sample.increments);
    let d = sample.basis.dim();
    info!(
        "simulated {} paths, Teugels basis of dimension {d}",
        cfg.ensemble.paths
    );

    if cfg.outputs.wants(Format::Csv) {
        let coefficients = sample.basis.coefficients();
        sink.csv(
            "basis.csv",
            &numbered("c", d).collect::<Vec<_>>(),
            (0..d).map(|i| (0..d).map(|j| float(coefficients[(i, j)])).collect()),
        )?;
        let header: Vec<String> = ["path", "step", "dW", "dW_levy", "jump_sizes"]
            .map(String::from)
            .into();
        let rows = sample.bundles.iter().enumerate().flat_map(|(p, b)| {
            (0..grid.steps()).map(move |n| {
                let jumps: Vec<String> = b.jumps(n).iter().map(|&x| float(x)).collect();
                vec![
                    p.to_string(),
                    n.to_string(),
                    float(b.dw[n]),
                    float(b.dw_levy[n]),
                    jumps.join(";"),
                ]
            })
        });
        sink.csv("bundles.csv", &header, rows)?;
        let mut header: Vec<String> = vec!["path".into(), "step".into()];
        header.extend((1..=d).map(|i| format!("H{i}")));
        let inc = &sample.increments;
        let rows = (0..inc.n_paths()).flat_map(|p| {
            (0..grid.steps()).map(move |n| {
                let mut row = vec![p.to_string(), n.to_string()];
                row.extend(inc.step(p, n).iter().map(|&h| float(h)));
                row
            })
        });
        sink.csv("increments.csv", &header, rows)?;
    }
    if cfg.outputs.wants(Format::Json) {
        let report = SimulateReport {
            paths: cfg.ensemble.paths,
            steps: grid.steps(),
            seed: cfg.ensemble.seed,
            moment_conditions,
            basis_dim: d,
            orthonormality_error: sample.basis.orthonormality_error(&functional),
            basis: &sample.basis,
            worst_z_score: covariation.worst_z_score(),
            worst_martingale_z_score: covariation.worst_martingale_z_score(),
            covariation,
        };
        sink.json("covariation.json", &report)?;
    }
    Ok(true)
}

#[derive(Serialize)]
struct SolveReport {
    constants: CoercivityConstants,
    coefficients: CoefficientCheck,
    coercivity: CoercivityReport,
    bounds: BoundReport,
    cost: CostEstimate,
    energy_residual: f64,
    apriori: EstimateReport,
}

/// Forward solve under the configured starting control.
pub fn solve(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let grid = cfg.time_grid()?;
    let built = build_problem(
        &cfg.coefficients,
        cfg.space,
        grid.horizon(),
        cfg.truncation.m,
    )?;
    let problem = &built.problem;
    let triplet = cfg.triplet()?;
    let sample = simulate_noise(
        &triplet,
        cfg.teugels.k_max,
        cfg.teugels.rank_tolerance,
        grid,
        cfg.ensemble.paths,
        cfg.ensemble.seed,
    )?;
    let control = cfg
        .control
        .start
        .build(grid, problem.control_dim(), cfg.control.admissible)?;
    let traj = solve_ensemble(problem, &sample.noise, control.values()).context("forward solve")?;
    info!("solved {} paths on {} steps", traj.n_paths(), grid.steps());

    if cfg.outputs.wants(Format::Csv) {
        let mut header: Vec<String> = vec!["path".into(), "step".into(), "t".into()];
        header.extend(numbered("x", problem.dim()));
        let rows = traj.states.iter().enumerate().flat_map(|(p, states)| {
            states.iter().enumerate().map(move |(n, x)| {
                let mut row = vec![p.to_string(), n.to_string(), float(grid.time(n))];
                row.extend(x.iter().map(|&v| float(v)));
                row
            })
        });
        sink.csv("trajectory.csv", &header, rows)?;
    }
    if cfg.outputs.wants(Format::Json) {
        let report = SolveReport {
            constants: problem.constants,
            coefficients: built.check.clone(),
            coercivity: check_coercivity(problem, grid.horizon(), 256, cfg.ensemble.seed)?,
            bounds: check_bounds(problem, grid.horizon(), 8, cfg.ensemble.seed)?,
            cost: cost(&traj, control.values(), &built.cost),
            energy_residual: ito_energy_residual(problem, &sample.noise, control.values(), &traj)
                .max,
            apriori: apriori_estimate_check(problem, control.values(), &traj),
        };
        sink.json("diagnostics.json", &report)?;
    }
    Ok(true)
}

/// End-to-end optimization of the divergence-form example.
pub fn optimize(cfg: &ExperimentConfig, sink: &mut Sink, quiet: bool) -> Result<bool> {
    let report = run(&cfg.cauchy_run()?)?;
    let grid = cfg.time_grid()?;
    let opt = &report.optimization;
    info!(
        "{:?} after {} iterations: J = {:.6e}, |G|/|G0| = {:.3e}",
        opt.status, opt.iterations, opt.optimal_cost.mean, opt.relative_measure
    );

    if cfg.outputs.wants(Format::Json) {
        sink.json("report.json", &report)?;
    }
    if cfg.outputs.wants(Format::Csv) {
        let dim = report.space_dim;
        let mut header: Vec<String> = vec!["node".into(), "t".into()];
        header.extend(numbered("u", dim));
        let rows = report.control.values().iter().enumerate().map(|(n, u)| {
            let mut row = vec![n.to_string(), float(grid.time(n))];
            row.extend(u.iter().map(|&v| float(v)));
            row
        });
        sink.csv("control.csv", &header, rows)?;
        let header: Vec<String> = ["iter", "J", "G", "step"].map(String::from).into();
        let rows = opt.history.iter().map(|r| {
            vec![
                r.iter.to_string(),
                float(r.cost),
                float(r.gradient_norm),
                float(r.step),
            ]
        });
        sink.csv("history.csv", &header, rows)?;
        let snap = &report.snapshots;
        let header: Vec<String> = ["step", "t", "z", "mean_y", "u"].map(String::from).into();
        let rows = snap.times.iter().enumerate().flat_map(|(n, &t)| {
            snap.z.iter().enumerate().map(move |(j, &z)| {
                let u = snap
                    .control
                    .get(n)
                    .map_or(String::new(), |row| float(row[j]));
                vec![
                    n.to_string(),
                    float(t),
                    float(z),
                    float(snap.mean_state[n][j]),
                    u,
                ]
            })
        });
        sink.csv("field.csv", &header, rows)?;
    }
    if !quiet {
        for c in &report.criteria {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            let kind = if c.hard { "hard" } else { "soft" };
            println!(
                "{verdict} [{kind}] {:<24} {:.3e} (threshold {:.1e})",
                c.name, c.value, c.threshold
            );
        }
    }
    Ok(report.passed())
}
