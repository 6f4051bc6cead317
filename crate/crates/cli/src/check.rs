//! The `check` subcommand: the property suite as a pass/fail matrix.

use std::sync::Arc;

use anyhow::Result;
use log::info;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use teugels_see::cauchy::{
    build_problem, simulate_noise, stationarity_report, CauchyProblem, StartingControl,
    GRADIENT_REDUCTION, REGRESSION_TOLERANCE,
};
use teugels_see::control::{
    cost_resolution, duality_check, evaluate_cost, linearize, minimum_condition_check, optimize,
    variation_solve, verification_check, Admissible, OptimizationResult, Regression,
};
use teugels_see::levy::{simulate_bundle, TimeGrid};
use teugels_see::see::{
    apriori_estimate_check, check_bounds, check_coercivity, continuous_dependence_check,
    ito_energy_residual, loglog_slope, relative_spread, solve_ensemble, DrivingNoise,
    GelfandProblem, SineNonlinearity, TrajectoryEnsemble,
};
use teugels_see::teugels::{
    build_moment_functional, orthonormalize, realized_covariation, teugels_increments,
};

use crate::config::{ExperimentConfig, Format};
use crate::output::{float, Sink};

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub hard: bool,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Default)]
struct Matrix {
    rows: Vec<CheckRow>,
}

impl Matrix {
    fn at_most(&mut self, name: &'static str, value: f64, threshold: f64, detail: String) {
        self.push(name, true, value <= threshold, value, threshold, detail);
    }

    fn at_least(&mut self, name: &'static str, value: f64, threshold: f64, detail: String) {
        self.push(name, true, value >= threshold, value, threshold, detail);
    }

    fn push(
        &mut self,
        name: &'static str,
        hard: bool,
        passed: bool,
        value: f64,
        threshold: f64,
        detail: String,
    ) {
        info!(
            "{name}: {value:.3e} ({})",
            if passed { "pass" } else { "fail" }
        );
        self.rows.push(CheckRow {
            name,
            hard,
            passed,
            value,
            threshold,
            detail,
        });
    }
}

const EPSILONS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

fn random_field(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Vec<DVector<f64>> {
    (0..steps)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect()
}

fn shifted(u: &[DVector<f64>], v: &[DVector<f64>], eps: f64) -> Vec<DVector<f64>> {
    u.iter().zip(v).map(|(a, b)| a + b * eps).collect()
}

/// `max_{p,n} ‖a − b − ε y‖_H`.
fn deviation(
    problem: &GelfandProblem,
    a: &TrajectoryEnsemble,
    b: &TrajectoryEnsemble,
    y: Option<(&TrajectoryEnsemble, f64)>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..a.n_paths() {
        for n in 0..a.states[p].len() {
            let mut d = &a.states[p][n] - &b.states[p][n];
            if let Some((y, eps)) = y {
                d -= &y.states[p][n] * eps;
            }
            worst = worst.max(problem.space.h_norm2(&d).sqrt());
        }
    }
    worst
}

/// Noise on the grids `N, 2N, 4N`, nested by coarsening the finest paths.
fn nested_noise(cfg: &ExperimentConfig, paths: usize) -> Result<Vec<DrivingNoise>> {
    let triplet = cfg.triplet()?;
    let basis = orthonormalize(
        &build_moment_functional(&triplet, cfg.teugels.k_max)?,
        cfg.teugels.rank_tolerance,
    );
    let compensators = triplet.power_jump_compensators(basis.dim());
    let fine = TimeGrid::new(cfg.grid.horizon, 4 * cfg.grid.steps)?;
    let bundles = simulate_bundle(&triplet, fine, paths, cfg.ensemble.seed);
    [4, 2, 1]
        .into_iter()
        .map(|factor| {
            let coarse = bundles
                .iter()
                .map(|b| b.coarsen(factor))
                .collect::<Result<Vec<_>, _>>()?;
            let inc = teugels_increments(&basis, &coarse, triplet.mean_rate(), &compensators)?;
            Ok(DrivingNoise::new(&coarse, &inc)?)
        })
        .collect()
}

fn solver_checks(cfg: &ExperimentConfig, built: &CauchyProblem, matrix: &mut Matrix) -> Result<()> {
    let problem = &built.problem;
    let horizon = cfg.grid.horizon;
    let coercivity = check_coercivity(problem, horizon, 256, cfg.ensemble.seed)?;
    matrix.at_least(
        "coercivity",
        coercivity.worst_exact_margin,
        -1e-10,
        format!(
            "lambda = {}, alpha = {}",
            problem.constants.lambda, problem.constants.alpha
        ),
    );
    let bounds = check_bounds(problem, horizon, 8, cfg.ensemble.seed);
    matrix.push(
        "operator_bounds",
        true,
        bounds.is_ok(),
        bounds.as_ref().map_or(f64::NAN, |b| {
            b.drift_operator_norm.max(b.noise_operator_norm)
        }),
        problem.constants.bound,
        bounds.err().map_or_else(String::new, |e| e.to_string()),
    );

    let levels = nested_noise(cfg, cfg.check.exactness_paths)?;
    let (mut residuals, mut ratios) = (Vec::new(), Vec::new());
    for noise in &levels {
        let zero = vec![DVector::zeros(problem.control_dim()); noise.grid.steps()];
        let traj = solve_ensemble(problem, noise, &zero)?;
        residuals.push(ito_energy_residual(problem, noise, &zero, &traj).max);
        ratios.push(apriori_estimate_check(problem, &zero, &traj).ratio);
    }
    let order = (residuals[0] / residuals[1]).min(residuals[1] / residuals[2]);
    matrix.at_least(
        "energy_identity_order",
        order,
        1.8,
        format!("max residuals {residuals:?} on N, 2N, 4N"),
    );
    matrix.at_most(
        "apriori_constant_spread",
        relative_spread(&ratios),
        0.2,
        format!("ratios {ratios:?}"),
    );

    let noise = &levels[2];
    let zero = vec![DVector::zeros(problem.control_dim()); noise.grid.steps()];
    let ones = problem
        .space
        .project(|_| 1.0)
        .unwrap_or_else(|| DVector::from_element(problem.dim(), 1.0));
    let (mut drift_gap, mut initial_gap) = (Vec::new(), Vec::new());
    for eps in EPSILONS {
        let mut coef = built.affine.clone();
        coef.drift.offset += problem.space.gram_h() * &ones * eps;
        let perturbed = problem.with_coefficients(Arc::new(coef));
        drift_gap.push(continuous_dependence_check(problem, &perturbed, noise, &zero)?.lhs);
        let perturbed = problem.with_initial(&problem.initial + &ones * eps);
        initial_gap.push(continuous_dependence_check(problem, &perturbed, noise, &zero)?.lhs);
    }
    for (name, gaps) in [
        ("dependence_slope_drift", drift_gap),
        ("dependence_slope_initial", initial_gap),
    ] {
        let slope = loglog_slope(&EPSILONS, &gaps);
        matrix.push(
            name,
            true,
            (slope - 2.0).abs() <= 0.1,
            slope,
            2.0,
            "passes when within 0.1".into(),
        );
    }
    Ok(())
}

fn exactness_checks(
    cfg: &ExperimentConfig,
    built: &CauchyProblem,
    noise: &DrivingNoise,
    matrix: &mut Matrix,
) -> Result<()> {
    let problem = &built.problem;
    let spec = &built.cost;
    let steps = noise.grid.steps();
    let k = problem.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ensemble.seed ^ 0xc4ec);
    let u = random_field(&mut rng, steps, k);
    let lin = linearize(problem, noise, spec, &u, Regression::EnsembleMean)?;

    let h = cfg.check.finite_difference_step;
    let largest = lin
        .gradient
        .covector
        .iter()
        .map(|g| g.amax())
        .fold(0.0, f64::max)
        * lin.gradient.dt;
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.check.gradient_coordinates {
        let (node, coord) = (rng.random_range(0..steps), rng.random_range(0..k));
        let bump = |s: f64| -> Result<f64> {
            let mut v = u.clone();
            v[node][coord] += s * h;
            Ok(evaluate_cost(problem, noise, spec, &v)?.mean)
        };
        let fd = (bump(1.0)? - bump(-1.0)?) / (2.0 * h);
        let exact = lin.gradient.covector[node][coord] * lin.gradient.dt;
        worst = worst.max((fd - exact).abs() / exact.abs().max(1e-3 * largest));
    }
    matrix.at_most(
        "gradient_vs_finite_differences",
        worst,
        1e-6,
        format!("{} coordinates, step {h}", cfg.check.gradient_coordinates),
    );

    let mut worst: f64 = 0.0;
    for _ in 0..cfg.check.duality_directions {
        let v = random_field(&mut rng, steps, k);
        let y = variation_solve(problem, noise, &lin.trajectory, &u, &v)?;
        let report = duality_check(
            problem,
            noise,
            &lin.trajectory,
            &u,
            &y,
            &lin.adjoint,
            &v,
            spec,
        )?;
        worst = worst.max(report.residual);
    }
    matrix.at_most(
        "duality_identity",
        worst,
        1e-10,
        format!("{} directions", cfg.check.duality_directions),
    );

    let mut coef = built.affine.clone();
    coef.drift_nonlinearity = Some(SineNonlinearity {
        weight: problem.space.gram_h().clone(),
        strength: 1.0,
    });
    let nonlinear = problem.with_coefficients(Arc::new(coef));
    let v = random_field(&mut rng, steps, k);
    let traj = solve_ensemble(&nonlinear, noise, &u)?;
    let y = variation_solve(&nonlinear, noise, &traj, &u, &v)?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for eps in EPSILONS {
        let moved = solve_ensemble(&nonlinear, noise, &shifted(&u, &v, eps))?;
        first.push(deviation(&nonlinear, &moved, &traj, None));
        second.push(deviation(&nonlinear, &moved, &traj, Some((&y, eps))));
    }
    let detail = "with an added sin drift nonlinearity".to_string();
    matrix.at_least(
        "variation_rate_first",
        loglog_slope(&EPSILONS, &first),
        0.95,
        detail.clone(),
    );
    matrix.at_least(
        "variation_rate_second",
        loglog_slope(&EPSILONS, &second),
        1.9,
        detail,
    );
    Ok(())
}

fn optimality_checks(
    cfg: &ExperimentConfig,
    built: &CauchyProblem,
    noise: &DrivingNoise,
    matrix: &mut Matrix,
) -> Result<()> {
    let problem = &built.problem;
    let spec = &built.cost;
    let grid = noise.grid;
    let admissible = cfg.control.admissible;
    let settings = &cfg.control.optimizer;
    let starts = [
        StartingControl::Zero,
        StartingControl::Random {
            scale: 1.0,
            seed: cfg.ensemble.seed ^ 0x57a7,
        },
    ];
    let mut results: Vec<OptimizationResult> = Vec::new();
    for start in starts {
        let u0 = start.build(grid, problem.control_dim(), admissible)?;
        results.push(optimize(
            problem,
            noise,
            spec,
            u0,
            settings,
            Regression::EnsembleMean,
        )?);
    }
    let best = &results[0];
    let reduction = best.final_measure() / best.initial_measure.max(f64::MIN_POSITIVE);
    matrix.at_most(
        "gradient_reduction",
        reduction,
        GRADIENT_REDUCTION,
        format!("{:?} after {} records", best.status, best.history.len()),
    );
    let monotone = best
        .history
        .windows(2)
        .all(|w| w[1].cost <= w[0].cost + cost_resolution(w[0].cost));
    matrix.push(
        "monotone_cost",
        true,
        monotone,
        f64::from(u8::from(monotone)),
        1.0,
        String::new(),
    );

    let scale = best.control.distance(
        &vec![DVector::zeros(problem.control_dim()); grid.steps()],
        problem,
        grid.dt(),
    );
    let gap = best
        .control
        .distance(results[1].control.values(), problem, grid.dt())
        / scale.max(1.0);
    matrix.at_most(
        "starts_agree",
        gap,
        1e-6,
        format!("control norm {scale:.6e}"),
    );

    let report = verification_check(
        problem,
        noise,
        spec,
        &best.control,
        cfg.check.verification_trials,
        cfg.check.verification_radius,
        4.0,
        cfg.ensemble.seed,
    )?;
    matrix.push(
        "verification",
        true,
        report.violations == 0,
        report.violations as f64,
        0.0,
        format!(
            "{} trials, smallest gap {:.3e}, worst z {:.3e}",
            report.trials, report.smallest_gap, report.worst_z
        ),
    );

    match admissible {
        Admissible::Unconstrained => {
            let st = stationarity_report(problem, noise, spec, best.control.values())?;
            let identity = st.ensemble_residual * st.control_norm
                / best.initial_measure.max(f64::MIN_POSITIVE);
            matrix.at_most(
                "stationarity_identity",
                identity,
                GRADIENT_REDUCTION,
                format!("relative to the control norm {:.3e}", st.ensemble_residual),
            );
            matrix.push(
                "stationarity_regression",
                false,
                st.regression_residual <= REGRESSION_TOLERANCE,
                st.regression_residual,
                REGRESSION_TOLERANCE,
                format!("increment-centered estimate {:.3e}", st.increment_residual),
            );
        }
        Admissible::Box { .. } => {
            let report = minimum_condition_check(
                &best.control,
                &best.at_optimum.gradient,
                best.initial_measure,
                1000,
                GRADIENT_REDUCTION,
                cfg.ensemble.seed,
            );
            matrix.at_least(
                "minimum_condition",
                report.worst_normalized,
                -report.tolerance,
                format!("{} violations", report.violations),
            );
        }
    }
    Ok(())
}

/// Runs every property check; returns whether all hard ones passed.
pub fn check(cfg: &ExperimentConfig, sink: &mut Sink, quiet: bool) -> Result<bool> {
    let mut matrix = Matrix::default();
    let grid = cfg.time_grid()?;
    let triplet = cfg.triplet()?;
    let functional = build_moment_functional(&triplet, cfg.teugels.k_max)?;
    let sample = simulate_noise(
        &triplet,
        cfg.teugels.k_max,
        cfg.teugels.rank_tolerance,
        grid,
        cfg.ensemble.paths,
        cfg.ensemble.seed,
    )?;
    matrix.at_most(
        "teugels_orthonormality",
        sample.basis.orthonormality_error(&functional),
        1e-10,
        format!("basis dimension {}", sample.basis.dim()),
    );
    let covariation = realized_covariation(&sample.increments);
    matrix.at_most(
        "strong_orthogonality",
        covariation.worst_z_score(),
        4.0,
        format!("{} paths", cfg.ensemble.paths),
    );
    matrix.at_most(
        "martingale_mean",
        covariation.worst_martingale_z_score(),
        4.0,
        String::new(),
    );

    let built = build_problem(
        &cfg.coefficients,
        cfg.space,
        grid.horizon(),
        cfg.truncation.m,
    )?;
    solver_checks(cfg, &built, &mut matrix)?;
    let small = sample
        .noise
        .subset(0..cfg.check.exactness_paths.min(sample.noise.n_paths()));
    exactness_checks(cfg, &built, &small, &mut matrix)?;
    optimality_checks(cfg, &built, &sample.noise, &mut matrix)?;

    if cfg.outputs.wants(Format::Json) {
        sink.json("check.json", &matrix.rows)?;
    }
    if cfg.outputs.wants(Format::Csv) {
        let header: Vec<String> = ["check", "hard", "passed", "value", "threshold", "detail"]
            .map(String::from)
            .into();
        let rows = matrix.rows.iter().map(|r| {
            vec![
                r.name.to_string(),
                r.hard.to_string(),
                r.passed.to_string(),
                float(r.value),
                float(r.threshold),
                r.detail.clone(),
            ]
        });
        sink.csv("check_matrix.csv", &header, rows)?;
    }
    if !quiet {
        for r in &matrix.rows {
            let verdict = if r.passed { "pass" } else { "FAIL" };
            let kind = if r.hard { "hard" } else { "soft" };
            println!("{verdict} [{kind}] {:<32} {:.3e}", r.name, r.value);
        }
    }
    Ok(matrix.rows.iter().all(|r| r.passed || !r.hard))
}
