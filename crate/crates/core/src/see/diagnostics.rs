//! Runtime checks of the energy identity and the stability estimates.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::problem::{Channel, GelfandProblem};
use super::stepper::{solve_ensemble, DrivingNoise, TrajectoryEnsemble};
use crate::error::SeeError;

/// Largest absolute deviation from the discrete energy identity, per path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyResidual {
    pub per_path: Vec<f64>,
    pub max: f64,
}

/// Compares `‖X_n‖²_H` with the Itô expansion
///
/// ```text
/// ‖x‖² + Σ_k [2⟨A X_k, X_k⟩ + 2(b, X_k)] Δt + 2(S_k, X_k) + ‖S_k‖²_{H}
/// ```
///
/// where `S_k = (B X_k + g) ΔW_k + Σ_i σ^i ΔH^i_k` is the noise load of step
/// `k`. The quadratic term uses the realized increments, i.e. the bracket
/// `[W, W]` in place of `t`; both are the same in continuous time but only
/// the realized form leaves a residual of first order in `Δt`.
pub fn ito_energy_residual(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    control: &[DVector<f64>],
    traj: &TrajectoryEnsemble,
) -> EnergyResidual {
    let grid = traj.grid;
    let dt = grid.dt();
    let space = &problem.space;
    let coef = &problem.coefficients;
    let per_path: Vec<f64> = (0..traj.n_paths())
        .into_par_iter()
        .map(|path| {
            let states = &traj.states[path];
            let mut expansion = space.h_norm2(&states[0]);
            let mut worst: f64 = 0.0;
            for n in 0..grid.steps() {
                let (x, u) = (&states[n], &control[n]);
                let t = grid.time(n);
                let dw = noise.paths[path].dw[n];
                let dh = noise.dh(path, n);
                let mut drift = &*problem.drift_operator.at(t) * x;
                drift += coef.eval(Channel::Drift, t, x, u);
                let mut load = (&*problem.noise_operator.at(t) * x
                    + coef.eval(Channel::Diffusion, t, x, u))
                    * dw;
                for (i, &h) in dh.iter().enumerate().take(coef.jump_dim()) {
                    load.axpy(h, &coef.eval(Channel::Jump(i), t, x, u), 1.0);
                }
                expansion += 2.0 * dt * drift.dot(x) + 2.0 * load.dot(x) + space.load_norm2(&load);
                worst = worst.max((space.h_norm2(&states[n + 1]) - expansion).abs());
            }
            worst
        })
        .collect();
    let max = per_path.iter().copied().fold(0.0, f64::max);
    EnergyResidual { per_path, max }
}

/// Empirical constant of a stability estimate `LHS ≤ K · RHS`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, or `0` when both sides vanish.
    pub ratio: f64,
}

impl EstimateReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        Self { lhs, rhs, ratio }
    }
}

/// `sup_n E‖D_n‖²_H + E Σ_n ‖D_n‖²_V Δt` for `D_n = X_n − X̄_n`, or of `X_n`
/// itself when `other` is absent.
pub(crate) fn energy_norm(
    problem: &GelfandProblem,
    traj: &TrajectoryEnsemble,
    other: Option<&TrajectoryEnsemble>,
) -> f64 {
    let grid = traj.grid;
    let paths = traj.n_paths() as f64;
    let space = &problem.space;
    let mut sup_h: f64 = 0.0;
    let mut v_integral = 0.0;
    for n in 0..=grid.steps() {
        let (mut h, mut v) = (0.0, 0.0);
        for p in 0..traj.n_paths() {
            let d = match other {
                Some(o) => &traj.states[p][n] - &o.states[p][n],
                None => traj.states[p][n].clone(),
            };
            h += space.h_norm2(&d);
            v += space.v_norm2(&d);
        }
        sup_h = sup_h.max(h / paths);
        if n < grid.steps() {
            v_integral += v / paths * grid.dt();
        }
    }
    sup_h + v_integral
}

/// A priori estimate: the energy norm of the solution against
/// `‖x‖²_H + ∫ (‖b(t,0)‖² + ‖g(t,0)‖² + Σ_i ‖σ^i(t,0)‖²) dt`.
pub fn apriori_estimate_check(
    problem: &GelfandProblem,
    control: &[DVector<f64>],
    traj: &TrajectoryEnsemble,
) -> EstimateReport {
    let grid = traj.grid;
    let zero = DVector::zeros(problem.dim());
    let coef = &problem.coefficients;
    let mut data = problem.space.h_norm2(&problem.initial);
    for (n, u) in control.iter().enumerate() {
        let t = grid.time(n);
        let forcing: f64 = coef
            .channels()
            .into_iter()
            .map(|ch| problem.space.load_norm2(&coef.eval(ch, t, &zero, u)))
            .sum();
        data += forcing * grid.dt();
    }
    EstimateReport::new(energy_norm(problem, traj, None), data)
}

/// Continuous dependence: solves both problems on common noise and compares
/// the energy norm of the difference with the perturbation of the data,
/// measured along the perturbed solution.
pub fn continuous_dependence_check(
    problem: &GelfandProblem,
    perturbed: &GelfandProblem,
    noise: &DrivingNoise,
    control: &[DVector<f64>],
) -> Result<EstimateReport, SeeError> {
    if problem.drift_operator != perturbed.drift_operator
        || problem.noise_operator != perturbed.noise_operator
    {
        return Err(SeeError::Dimension(
            "continuous dependence requires shared operators A and B".into(),
        ));
    }
    let traj = solve_ensemble(problem, noise, control)?;
    let other = solve_ensemble(perturbed, noise, control)?;
    let grid = traj.grid;
    let (c, cbar) = (&problem.coefficients, &perturbed.coefficients);
    let mut data = problem
        .space
        .h_norm2(&(&problem.initial - &perturbed.initial));
    let paths = other.n_paths() as f64;
    for (n, u) in control.iter().enumerate() {
        let t = grid.time(n);
        let mut gap = 0.0;
        for states in &other.states {
            let x = &states[n];
            for ch in c.channels() {
                let d = c.eval(ch, t, x, u) - cbar.eval(ch, t, x, u);
                gap += problem.space.load_norm2(&d);
            }
        }
        data += gap / paths * grid.dt();
    }
    Ok(EstimateReport::new(
        energy_norm(problem, &traj, Some(&other)),
        data,
    ))
}

/// `max/min − 1` over positive values, the spread of a constant across
/// refinements.
pub fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max / min - 1.0
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
