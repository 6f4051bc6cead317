use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adjoint::{
    hamiltonian_gradient, pathwise_adjoint, AdjointEnsemble, GradientField, Regression,
};
use super::cost::{cost, CostEstimate, CostSpec};
use crate::error::{ControlError, SeeError};
use crate::levy::TimeGrid;
use crate::see::{
    energy_norm, solve_ensemble, DrivingNoise, EstimateReport, GelfandProblem, TrajectoryEnsemble,
};

/// Convex admissible set for the control values, applied coordinatewise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Admissible {
    #[default]
    Unconstrained,
    Box {
        lower: f64,
        upper: f64,
    },
}

impl Admissible {
    pub fn check(&self) -> Result<(), ControlError> {
        match *self {
            Admissible::Box { lower, upper } if !(lower <= upper) => Err(ControlError::Settings(
                format!("empty box [{lower}, {upper}]"),
            )),
            _ => Ok(()),
        }
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match *self {
            Admissible::Unconstrained => u.clone(),
            Admissible::Box { lower, upper } => u.map(|v| v.clamp(lower, upper)),
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match *self {
            Admissible::Unconstrained => u.iter().all(|v| v.is_finite()),
            Admissible::Box { lower, upper } => u.iter().all(|&v| (lower..=upper).contains(&v)),
        }
    }
}

/// Deterministic open-loop control: one value per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    values: Vec<DVector<f64>>,
    admissible: Admissible,
}

impl ControlGrid {
    pub fn new(values: Vec<DVector<f64>>, admissible: Admissible) -> Result<Self, ControlError> {
        admissible.check()?;
        if let Some(node) = values.iter().position(|u| !admissible.contains(u)) {
            return Err(ControlError::Inadmissible { node });
        }
        Ok(Self { values, admissible })
    }

    pub fn zeros(
        grid: TimeGrid,
        control_dim: usize,
        admissible: Admissible,
    ) -> Result<Self, ControlError> {
        admissible.check()?;
        let zero = admissible.project(&DVector::zeros(control_dim));
        Self::new(vec![zero; grid.steps()], admissible)
    }

    /// Projects arbitrary values onto the admissible set.
    pub fn projected(
        values: &[DVector<f64>],
        admissible: Admissible,
    ) -> Result<Self, ControlError> {
        admissible.check()?;
        Ok(Self {
            values: values.iter().map(|u| admissible.project(u)).collect(),
            admissible,
        })
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn admissible(&self) -> Admissible {
        self.admissible
    }

    /// `(Δt Σ_n ‖u_n − v_n‖²_U)^{1/2}`.
    pub fn distance(&self, other: &[DVector<f64>], problem: &GelfandProblem, dt: f64) -> f64 {
        (self
            .values
            .iter()
            .zip(other)
            .map(|(a, b)| problem.control_norm2(&(a - b)))
            .sum::<f64>()
            * dt)
            .sqrt()
    }
}

/// Cost of a control on the frozen noise ensemble.
pub fn evaluate_cost(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    spec: &dyn CostSpec,
    control: &[DVector<f64>],
) -> Result<CostEstimate, ControlError> {
    let traj = solve_ensemble(problem, noise, control)?;
    Ok(cost(&traj, control, spec))
}

/// Forward solve, cost, adjoint and gradient at one control.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub trajectory: TrajectoryEnsemble,
    pub cost: CostEstimate,
    pub adjoint: AdjointEnsemble,
    pub gradient: GradientField,
}

pub fn linearize(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    spec: &dyn CostSpec,
    control: &[DVector<f64>],
    regression: Regression,
) -> Result<Linearization, ControlError> {
    let trajectory = solve_ensemble(problem, noise, control)?;
    let cost = cost(&trajectory, control, spec);
    let adjoint = pathwise_adjoint(problem, noise, &trajectory, control, spec, regression)?;
    let gradient = hamiltonian_gradient(problem, noise, &trajectory, control, &adjoint, spec)?;
    Ok(Linearization {
        trajectory,
        cost,
        adjoint,
        gradient,
    })
}

/// Armijo projected-gradient settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Stop once the stationarity measure drops below this fraction of its
    /// initial value.
    pub tolerance: f64,
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    pub stall_window: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tolerance: 1e-7,
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            max_backtracks: 40,
            stall_window: 10,
        }
    }
}

impl OptimizerSettings {
    pub fn check(&self) -> Result<(), ControlError> {
        let bad = |what: &str| Err(ControlError::Settings(what.to_string()));
        if !(self.initial_step > 0.0) {
            return bad("initial step must be positive");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink factor must lie in (0, 1)");
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("Armijo parameter must lie in (0, 1)");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be nonnegative");
        }
        if self.stall_window == 0 {
            return bad("stall window must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerStatus {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub control: ControlGrid,
    pub status: OptimizerStatus,
    pub history: Vec<IterationRecord>,
    pub initial_measure: f64,
    /// State, cost, adjoint and gradient at the returned control.
    pub at_optimum: Linearization,
}

impl OptimizationResult {
    pub fn final_measure(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.gradient_norm)
    }
}

/// Diagonal of the control Gram matrix, the metric used under box
/// constraints (where a coordinate clamp is the exact projection).
fn box_metric(problem: &GelfandProblem) -> DVector<f64> {
    problem.control_gram.diagonal()
}

fn descent_direction(
    grad: &GradientField,
    admissible: Admissible,
    metric: &DVector<f64>,
) -> Vec<DVector<f64>> {
    match admissible {
        Admissible::Unconstrained => grad.riesz.clone(),
        Admissible::Box { .. } => grad
            .covector
            .iter()
            .map(|g| g.component_div(metric))
            .collect(),
    }
}

/// Stationarity measure: `‖G‖_U` without constraints, otherwise the norm of
/// the projected-gradient map `u − Π(u − D⁻¹G)` in the diagonal metric `D`.
pub fn stationarity_measure(
    problem: &GelfandProblem,
    grad: &GradientField,
    control: &ControlGrid,
) -> f64 {
    match control.admissible {
        Admissible::Unconstrained => grad.norm,
        admissible @ Admissible::Box { .. } => {
            let metric = box_metric(problem);
            let sum: f64 = control
                .values
                .iter()
                .zip(&grad.covector)
                .map(|(u, g)| {
                    let r = u - admissible.project(&(u - g.component_div(&metric)));
                    r.component_mul(&metric).dot(&r)
                })
                .sum();
            (sum * grad.dt).sqrt()
        }
    }
}

/// Projected gradient descent with Armijo backtracking on the frozen noise
/// ensemble.
pub fn optimize(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    spec: &dyn CostSpec,
    initial: ControlGrid,
    settings: &OptimizerSettings,
    regression: Regression,
) -> Result<OptimizationResult, ControlError> {
    settings.check()?;
    let admissible = initial.admissible;
    let mut control = initial;
    let metric = box_metric(problem);
    let mut state = linearize(problem, noise, spec, &control.values, regression)?;
    let initial_measure = stationarity_measure(problem, &state.gradient, &control);
    let mut history = vec![IterationRecord {
        iter: 0,
        cost: state.cost.mean,
        gradient_norm: initial_measure,
        step: 0.0,
    }];
    if initial_measure == 0.0 {
        return Ok(OptimizationResult {
            control,
            status: OptimizerStatus::Converged,
            history,
            initial_measure,
            at_optimum: state,
        });
    }

    let mut status = OptimizerStatus::MaxIterations;
    let mut first_step = settings.initial_step;
    let mut stalled = 0;
    for iter in 1..=settings.max_iters {
        let direction = descent_direction(&state.gradient, admissible, &metric);
        let mut gamma = first_step;
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let candidate: Vec<DVector<f64>> = control
                .values
                .iter()
                .zip(&direction)
                .map(|(u, d)| admissible.project(&(u - d * gamma)))
                .collect();
            let moved: Vec<DVector<f64>> = control
                .values
                .iter()
                .zip(&candidate)
                .map(|(u, c)| u - c)
                .collect();
            let decrease = state.gradient.pair(&moved);
            let trial = match evaluate_cost(problem, noise, spec, &candidate) {
                Ok(c) => c.mean,
                Err(ControlError::See(
                    SeeError::Divergence { .. } | SeeError::NonFinite { .. },
                )) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if decrease > 0.0 && trial <= state.cost.mean - settings.armijo * decrease {
                accepted = Some((candidate, None));
                break;
            }
            // Near a minimizer the cost change falls below the resolution of
            // the floating-point cost. There the trapezoidal estimate of the
            // decrease, built from the gradients at both ends, replaces the
            // raw difference.
            if decrease > 0.0 && (trial - state.cost.mean).abs() <= cost_resolution(state.cost.mean)
            {
                let at_trial = linearize(problem, noise, spec, &candidate, regression)?;
                let estimate = 0.5 * (decrease + at_trial.gradient.pair(&moved));
                if estimate >= settings.armijo * decrease {
                    accepted = Some((candidate, Some(at_trial)));
                    break;
                }
            }
            gamma *= settings.shrink;
        }
        match accepted {
            Some((values, evaluated)) => {
                let previous_measure = stationarity_measure(problem, &state.gradient, &control);
                let previous_cost = state.cost.mean;
                control = ControlGrid { values, admissible };
                state = match evaluated {
                    Some(lin) => lin,
                    None => linearize(problem, noise, spec, &control.values, regression)?,
                };
                let progressed = state.cost.mean < previous_cost
                    || stationarity_measure(problem, &state.gradient, &control) < previous_measure;
                stalled = if progressed { 0 } else { stalled + 1 };
                first_step = settings.initial_step;
            }
            None => {
                stalled += 1;
                first_step = gamma;
            }
        }
        let measure = stationarity_measure(problem, &state.gradient, &control);
        history.push(IterationRecord {
            iter,
            cost: state.cost.mean,
            gradient_norm: measure,
            step: gamma,
        });
        log::debug!(
            "iter {iter}: J = {:.12e}, |G| = {measure:.3e}, step = {gamma:.3e}",
            state.cost.mean
        );
        if measure <= settings.tolerance * initial_measure {
            status = OptimizerStatus::Converged;
            break;
        }
        if stalled >= settings.stall_window {
            status = OptimizerStatus::Stalled;
            break;
        }
    }
    Ok(OptimizationResult {
        control,
        status,
        history,
        initial_measure,
        at_optimum: state,
    })
}

/// Cost differences smaller than this are indistinguishable from rounding.
pub fn cost_resolution(cost: f64) -> f64 {
    64.0 * f64::EPSILON * cost.abs().max(f64::MIN_POSITIVE)
}

fn random_control(rng: &mut ChaCha8Rng, steps: usize, dim: usize, scale: f64) -> Vec<DVector<f64>> {
    (0..steps)
        .map(|_| {
            DVector::from_fn(dim, |_, _| {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng)
            })
        })
        .collect()
}

/// Random admissible controls: uniform in a box, Gaussian around `center`
/// otherwise.
fn random_admissible(rng: &mut ChaCha8Rng, center: &ControlGrid, scale: f64) -> Vec<DVector<f64>> {
    match center.admissible {
        Admissible::Unconstrained => {
            let dim = center.values.first().map_or(0, |u| u.len());
            random_control(rng, center.values.len(), dim, scale)
                .into_iter()
                .zip(&center.values)
                .map(|(v, u)| v + u)
                .collect()
        }
        Admissible::Box { lower, upper } => center
            .values
            .iter()
            .map(|u| DVector::from_fn(u.len(), |_, _| rng.random_range(lower..=upper)))
            .collect(),
    }
}

/// Sweep of `Σ_n (∂J/∂u_n) · (v_n − ū_n)` over random admissible `v`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimumConditionReport {
    pub trials: usize,
    /// Smallest pairing divided by `reference · ‖v − ū‖`.
    pub worst_normalized: f64,
    pub violations: usize,
    pub tolerance: f64,
}

pub fn minimum_condition_check(
    optimum: &ControlGrid,
    gradient: &GradientField,
    reference: f64,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> MinimumConditionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..trials {
        let v = random_admissible(&mut rng, optimum, 1.0);
        let diff: Vec<DVector<f64>> = v.iter().zip(&optimum.values).map(|(a, b)| a - b).collect();
        let size = (diff.iter().map(|d| d.norm_squared()).sum::<f64>() * gradient.dt).sqrt();
        if size == 0.0 {
            continue;
        }
        let normalized = gradient.pair(&diff) / (reference * size);
        worst = worst.min(normalized);
        if normalized < -tolerance {
            violations += 1;
        }
    }
    MinimumConditionReport {
        trials,
        worst_normalized: worst,
        violations,
        tolerance,
    }
}

/// Convexity certificate: `J(u) ≥ J(ū)` for random admissible `u` under
/// common noise, up to `z` standard errors of the pathwise difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub trials: usize,
    pub optimal_cost: f64,
    pub violations: usize,
    /// Smallest `(J(u) − J(ū)) / stderr` observed (infinite if every
    /// difference is exact).
    pub worst_z: f64,
    pub smallest_gap: f64,
    pub witness: Option<usize>,
}

pub fn verification_check(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    spec: &dyn CostSpec,
    optimum: &ControlGrid,
    trials: usize,
    radius: f64,
    z: f64,
    seed: u64,
) -> Result<VerificationReport, ControlError> {
    let base = evaluate_cost(problem, noise, spec, &optimum.values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport {
        trials,
        optimal_cost: base.mean,
        violations: 0,
        worst_z: f64::INFINITY,
        smallest_gap: f64::INFINITY,
        witness: None,
    };
    for trial in 0..trials {
        // radii spread over three decades so both large and local moves are probed
        let scale = radius * 10f64.powf(-3.0 * rng.random::<f64>());
        let u = ControlGrid::projected(
            &random_admissible(&mut rng, optimum, scale),
            optimum.admissible,
        )?;
        let other = evaluate_cost(problem, noise, spec, &u.values)?;
        let diffs: Vec<f64> = other
            .per_path
            .iter()
            .zip(&base.per_path)
            .map(|(a, b)| a - b)
            .collect();
        let gap = CostEstimate::from_samples(diffs);
        let floor = 1e-12 * base.mean.abs().max(1.0);
        if gap.mean < report.smallest_gap {
            report.smallest_gap = gap.mean;
        }
        if gap.stderr > 0.0 {
            report.worst_z = report.worst_z.min(gap.mean / gap.stderr);
        }
        if gap.mean < -z * gap.stderr - floor {
            report.violations += 1;
            report.witness.get_or_insert(trial);
        }
    }
    Ok(report)
}

/// Dependence of the state on the control: the energy norm of
/// `X^u − X^v` against `Δt Σ_n ‖u_n − v_n‖²_U`.
pub fn control_dependence_check(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    u: &[DVector<f64>],
    v: &[DVector<f64>],
) -> Result<EstimateReport, ControlError> {
    let xu = solve_ensemble(problem, noise, u)?;
    let xv = solve_ensemble(problem, noise, v)?;
    let dt = noise.grid.dt();
    let rhs = u
        .iter()
        .zip(v)
        .map(|(a, b)| problem.control_norm2(&(a - b)))
        .sum::<f64>()
        * dt;
    Ok(EstimateReport::new(
        energy_norm(problem, &xu, Some(&xv)),
        rhs,
    ))
}
