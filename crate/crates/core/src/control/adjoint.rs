use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use super::cost::CostSpec;
use crate::error::ControlError;
use crate::see::{DrivingNoise, GelfandProblem, Stepper, TrajectoryEnsemble};

fn check_shapes(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    traj: &TrajectoryEnsemble,
    control: &[DVector<f64>],
) -> Result<(), ControlError> {
    if traj.grid != noise.grid || traj.n_paths() != noise.n_paths() {
        return Err(ControlError::Dimension(
            "trajectory and noise ensemble differ".into(),
        ));
    }
    if control.len() != noise.grid.steps()
        || control.iter().any(|u| u.len() != problem.control_dim())
    {
        return Err(ControlError::Dimension(
            "control does not match the grid or control dimension".into(),
        ));
    }
    Ok(())
}

/// First-order variation `Y` along `(X̄, ū)` in the direction `v`:
/// `Y_0 = 0`, `(M − Δt A) Y_{n+1} = J_n Y_n + K_n v_n`, with `J_n`, `K_n` the
/// state and control Jacobians of the explicit part of the step.
pub fn variation_solve(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    traj: &TrajectoryEnsemble,
    control: &[DVector<f64>],
    direction: &[DVector<f64>],
) -> Result<TrajectoryEnsemble, ControlError> {
    check_shapes(problem, noise, traj, control)?;
    check_shapes(problem, noise, traj, direction)?;
    let stepper = Stepper::new(problem, noise.grid)?;
    let steps = noise.grid.steps();
    let states = (0..noise.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut ys = Vec::with_capacity(steps + 1);
            ys.push(DVector::zeros(problem.dim()));
            for n in 0..steps {
                let (jx, ju) = stepper.linearization(
                    n,
                    &traj.states[p][n],
                    &control[n],
                    noise.paths[p].dw[n],
                    noise.dh(p, n),
                );
                let rhs = jx * &ys[n] + ju * &direction[n];
                ys.push(stepper.solve(n, &rhs));
            }
            ys
        })
        .collect();
    Ok(TrajectoryEnsemble {
        grid: noise.grid,
        states,
    })
}

/// How `(q, r)` are read off the adjoint ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regression {
    /// `q̂_n = E[p_{n+1}⁻ ΔW_n] / Δt` with plain ensemble means.
    #[default]
    EnsembleMean,
    /// Sample covariances, i.e. an affine regression on the increments.
    Centered,
}

/// Discrete adjoint ensemble.
///
/// `costate[p][n]` is the Riesz representative `p_n = M⁻¹ λ_n` of the
/// backward covector `λ_n = J_nᵀ μ_{n+1} + Δt l_x`, `λ_N = Φ_x(X_N)`.
/// `left[p][n]` is `μ_{n+1} = (M − Δt A)⁻ᵀ λ_{n+1}`, the adjoint just before
/// the implicit step, which is what the gradient pairs with.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEnsemble {
    pub costate: Vec<Vec<DVector<f64>>>,
    pub left: Vec<Vec<DVector<f64>>>,
    /// Ensemble mean of `left`, per node.
    pub p_hat: Vec<DVector<f64>>,
    pub q_hat: Vec<DVector<f64>>,
    /// `r_hat[n][i]`.
    pub r_hat: Vec<Vec<DVector<f64>>>,
}

/// Backward sweep through the exact transpose of the forward step, per path.
pub fn pathwise_adjoint(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    traj: &TrajectoryEnsemble,
    control: &[DVector<f64>],
    spec: &dyn CostSpec,
    regression: Regression,
) -> Result<AdjointEnsemble, ControlError> {
    check_shapes(problem, noise, traj, control)?;
    let stepper = Stepper::new(problem, noise.grid)?;
    let grid = noise.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let space = &problem.space;
    let sweeps: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>)> = (0..noise.n_paths())
        .into_par_iter()
        .map(|p| {
            let xs = &traj.states[p];
            let mut lambda = spec.terminal_gradient(&xs[steps]);
            let mut costate = vec![DVector::zeros(0); steps + 1];
            let mut left = vec![DVector::zeros(0); steps];
            costate[steps] = space.riesz(&lambda);
            for n in (0..steps).rev() {
                let mu = stepper.solve_transpose(n, &lambda);
                let (jx, _) = stepper.linearization(
                    n,
                    &xs[n],
                    &control[n],
                    noise.paths[p].dw[n],
                    noise.dh(p, n),
                );
                lambda = jx.tr_mul(&mu)
                    + spec.running_state_gradient(grid.time(n), &xs[n], &control[n]) * dt;
                costate[n] = space.riesz(&lambda);
                left[n] = mu;
            }
            (costate, left)
        })
        .collect();
    let (costate, left): (Vec<_>, Vec<_>) = sweeps.into_iter().unzip();

    let paths = noise.n_paths() as f64;
    let m = problem.jump_dim();
    let mut p_hat = Vec::with_capacity(steps);
    let mut q_hat = Vec::with_capacity(steps);
    let mut r_hat = Vec::with_capacity(steps);
    for n in 0..steps {
        let mean = left
            .iter()
            .fold(DVector::zeros(problem.dim()), |acc, l| acc + &l[n])
            / paths;
        let project = |weight: &dyn Fn(usize) -> f64| {
            let w_mean = match regression {
                Regression::EnsembleMean => 0.0,
                Regression::Centered => (0..noise.n_paths()).map(weight).sum::<f64>() / paths,
            };
            let mut acc = DVector::zeros(problem.dim());
            for (p, l) in left.iter().enumerate() {
                let coef = weight(p) - w_mean;
                match regression {
                    Regression::EnsembleMean => acc.axpy(coef, &l[n], 1.0),
                    Regression::Centered => acc.axpy(coef, &(&l[n] - &mean), 1.0),
                }
            }
            acc / (paths * dt)
        };
        q_hat.push(project(&|p| noise.paths[p].dw[n]));
        r_hat.push((0..m).map(|i| project(&|p| noise.dh(p, n)[i])).collect());
        p_hat.push(mean);
    }
    Ok(AdjointEnsemble {
        costate,
        left,
        p_hat,
        q_hat,
        r_hat,
    })
}

/// Least-squares Monte Carlo estimates of the martingale coefficients.
///
/// `q[n][p]` is the fitted value at path `p` of the regression of
/// `μ_{n+1} ΔW_n / Δt` on the features `(1, X_n)`; `r[n][i][p]` does the same
/// for `ΔH^i_n`. Fitted values are conditional-expectation estimates given
/// the time-`t_n` state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCoefficients {
    pub q: Vec<Vec<DVector<f64>>>,
    pub r: Vec<Vec<Vec<DVector<f64>>>>,
}

fn ensemble_average(values: &[DVector<f64>]) -> DVector<f64> {
    let dim = values.first().map_or(0, DVector::len);
    values.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / values.len() as f64
}

impl ConditionalCoefficients {
    pub fn q_mean(&self, n: usize) -> DVector<f64> {
        ensemble_average(&self.q[n])
    }

    pub fn r_mean(&self, n: usize, i: usize) -> DVector<f64> {
        ensemble_average(&self.r[n][i])
    }
}

/// Regresses the weighted adjoint on the state at every node. Degenerate
/// state directions, such as a deterministic initial state, are dropped.
pub fn regress_coefficients(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    traj: &TrajectoryEnsemble,
    adjoint: &AdjointEnsemble,
) -> Result<ConditionalCoefficients, ControlError> {
    let paths = noise.n_paths();
    let steps = noise.grid.steps();
    if traj.n_paths() != paths || adjoint.left.len() != paths {
        return Err(ControlError::Dimension(
            "adjoint, trajectory and noise ensembles differ".into(),
        ));
    }
    let dt = noise.grid.dt();
    let m = problem.jump_dim();
    let mut q = Vec::with_capacity(steps);
    let mut r = Vec::with_capacity(steps);
    let dim = problem.dim();
    let width = dim * (m + 1);
    for n in 0..steps {
        let states = DMatrix::from_fn(paths, dim, |p, j| traj.states[p][n][j]);
        let targets = DMatrix::from_fn(paths, width, |p, col| {
            let weight = match col / dim {
                0 => noise.paths[p].dw[n],
                i => noise.dh(p, n)[i - 1],
            };
            weight * adjoint.left[p][n][col % dim] / dt
        });
        let state_mean = states.row_mean();
        let target_mean = targets.row_mean();
        let centered = DMatrix::from_fn(paths, dim, |p, j| states[(p, j)] - state_mean[j]);
        let covariance = centered.tr_mul(&centered);
        let eigen = SymmetricEigen::new(covariance);
        let cutoff = 1e-12 * states.norm_squared().max(f64::MIN_POSITIVE);
        let kept = eigen
            .eigenvalues
            .map(|v| if v > cutoff { v.recip() } else { 0.0 });
        let inverse =
            &eigen.eigenvectors * DMatrix::from_diagonal(&kept) * eigen.eigenvectors.transpose();
        let slope = inverse * centered.tr_mul(&targets);
        let fitted = centered * slope;
        let block = |k: usize| -> Vec<DVector<f64>> {
            (0..paths)
                .map(|p| {
                    DVector::from_fn(dim, |j, _| {
                        target_mean[k * dim + j] + fitted[(p, k * dim + j)]
                    })
                })
                .collect()
        };
        q.push(block(0));
        r.push((1..=m).map(block).collect());
    }
    Ok(ConditionalCoefficients { q, r })
}

/// Gradient of the discretized cost with respect to the control, divided by
/// `Δt`, i.e. the discrete `ℋ_u` at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    /// Covector `G_n = (∂J/∂u_n) / Δt`.
    pub covector: Vec<DVector<f64>>,
    /// Riesz representative `G_U⁻¹ G_n` in the control space.
    pub riesz: Vec<DVector<f64>>,
    /// `(Δt Σ_n G_nᵀ G_U⁻¹ G_n)^{1/2}`.
    pub norm: f64,
    pub dt: f64,
}

impl GradientField {
    /// Directional derivative `Σ_n (∂J/∂u_n) · v_n`.
    pub fn pair(&self, direction: &[DVector<f64>]) -> f64 {
        self.covector
            .iter()
            .zip(direction)
            .map(|(g, v)| g.dot(v))
            .sum::<f64>()
            * self.dt
    }

    /// Riesz-gradient vectors as a control.
    pub fn as_control(&self) -> Vec<DVector<f64>> {
        self.riesz.clone()
    }
}

/// Assembles `G_n = E[K_nᵀ μ_{n+1}] / Δt + E[l_u(t_n, X_n, u_n)]`.
pub fn hamiltonian_gradient(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    traj: &TrajectoryEnsemble,
    control: &[DVector<f64>],
    adjoint: &AdjointEnsemble,
    spec: &dyn CostSpec,
) -> Result<GradientField, ControlError> {
    check_shapes(problem, noise, traj, control)?;
    let stepper = Stepper::new(problem, noise.grid)?;
    let grid = noise.grid;
    let dt = grid.dt();
    let k = problem.control_dim();
    let paths = noise.n_paths() as f64;
    let covector: Vec<DVector<f64>> = (0..grid.steps())
        .into_par_iter()
        .map(|n| {
            let t = grid.time(n);
            let mut g = DVector::zeros(k);
            for p in 0..noise.n_paths() {
                let x = &traj.states[p][n];
                let (_, ju) =
                    stepper.linearization(n, x, &control[n], noise.paths[p].dw[n], noise.dh(p, n));
                g += ju.tr_mul(&adjoint.left[p][n]) / dt
                    + spec.running_control_gradient(t, x, &control[n]);
            }
            g / paths
        })
        .collect();
    let chol = problem.control_gram.clone().cholesky().ok_or_else(|| {
        ControlError::Dimension("control Gram matrix is not positive definite".into())
    })?;
    let riesz: Vec<DVector<f64>> = covector.iter().map(|g| chol.solve(g)).collect();
    let norm = (covector
        .iter()
        .zip(&riesz)
        .map(|(g, r)| g.dot(r))
        .sum::<f64>()
        * dt)
        .sqrt();
    Ok(GradientField {
        covector,
        riesz,
        norm,
        dt,
    })
}

/// Both sides of the discrete duality relation
/// `E[Φ_x(X_N)·Y_N + Σ_n l_x·Y_n Δt] = E[Σ_n (K_nᵀ μ_{n+1})·v_n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(|lhs|, 1)`.
    pub residual: f64,
}

pub fn duality_check(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    traj: &TrajectoryEnsemble,
    control: &[DVector<f64>],
    variation: &TrajectoryEnsemble,
    adjoint: &AdjointEnsemble,
    direction: &[DVector<f64>],
    spec: &dyn CostSpec,
) -> Result<DualityReport, ControlError> {
    check_shapes(problem, noise, traj, control)?;
    let stepper = Stepper::new(problem, noise.grid)?;
    let grid = noise.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let sides: Vec<(f64, f64)> = (0..noise.n_paths())
        .into_par_iter()
        .map(|p| {
            let (xs, ys) = (&traj.states[p], &variation.states[p]);
            let mut lhs = spec.terminal_gradient(&xs[steps]).dot(&ys[steps]);
            let mut rhs = 0.0;
            for n in 0..steps {
                lhs += spec
                    .running_state_gradient(grid.time(n), &xs[n], &control[n])
                    .dot(&ys[n])
                    * dt;
                let (_, ju) = stepper.linearization(
                    n,
                    &xs[n],
                    &control[n],
                    noise.paths[p].dw[n],
                    noise.dh(p, n),
                );
                rhs += ju.tr_mul(&adjoint.left[p][n]).dot(&direction[n]);
            }
            (lhs, rhs)
        })
        .collect();
    let paths = noise.n_paths() as f64;
    let lhs = sides.iter().map(|s| s.0).sum::<f64>() / paths;
    let rhs = sides.iter().map(|s| s.1).sum::<f64>() / paths;
    Ok(DualityReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / lhs.abs().max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    use super::*;
    use crate::control::cost::QuadraticCost;
    use crate::control::fixtures::{noise, problem, smooth_direction};
    use crate::control::{evaluate_cost, linearize};
    use crate::galerkin::GalerkinSpace;
    use crate::see::{
        loglog_slope, solve_ensemble, AffineCoefficients, CoercivityConstants, Operator,
    };

    fn energy(p: &GelfandProblem) -> QuadraticCost {
        QuadraticCost::energy(p.space.gram_h(), &p.control_gram)
    }

    fn deviation(
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
                worst = worst.max(d.norm());
            }
        }
        worst
    }

    #[test]
    fn zero_direction_gives_zero_variation() {
        let p = problem(true);
        let w = noise(8, 6, 1);
        let u = smooth_direction(8, 5, 0.0);
        let traj = solve_ensemble(&p, &w, &u).unwrap();
        let zero = vec![DVector::zeros(5); 8];
        let y = variation_solve(&p, &w, &traj, &u, &zero).unwrap();
        assert!(y
            .states
            .iter()
            .flatten()
            .all(|v| v.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn variation_is_exact_for_linear_dynamics() {
        let p = problem(false);
        let w = noise(12, 5, 2);
        let u = smooth_direction(12, 5, 0.3);
        let v = smooth_direction(12, 5, 2.0);
        let traj = solve_ensemble(&p, &w, &u).unwrap();
        let y = variation_solve(&p, &w, &traj, &u, &v).unwrap();
        let shifted: Vec<_> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let moved = solve_ensemble(&p, &w, &shifted).unwrap();
        let scale = deviation(&moved, &traj, None);
        assert!(deviation(&moved, &traj, Some((&y, 1.0))) <= 1e-12 * scale);
    }

    #[test]
    fn variation_rates_for_nonlinear_drift() {
        let p = problem(true);
        let w = noise(16, 8, 3);
        let u = smooth_direction(16, 5, 0.1);
        let v = smooth_direction(16, 5, 1.7);
        let traj = solve_ensemble(&p, &w, &u).unwrap();
        let y = variation_solve(&p, &w, &traj, &u, &v).unwrap();
        let eps = [1e-1, 1e-2, 1e-3, 1e-4];
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for e in eps {
            let shifted: Vec<_> = u.iter().zip(&v).map(|(a, b)| a + b * e).collect();
            let moved = solve_ensemble(&p, &w, &shifted).unwrap();
            first.push(deviation(&moved, &traj, None));
            second.push(deviation(&moved, &traj, Some((&y, e))));
        }
        assert!(loglog_slope(&eps, &first) >= 0.95);
        assert!(loglog_slope(&eps, &second) >= 1.9, "{second:?}");
    }

    #[test]
    fn linear_terminal_cost_without_dynamics() {
        let n = 3;
        let m = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { 0.5 });
        let space = GalerkinSpace::from_matrices(m.clone(), m.clone()).unwrap();
        let p = GelfandProblem {
            drift_operator: Operator::zeros(n, n),
            noise_operator: Operator::zeros(n, n),
            coefficients: Arc::new(AffineCoefficients::zero(n, n, 2)),
            constants: CoercivityConstants {
                alpha: 1.0,
                lambda: 1.0,
                bound: 10.0,
            },
            initial: DVector::from_element(n, 1.0),
            control_gram: m.clone(),
            space,
        };
        let phi = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let mut spec = QuadraticCost::zero(n, n);
        spec.terminal_linear = &m * &phi;
        let w = noise(6, 20, 4);
        let u = vec![DVector::zeros(n); 6];
        let traj = solve_ensemble(&p, &w, &u).unwrap();
        let adj = pathwise_adjoint(&p, &w, &traj, &u, &spec, Regression::Centered).unwrap();
        for path in &adj.costate {
            for pn in path {
                assert_relative_eq!(pn, &phi, max_relative = 1e-12);
            }
        }
        for n in 0..6 {
            assert!(adj.q_hat[n].norm() < 1e-12);
            assert!(adj.r_hat[n].iter().all(|r| r.norm() < 1e-12));
        }
        // plain ensemble means only vanish up to the sample mean of the increments
        let plain = pathwise_adjoint(&p, &w, &traj, &u, &spec, Regression::EnsembleMean).unwrap();
        let mean_dw = w.paths.iter().map(|q| q.dw[2]).sum::<f64>() / 20.0;
        assert_relative_eq!(
            plain.q_hat[2],
            &phi * (mean_dw / w.grid.dt()),
            max_relative = 1e-10
        );
    }

    #[test]
    fn control_only_cost_has_gradient_two_u_plus_const() {
        let n = 2;
        let space =
            GalerkinSpace::from_matrices(DMatrix::identity(n, n), DMatrix::identity(n, n)).unwrap();
        let p = GelfandProblem {
            drift_operator: Operator::zeros(n, n),
            noise_operator: Operator::zeros(n, n),
            coefficients: Arc::new(AffineCoefficients::zero(n, n, 0)),
            constants: CoercivityConstants {
                alpha: 1.0,
                lambda: 1.0,
                bound: 10.0,
            },
            initial: DVector::zeros(n),
            control_gram: DMatrix::identity(n, n),
            space,
        };
        let mut spec = QuadraticCost::zero(n, n);
        spec.control = DMatrix::identity(n, n);
        spec.control_linear = DVector::from_vec(vec![0.3, -0.7]);
        let w = noise(4, 3, 5);
        let mut w0 = w.clone();
        w0.dim = 0;
        w0.paths.iter_mut().for_each(|q| q.dh.clear());
        let u = smooth_direction(4, n, 0.5);
        let lin = linearize(&p, &w0, &spec, &u, Regression::EnsembleMean).unwrap();
        for (g, un) in lin.gradient.covector.iter().zip(&u) {
            assert_relative_eq!(g, &(un * 2.0 + &spec.control_linear), max_relative = 1e-14);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = problem(true);
        let w = noise(10, 16, 6);
        let spec = energy(&p);
        let u = smooth_direction(10, 5, 0.4);
        let lin = linearize(&p, &w, &spec, &u, Regression::EnsembleMean).unwrap();
        let h = 1e-5;
        for (node, coord) in [(0, 0), (3, 2), (7, 4), (9, 1)] {
            let bump = |s: f64| {
                let mut v = u.clone();
                v[node][coord] += s * h;
                evaluate_cost(&p, &w, &spec, &v).unwrap().mean
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
            let exact = lin.gradient.covector[node][coord] * lin.gradient.dt;
            assert_relative_eq!(exact, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn duality_holds_to_round_off() {
        for nonlinear in [false, true] {
            let p = problem(nonlinear);
            let w = noise(12, 10, 7);
            let spec = energy(&p);
            let u = smooth_direction(12, 5, 0.9);
            let traj = solve_ensemble(&p, &w, &u).unwrap();
            let adj = pathwise_adjoint(&p, &w, &traj, &u, &spec, Regression::EnsembleMean).unwrap();
            for phase in [0.0, 1.0, 2.5] {
                let v = smooth_direction(12, 5, phase);
                let y = variation_solve(&p, &w, &traj, &u, &v).unwrap();
                let report = duality_check(&p, &w, &traj, &u, &y, &adj, &v, &spec).unwrap();
                assert!(report.residual <= 1e-10, "{report:?}");
            }
            let zero = vec![DVector::zeros(5); 12];
            let y = variation_solve(&p, &w, &traj, &u, &zero).unwrap();
            let report = duality_check(&p, &w, &traj, &u, &y, &adj, &zero, &spec).unwrap();
            assert_eq!((report.lhs, report.rhs), (0.0, 0.0));
        }
    }

    #[test]
    fn ensemble_mean_identity_reproduces_the_gradient() {
        let p = problem(false);
        let w = noise(8, 12, 8);
        let spec = energy(&p);
        let u = smooth_direction(8, 5, 1.1);
        let lin = linearize(&p, &w, &spec, &u, Regression::EnsembleMean).unwrap();
        let adj = &lin.adjoint;
        for n in 0..8 {
            let mut identity = &u[n] * 2.0 + &adj.p_hat[n] + &adj.q_hat[n];
            for r in &adj.r_hat[n] {
                identity += r;
            }
            assert_relative_eq!(
                identity,
                lin.gradient.riesz[n],
                max_relative = 1e-10,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn state_regression_keeps_ensemble_means() {
        let p = problem(false);
        let w = noise(8, 40, 3);
        let spec = energy(&p);
        let u = smooth_direction(8, 5, 0.7);
        let lin = linearize(&p, &w, &spec, &u, Regression::EnsembleMean).unwrap();
        let fitted = regress_coefficients(&p, &w, &lin.trajectory, &lin.adjoint).unwrap();
        for n in 0..8 {
            assert_relative_eq!(fitted.q_mean(n), lin.adjoint.q_hat[n], epsilon = 1e-10);
            for i in 0..p.jump_dim() {
                assert_relative_eq!(
                    fitted.r_mean(n, i),
                    lin.adjoint.r_hat[n][i],
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn deterministic_initial_state_gives_constant_fit() {
        let p = problem(true);
        let w = noise(6, 30, 11);
        let spec = energy(&p);
        let u = smooth_direction(6, 5, 0.4);
        let lin = linearize(&p, &w, &spec, &u, Regression::EnsembleMean).unwrap();
        let fitted = regress_coefficients(&p, &w, &lin.trajectory, &lin.adjoint).unwrap();
        for q in &fitted.q[0] {
            assert_relative_eq!(*q, fitted.q_mean(0), epsilon = 1e-12);
        }
        let spread = fitted.q[3]
            .iter()
            .map(|q| (q - fitted.q_mean(3)).norm())
            .fold(0.0, f64::max);
        assert!(spread > 0.0);
    }
}
