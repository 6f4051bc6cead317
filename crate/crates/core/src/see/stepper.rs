use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;

use super::problem::{Channel, GelfandProblem};
use crate::error::SeeError;
use crate::levy::{PathBundle, TimeGrid};
use crate::teugels::TeugelsIncrements;

/// Brownian and Teugels increments of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    pub dw: Vec<f64>,
    /// Step-major, `dim` entries per step.
    pub dh: Vec<f64>,
}

/// Noise ensemble shared by the forward, variation and adjoint sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingNoise {
    pub grid: TimeGrid,
    /// Number of Teugels martingales available per step.
    pub dim: usize,
    pub paths: Vec<PathNoise>,
}

impl DrivingNoise {
    pub fn new(bundles: &[PathBundle], increments: &TeugelsIncrements) -> Result<Self, SeeError> {
        if bundles.len() != increments.n_paths() {
            return Err(SeeError::Dimension(format!(
                "{} bundles but {} increment paths",
                bundles.len(),
                increments.n_paths()
            )));
        }
        let grid = increments.grid;
        let paths = bundles
            .iter()
            .zip(&increments.per_path)
            .map(|(b, dh)| {
                if b.grid != grid {
                    return Err(SeeError::Dimension(
                        "bundle grid differs from increment grid".into(),
                    ));
                }
                Ok(PathNoise {
                    dw: b.dw.clone(),
                    dh: dh.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            grid,
            dim: increments.dim,
            paths,
        })
    }

    /// Brownian increments only, without Teugels martingales.
    pub fn brownian(bundles: &[PathBundle]) -> Result<Self, SeeError> {
        let grid = bundles
            .first()
            .map(|b| b.grid)
            .ok_or_else(|| SeeError::Dimension("empty bundle list".into()))?;
        if bundles.iter().any(|b| b.grid != grid) {
            return Err(SeeError::Dimension("bundles on different grids".into()));
        }
        let paths = bundles
            .iter()
            .map(|b| PathNoise {
                dw: b.dw.clone(),
                dh: Vec::new(),
            })
            .collect();
        Ok(Self {
            grid,
            dim: 0,
            paths,
        })
    }

    /// Noise-free ensemble of a single path.
    pub fn deterministic(grid: TimeGrid, dim: usize) -> Self {
        let n = grid.steps();
        Self {
            grid,
            dim,
            paths: vec![PathNoise {
                dw: vec![0.0; n],
                dh: vec![0.0; n * dim],
            }],
        }
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn dh(&self, path: usize, n: usize) -> &[f64] {
        &self.paths[path].dh[n * self.dim..(n + 1) * self.dim]
    }

    pub fn subset(&self, paths: std::ops::Range<usize>) -> Self {
        Self {
            grid: self.grid,
            dim: self.dim,
            paths: self.paths[paths].to_vec(),
        }
    }
}

/// Per-path, per-node Galerkin coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub grid: TimeGrid,
    pub states: Vec<Vec<DVector<f64>>>,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    pub fn terminal(&self, path: usize) -> &DVector<f64> {
        self.states[path]
            .last()
            .expect("trajectory has at least one node")
    }

    /// Ensemble mean at node `n`.
    pub fn mean_at(&self, n: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.states[0][n].len());
        for p in &self.states {
            m += &p[n];
        }
        m / self.n_paths() as f64
    }
}

/// Drift-implicit, noise-explicit Euler stepper with cached factorizations
/// of `M − Δt A(t_{n+1})`.
pub struct Stepper<'a> {
    problem: &'a GelfandProblem,
    grid: TimeGrid,
    implicit: Vec<LU<f64, Dyn, Dyn>>,
    implicit_t: Vec<LU<f64, Dyn, Dyn>>,
}

const PIVOT_RATIO: f64 = 1e-14;

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a GelfandProblem, grid: TimeGrid) -> Result<Self, SeeError> {
        problem.validate()?;
        let dt = grid.dt();
        let nodes = if problem.drift_operator.is_constant() {
            1
        } else {
            grid.steps()
        };
        let mut implicit = Vec::with_capacity(nodes);
        let mut implicit_t = Vec::with_capacity(nodes);
        for k in 0..nodes {
            let t = grid.time(k + 1);
            let mat: DMatrix<f64> = problem.space.gram_h() - &*problem.drift_operator.at(t) * dt;
            let lu = mat.clone().lu();
            let u = lu.u();
            let diag = u.diagonal().map(f64::abs);
            let ratio = diag.min() / diag.max();
            if !(ratio > PIVOT_RATIO) {
                return Err(SeeError::SingularImplicit {
                    t,
                    pivot_ratio: ratio,
                });
            }
            implicit.push(lu);
            implicit_t.push(mat.transpose().lu());
        }
        Ok(Self {
            problem,
            grid,
            implicit,
            implicit_t,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn problem(&self) -> &GelfandProblem {
        self.problem
    }

    fn factor(&self, n: usize) -> usize {
        if self.implicit.len() == 1 {
            0
        } else {
            n
        }
    }

    /// Solves `(M − Δt A(t_{n+1})) y = rhs`.
    pub fn solve(&self, n: usize, rhs: &DVector<f64>) -> DVector<f64> {
        self.implicit[self.factor(n)]
            .solve(rhs)
            .expect("factorization checked at construction")
    }

    /// Solves `(M − Δt A(t_{n+1}))ᵀ y = rhs`.
    pub fn solve_transpose(&self, n: usize, rhs: &DVector<f64>) -> DVector<f64> {
        self.implicit_t[self.factor(n)]
            .solve(rhs)
            .expect("factorization checked at construction")
    }

    /// Explicit part of step `n`:
    /// `M X_n + Δt b + (B X_n + g) ΔW + Σ_i σ^i ΔH^i`.
    pub fn explicit_part(
        &self,
        n: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dw: f64,
        dh: &[f64],
    ) -> DVector<f64> {
        let p = self.problem;
        let t = self.grid.time(n);
        let dt = self.grid.dt();
        let coef = &p.coefficients;
        let mut rhs = p.space.gram_h() * x;
        rhs.axpy(dt, &coef.eval(Channel::Drift, t, x, u), 1.0);
        let mut diffusion = &*p.noise_operator.at(t) * x;
        diffusion += coef.eval(Channel::Diffusion, t, x, u);
        rhs.axpy(dw, &diffusion, 1.0);
        for i in 0..coef.jump_dim() {
            rhs.axpy(dh[i], &coef.eval(Channel::Jump(i), t, x, u), 1.0);
        }
        rhs
    }

    /// `X_{n+1}` from `X_n`.
    pub fn step(
        &self,
        n: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dw: f64,
        dh: &[f64],
    ) -> DVector<f64> {
        self.solve(n, &self.explicit_part(n, x, u, dw, dh))
    }

    /// Jacobians of the explicit part with respect to `X_n` and `u_n`:
    /// `M + Δt b_x + (B + g_x) ΔW + Σ σ^i_x ΔH^i` and `Δt b_u + g_u ΔW + Σ σ^i_u ΔH^i`.
    pub fn linearization(
        &self,
        n: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dw: f64,
        dh: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.problem;
        let t = self.grid.time(n);
        let dt = self.grid.dt();
        let coef = &p.coefficients;
        let jb = coef.jacobian(Channel::Drift, t, x, u);
        let jg = coef.jacobian(Channel::Diffusion, t, x, u);
        let mut jx = p.space.gram_h() + jb.state * dt;
        jx += (&*p.noise_operator.at(t) + jg.state) * dw;
        let mut ju = jb.control * dt + jg.control * dw;
        for i in 0..coef.jump_dim() {
            let js = coef.jacobian(Channel::Jump(i), t, x, u);
            jx += js.state * dh[i];
            ju += js.control * dh[i];
        }
        (jx, ju)
    }
}

fn check_noise(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    control: &[DVector<f64>],
) -> Result<(), SeeError> {
    if problem.jump_dim() > noise.dim {
        return Err(SeeError::Dimension(format!(
            "problem uses {} Teugels martingales but the noise carries {}",
            problem.jump_dim(),
            noise.dim
        )));
    }
    if control.len() != noise.grid.steps() {
        return Err(SeeError::Dimension(format!(
            "control has {} nodes, grid has {} steps",
            control.len(),
            noise.grid.steps()
        )));
    }
    if let Some(u) = control.iter().find(|u| u.len() != problem.control_dim()) {
        return Err(SeeError::Dimension(format!(
            "control value of length {} for control dimension {}",
            u.len(),
            problem.control_dim()
        )));
    }
    Ok(())
}

/// Divergence guard: `‖X_n‖_H` may not exceed this multiple of the initial scale.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

fn solve_path(
    stepper: &Stepper<'_>,
    noise: &DrivingNoise,
    path: usize,
    control: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, SeeError> {
    let p = stepper.problem();
    let steps = noise.grid.steps();
    let scale = p.space.h_norm2(&p.initial).sqrt().max(1.0) * DIVERGENCE_FACTOR;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(p.initial.clone());
    for n in 0..steps {
        let x = stepper.step(
            n,
            &states[n],
            &control[n],
            noise.paths[path].dw[n],
            noise.dh(path, n),
        );
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SeeError::NonFinite { path, step: n + 1 });
        }
        let norm = p.space.h_norm2(&x).sqrt();
        if norm > scale {
            return Err(SeeError::Divergence {
                path,
                step: n + 1,
                norm,
            });
        }
        states.push(x);
    }
    Ok(states)
}

/// Runs the stepper over every path (in parallel, deterministic result).
pub fn solve_ensemble(
    problem: &GelfandProblem,
    noise: &DrivingNoise,
    control: &[DVector<f64>],
) -> Result<TrajectoryEnsemble, SeeError> {
    let stepper = Stepper::new(problem, noise.grid)?;
    solve_with(&stepper, noise, control)
}

/// As [`solve_ensemble`] with a prepared stepper.
pub fn solve_with(
    stepper: &Stepper<'_>,
    noise: &DrivingNoise,
    control: &[DVector<f64>],
) -> Result<TrajectoryEnsemble, SeeError> {
    check_noise(stepper.problem(), noise, control)?;
    let states = (0..noise.n_paths())
        .into_par_iter()
        .map(|path| solve_path(stepper, noise, path, control))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrajectoryEnsemble {
        grid: noise.grid,
        states,
    })
}

/// Zero control on the grid.
pub fn zero_control(problem: &GelfandProblem, grid: TimeGrid) -> Vec<DVector<f64>> {
    vec![DVector::zeros(problem.control_dim()); grid.steps()]
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    use super::*;
    use crate::galerkin::{Basis1d, GalerkinSpace};
    use crate::levy::{simulate_bundle, LevyTriplet};
    use crate::see::{heat_operator, AffineCoefficients, CoercivityConstants, Operator};

    fn scalar(drift: f64, noise: f64, x0: f64) -> GelfandProblem {
        let space = GalerkinSpace::from_matrices(dmatrix![1.0], dmatrix![1.0]).unwrap();
        GelfandProblem {
            space,
            drift_operator: Operator::constant(dmatrix![drift]),
            noise_operator: Operator::constant(dmatrix![noise]),
            coefficients: Arc::new(AffineCoefficients::zero(1, 1, 0)),
            constants: CoercivityConstants {
                alpha: 1.0,
                lambda: 1.0,
                bound: 10.0,
            },
            initial: dvector![x0],
            control_gram: dmatrix![1.0],
        }
    }

    fn brownian_noise(grid: TimeGrid, paths: usize, seed: u64) -> DrivingNoise {
        let triplet = LevyTriplet::brownian(1.0).unwrap();
        DrivingNoise::brownian(&simulate_bundle(&triplet, grid, paths, seed)).unwrap()
    }

    #[test]
    fn zero_coefficients_keep_state() {
        let space = GalerkinSpace::from_basis(Basis1d::Hat { length: 1.0, n: 5 }).unwrap();
        let problem = GelfandProblem {
            drift_operator: Operator::zeros(5, 5),
            noise_operator: Operator::zeros(5, 5),
            coefficients: Arc::new(AffineCoefficients::zero(5, 5, 2)),
            constants: CoercivityConstants {
                alpha: 1.0,
                lambda: 0.0,
                bound: 1.0,
            },
            initial: DVector::from_fn(5, |i, _| i as f64 - 1.5),
            control_gram: space.gram_h().clone(),
            space,
        };
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let noise = DrivingNoise::deterministic(grid, 2);
        let mut noisy = noise.clone();
        noisy.paths[0].dw.iter_mut().for_each(|w| *w = 0.3);
        noisy.paths[0].dh.iter_mut().for_each(|h| *h = -0.2);
        for n in [noise, noisy] {
            let traj = solve_ensemble(&problem, &n, &zero_control(&problem, grid)).unwrap();
            for x in &traj.states[0] {
                assert_relative_eq!(x, &problem.initial, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn scalar_implicit_euler() {
        let a = 3.0;
        let problem = scalar(-a, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let stepper = Stepper::new(&problem, grid).unwrap();
        let x = stepper.step(0, &dvector![2.0], &dvector![0.0], 0.0, &[]);
        assert_relative_eq!(x[0], 2.0 / (1.0 + a * 0.1), max_relative = 1e-15);
    }

    #[test]
    fn heat_step_matches_dense_solve() {
        let n = 6;
        let space = GalerkinSpace::from_basis(Basis1d::Hat { length: 1.0, n }).unwrap();
        let mut coef = AffineCoefficients::zero(n, n, 0);
        coef.diffusion.offset = space.basis.as_ref().unwrap().load(|z| (3.0 * z).cos());
        let problem = GelfandProblem {
            drift_operator: heat_operator(&space, 1.0),
            noise_operator: Operator::zeros(n, n),
            coefficients: Arc::new(coef.clone()),
            constants: CoercivityConstants {
                alpha: 1.0,
                lambda: 0.0,
                bound: 1e3,
            },
            initial: DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin()),
            control_gram: space.gram_h().clone(),
            space: space.clone(),
        };
        let dt = 0.01;
        let dw = 0.137;
        let grid = TimeGrid::new(dt, 1).unwrap();
        let stepper = Stepper::new(&problem, grid).unwrap();
        let got = stepper.step(0, &problem.initial, &DVector::zeros(n), dw, &[]);

        // dense oracle: explicit inverse of (M + Δt K)
        let m = space.gram_h();
        let k = space.form_v();
        let lhs = (m + k * dt).try_inverse().unwrap();
        let want = lhs * (m * &problem.initial + &coef.diffusion.offset * dw);
        assert_relative_eq!(got, want, max_relative = 1e-12);
    }

    #[test]
    fn geometric_brownian_mean() {
        let problem = scalar(-1.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let noise = brownian_noise(grid, 10_000, 11);
        let traj = solve_ensemble(&problem, &noise, &zero_control(&problem, grid)).unwrap();
        let finals: Vec<f64> = (0..traj.n_paths()).map(|p| traj.terminal(p)[0]).collect();
        let k = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / k;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        assert!(
            (mean - (-1.0f64).exp()).abs() < 4.0 * se,
            "mean {mean}, se {se}"
        );
    }

    #[test]
    fn strong_order_one_half() {
        // self-convergence against a reference at 16× the resolution
        let problem = scalar(-1.0, 0.5, 1.0);
        let fine = TimeGrid::new(1.0, 16 * 64).unwrap();
        let triplet = LevyTriplet::brownian(1.0).unwrap();
        let bundles = simulate_bundle(&triplet, fine, 400, 5);
        let reference = solve_ensemble(
            &problem,
            &DrivingNoise::brownian(&bundles).unwrap(),
            &zero_control(&problem, fine),
        )
        .unwrap();
        let mut errors = Vec::new();
        for factor in [64, 32, 16] {
            let coarse: Vec<_> = bundles.iter().map(|b| b.coarsen(factor).unwrap()).collect();
            let noise = DrivingNoise::brownian(&coarse).unwrap();
            let traj =
                solve_ensemble(&problem, &noise, &zero_control(&problem, noise.grid)).unwrap();
            let err = (0..traj.n_paths())
                .map(|p| (traj.terminal(p)[0] - reference.terminal(p)[0]).powi(2))
                .sum::<f64>()
                / traj.n_paths() as f64;
            errors.push(err.sqrt());
        }
        let steps = [16.0, 32.0, 64.0];
        let slope = -crate::see::loglog_slope(&steps, &errors);
        assert!(slope > 0.35, "strong order {slope}, errors {errors:?}");
    }

    #[test]
    fn linear_problems_are_affine_in_the_initial_state() {
        let n = 5;
        let space = GalerkinSpace::from_basis(Basis1d::Hat { length: 1.0, n }).unwrap();
        let mut coef = AffineCoefficients::zero(n, n, 1);
        coef.diffusion.offset = DVector::from_element(n, 0.1);
        coef.jumps[0].state = Operator::constant(space.gram_h() * 0.4);
        coef.drift.offset = DVector::from_element(n, -0.2);
        let base = GelfandProblem {
            drift_operator: heat_operator(&space, 1.0),
            noise_operator: Operator::constant(space.gram_h() * 0.3),
            coefficients: Arc::new(coef),
            constants: CoercivityConstants {
                alpha: 0.5,
                lambda: 1.0,
                bound: 1e3,
            },
            initial: DVector::zeros(n),
            control_gram: space.gram_h().clone(),
            space,
        };
        let grid = TimeGrid::new(0.5, 32).unwrap();
        let mut noise = brownian_noise(grid, 8, 3);
        noise.dim = 1;
        for (p, path) in noise.paths.iter_mut().enumerate() {
            path.dh = (0..32).map(|k| ((p * 32 + k) as f64).sin() * 0.1).collect();
        }
        let u = zero_control(&base, grid);
        let x0 = DVector::from_fn(n, |i, _| i as f64 * 0.3);
        let x1 = DVector::from_fn(n, |i, _| 1.0 - i as f64 * 0.1);
        let run = |x: DVector<f64>| solve_ensemble(&base.with_initial(x), &noise, &u).unwrap();
        let (a, b, c, zero) = (run(&x0 + &x1), run(x0), run(x1), run(DVector::zeros(n)));
        for p in 0..noise.n_paths() {
            let lhs = a.terminal(p) + zero.terminal(p);
            let rhs = b.terminal(p) + c.terminal(p);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-13, max_relative = 1e-12);
        }
    }

    #[test]
    fn non_finite_state_is_reported() {
        let problem = scalar(0.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut noise = DrivingNoise::deterministic(grid, 0);
        noise.paths[0].dw[2] = f64::NAN;
        let err = solve_ensemble(&problem, &noise, &zero_control(&problem, grid)).unwrap_err();
        assert!(matches!(err, SeeError::NonFinite { path: 0, step: 3 }));
    }

    #[test]
    fn divergence_guard_trips() {
        let problem = scalar(0.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut noise = DrivingNoise::deterministic(grid, 0);
        noise.paths[0].dw.iter_mut().for_each(|w| *w = 9.0);
        let err = solve_ensemble(&problem, &noise, &zero_control(&problem, grid)).unwrap_err();
        assert!(matches!(err, SeeError::Divergence { .. }));
    }

    #[test]
    fn singular_implicit_matrix_is_rejected() {
        let problem = scalar(10.0, 0.0, 1.0);
        let grid = TimeGrid::new(0.1, 1).unwrap();
        assert!(matches!(
            Stepper::new(&problem, grid),
            Err(SeeError::SingularImplicit { .. })
        ));
    }
}
