use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::see::TrajectoryEnsemble;

/// Running cost `l(t, x, u)` and terminal cost `Φ(x)` on Galerkin
/// coordinates. Gradients are coordinate derivatives (covectors).
pub trait CostSpec: Send + Sync + fmt::Debug {
    fn running(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn running_state_gradient(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_control_gradient(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn terminal(&self, x: &DVector<f64>) -> f64;
    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `l = xᵀQx + qᵀx + uᵀRu + rᵀu`, `Φ = xᵀPx + pᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub state: DMatrix<f64>,
    pub state_linear: DVector<f64>,
    pub control: DMatrix<f64>,
    pub control_linear: DVector<f64>,
    pub terminal: DMatrix<f64>,
    pub terminal_linear: DVector<f64>,
}

impl QuadraticCost {
    /// `l = ‖x‖²_H + ‖u‖²_U`, `Φ = ‖x‖²_H`.
    pub fn energy(gram_h: &DMatrix<f64>, gram_u: &DMatrix<f64>) -> Self {
        let (n, k) = (gram_h.nrows(), gram_u.nrows());
        Self {
            state: gram_h.clone(),
            state_linear: DVector::zeros(n),
            control: gram_u.clone(),
            control_linear: DVector::zeros(k),
            terminal: gram_h.clone(),
            terminal_linear: DVector::zeros(n),
        }
    }

    pub fn zero(n: usize, k: usize) -> Self {
        Self {
            state: DMatrix::zeros(n, n),
            state_linear: DVector::zeros(n),
            control: DMatrix::zeros(k, k),
            control_linear: DVector::zeros(k),
            terminal: DMatrix::zeros(n, n),
            terminal_linear: DVector::zeros(n),
        }
    }
}

fn quadratic_gradient(m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    m * v + m.tr_mul(v)
}

impl CostSpec for QuadraticCost {
    fn running(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (&self.state * x).dot(x)
            + self.state_linear.dot(x)
            + (&self.control * u).dot(u)
            + self.control_linear.dot(u)
    }

    fn running_state_gradient(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        quadratic_gradient(&self.state, x) + &self.state_linear
    }

    fn running_control_gradient(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        quadratic_gradient(&self.control, u) + &self.control_linear
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        (&self.terminal * x).dot(x) + self.terminal_linear.dot(x)
    }

    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        quadratic_gradient(&self.terminal, x) + &self.terminal_linear
    }
}

/// Sample-average cost with its Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

impl CostEstimate {
    pub(crate) fn from_samples(per_path: Vec<f64>) -> Self {
        let k = per_path.len() as f64;
        let mean = per_path.iter().sum::<f64>() / k;
        let stderr = if per_path.len() > 1 {
            (per_path.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            per_path,
        }
    }
}

/// `J = E[Σ_n l(t_n, X_n, u_n) Δt + Φ(X_N)]` over the ensemble.
pub fn cost(
    traj: &TrajectoryEnsemble,
    control: &[DVector<f64>],
    spec: &dyn CostSpec,
) -> CostEstimate {
    let grid = traj.grid;
    let dt = grid.dt();
    let per_path = traj
        .states
        .iter()
        .map(|states| {
            let running: f64 = control
                .iter()
                .enumerate()
                .map(|(n, u)| spec.running(grid.time(n), &states[n], u))
                .sum();
            running * dt + spec.terminal(&states[grid.steps()])
        })
        .collect();
    CostEstimate::from_samples(per_path)
}

/// Sampled growth constants: the smallest `C` with
/// `|l| ≤ C(1 + ‖x‖² + ‖u‖²)` and `‖l_x‖ + ‖l_u‖ ≤ C(1 + ‖x‖ + ‖u‖)`
/// on random points, in Euclidean coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthReport {
    pub value_constant: f64,
    pub gradient_constant: f64,
}

pub fn growth_constants(
    spec: &dyn CostSpec,
    n: usize,
    k: usize,
    samples: usize,
    seed: u64,
) -> GrowthReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GrowthReport {
        value_constant: 0.0,
        gradient_constant: 0.0,
    };
    for s in 0..samples {
        let scale = 10f64.powi(s as i32 % 5 - 2);
        let mut draw = |len| {
            DVector::from_fn(len, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        };
        let (x, u): (DVector<f64>, DVector<f64>) = (draw(n), draw(k));
        let (nx, nu) = (x.norm(), u.norm());
        let value = spec.running(0.0, &x, &u).abs().max(spec.terminal(&x).abs());
        let grad = spec.running_state_gradient(0.0, &x, &u).norm()
            + spec.running_control_gradient(0.0, &x, &u).norm()
            + spec.terminal_gradient(&x).norm();
        report.value_constant = report.value_constant.max(value / (1.0 + nx * nx + nu * nu));
        report.gradient_constant = report.gradient_constant.max(grad / (1.0 + nx + nu));
    }
    report
}
