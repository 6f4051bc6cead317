use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::SeeError;
use crate::galerkin::GalerkinSpace;

/// A matrix-valued function of time of the form `base + t · rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    base: DMatrix<f64>,
    rate: Option<DMatrix<f64>>,
}

impl Operator {
    pub fn constant(base: DMatrix<f64>) -> Self {
        Self { base, rate: None }
    }

    pub fn affine(base: DMatrix<f64>, rate: DMatrix<f64>) -> Self {
        if rate.iter().all(|&x| x == 0.0) {
            Self::constant(base)
        } else {
            Self {
                base,
                rate: Some(rate),
            }
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn is_constant(&self) -> bool {
        self.rate.is_none()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn at(&self, t: f64) -> Cow<'_, DMatrix<f64>> {
        match &self.rate {
            None => Cow::Borrowed(&self.base),
            Some(r) => Cow::Owned(&self.base + r * t),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            base: &self.base * s,
            rate: self.rate.as_ref().map(|r| r * s),
        }
    }
}

/// A noise or drift channel of the equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// `b(t, x, u)`, integrated against `dt`.
    Drift,
    /// `g(t, x, u)`, integrated against `dW`.
    Diffusion,
    /// `σ^i(t, x, u)`, integrated against `dH^i` (0-based index).
    Jump(usize),
}

/// Gateaux derivatives of a coefficient in Galerkin coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub state: DMatrix<f64>,
    pub control: DMatrix<f64>,
}

/// Nonlinear coefficients `b, g, σ^i` evaluated as load vectors
/// `((f(t, x, u), e_k)_H)_k`, together with their derivatives.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn control_dim(&self) -> usize;
    /// Truncation level `m` of the Teugels sum.
    fn jump_dim(&self) -> usize;
    fn eval(&self, channel: Channel, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, channel: Channel, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Jacobian;

    fn channels(&self) -> Vec<Channel> {
        let mut c = vec![Channel::Drift, Channel::Diffusion];
        c.extend((0..self.jump_dim()).map(Channel::Jump));
        c
    }
}

/// `f(t, x, u) = S(t) x + C u + f₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub state: Operator,
    pub control: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn zero(n: usize, k: usize) -> Self {
        Self {
            state: Operator::zeros(n, n),
            control: DMatrix::zeros(n, k),
            offset: DVector::zeros(n),
        }
    }

    fn eval(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &*self.state.at(t) * x + &self.control * u + &self.offset
    }
}

/// Drift term `strength · W · sin(x)` with `sin` applied to each coordinate.
/// For nodal bases this is the load of the interpolant of `strength · sin(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SineNonlinearity {
    pub weight: DMatrix<f64>,
    pub strength: f64,
}

/// Affine coefficients, optionally with a smooth nonlinearity in the drift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoefficients {
    pub drift: AffineMap,
    pub diffusion: AffineMap,
    pub jumps: Vec<AffineMap>,
    pub drift_nonlinearity: Option<SineNonlinearity>,
}

impl AffineCoefficients {
    pub fn zero(n: usize, control_dim: usize, m: usize) -> Self {
        Self {
            drift: AffineMap::zero(n, control_dim),
            diffusion: AffineMap::zero(n, control_dim),
            jumps: vec![AffineMap::zero(n, control_dim); m],
            drift_nonlinearity: None,
        }
    }

    fn map(&self, channel: Channel) -> &AffineMap {
        match channel {
            Channel::Drift => &self.drift,
            Channel::Diffusion => &self.diffusion,
            Channel::Jump(i) => &self.jumps[i],
        }
    }

    pub fn map_mut(&mut self, channel: Channel) -> &mut AffineMap {
        match channel {
            Channel::Drift => &mut self.drift,
            Channel::Diffusion => &mut self.diffusion,
            Channel::Jump(i) => &mut self.jumps[i],
        }
    }
}

impl Coefficients for AffineCoefficients {
    fn control_dim(&self) -> usize {
        self.drift.control.ncols()
    }

    fn jump_dim(&self) -> usize {
        self.jumps.len()
    }

    fn eval(&self, channel: Channel, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut v = self.map(channel).eval(t, x, u);
        if let (Channel::Drift, Some(nl)) = (channel, &self.drift_nonlinearity) {
            v += &nl.weight * x.map(f64::sin) * nl.strength;
        }
        v
    }

    fn jacobian(&self, channel: Channel, t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> Jacobian {
        let map = self.map(channel);
        let mut state = map.state.at(t).into_owned();
        if let (Channel::Drift, Some(nl)) = (channel, &self.drift_nonlinearity) {
            let d = x.map(|v| nl.strength * v.cos());
            for j in 0..state.ncols() {
                let mut col = state.column_mut(j);
                col.axpy(d[j], &nl.weight.column(j), 1.0);
            }
        }
        Jacobian {
            state,
            control: map.control.clone(),
        }
    }
}

/// Constants of the coercivity and boundedness assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoercivityConstants {
    pub alpha: f64,
    pub lambda: f64,
    pub bound: f64,
}

/// Galerkin discretization of a controlled evolution equation
///
/// ```text
/// dX = [A X + b(X, u)] dt + [B X + g(X, u)] dW + Σ_i σ^i(X-, u) dH^i
/// ```
#[derive(Debug, Clone)]
pub struct GelfandProblem {
    pub space: GalerkinSpace,
    /// `⟨A(t) e_j, e_i⟩`.
    pub drift_operator: Operator,
    /// `(B(t) e_j, e_i)_H`.
    pub noise_operator: Operator,
    pub coefficients: Arc<dyn Coefficients>,
    pub constants: CoercivityConstants,
    pub initial: DVector<f64>,
    /// Gram matrix of the control space `U`.
    pub control_gram: DMatrix<f64>,
}

impl GelfandProblem {
    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.coefficients.control_dim()
    }

    pub fn jump_dim(&self) -> usize {
        self.coefficients.jump_dim()
    }

    pub fn validate(&self) -> Result<(), SeeError> {
        let n = self.dim();
        let k = self.control_dim();
        let check = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(SeeError::Dimension(format!(
                    "{what}: expected {want:?}, got {got:?}"
                )))
            } else {
                Ok(())
            }
        };
        check("drift operator", self.drift_operator.shape(), (n, n))?;
        check("noise operator", self.noise_operator.shape(), (n, n))?;
        check("initial state", (self.initial.len(), 1), (n, 1))?;
        check("control Gram", self.control_gram.shape(), (k, k))?;
        Ok(())
    }

    pub fn with_coefficients(&self, coefficients: Arc<dyn Coefficients>) -> Self {
        Self {
            coefficients,
            ..self.clone()
        }
    }

    pub fn with_initial(&self, initial: DVector<f64>) -> Self {
        Self {
            initial,
            ..self.clone()
        }
    }

    /// `‖u‖²_U`.
    pub fn control_norm2(&self, u: &DVector<f64>) -> f64 {
        (&self.control_gram * u).dot(u)
    }

    /// Coercivity form `Q(t) = −(A + Aᵀ) + λM − αK − BᵀM⁻¹B`, so that
    /// `vᵀQv = −2⟨Av, v⟩ + λ‖v‖²_H − α‖v‖²_V − ‖Bv‖²_H`.
    pub fn coercivity_form(&self, t: f64) -> DMatrix<f64> {
        let a = self.drift_operator.at(t);
        let b = self.noise_operator.at(t);
        let minv_b = self.space.gram_cholesky().solve(&*b);
        let c = &self.constants;
        -(&*a + a.transpose()) + self.space.gram_h() * c.lambda
            - self.space.form_v() * c.alpha
            - b.transpose() * minv_b
    }
}

/// Worst coercivity margin observed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub trials: usize,
    /// Smallest `vᵀQv / (‖v‖²_H + ‖v‖²_V)` over random trials.
    pub worst_random_margin: f64,
    /// Smallest generalized eigenvalue of `Q` at the sampled times.
    pub worst_exact_margin: f64,
    pub witness_time: f64,
    pub witness: Vec<f64>,
}

/// Checks `−2⟨A(t)v, v⟩ + λ‖v‖²_H ≥ α‖v‖²_V + ‖B(t)v‖²_H` on `trials` random
/// `(t, v)` pairs with `t ∈ [0, horizon]`, plus the extremal direction at each
/// sampled time.
pub fn check_coercivity(
    problem: &GelfandProblem,
    horizon: f64,
    trials: usize,
    seed: u64,
) -> Result<CoercivityReport, SeeError> {
    let n = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = problem.space.gram_h() + problem.space.form_v();
    let chol = norm.clone().cholesky().expect("sum of SPD matrices");
    let l_inv = chol
        .l()
        .try_inverse()
        .expect("Cholesky factor is invertible");

    let times: Vec<f64> =
        if problem.drift_operator.is_constant() && problem.noise_operator.is_constant() {
            vec![0.0]
        } else {
            let k = trials.clamp(1, 32);
            (0..=k).map(|j| horizon * j as f64 / k as f64).collect()
        };

    let mut worst_random = f64::INFINITY;
    let mut worst_exact = f64::INFINITY;
    let mut witness_time = 0.0;
    let mut witness = vec![0.0; n];

    for (j, &t) in times.iter().enumerate() {
        let q = problem.coercivity_form(t);
        let sym = &l_inv * &q * l_inv.transpose();
        let eig = crate::galerkin::symmetrize(sym).symmetric_eigen();
        let (imin, &lmin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty spectrum");
        if lmin < worst_exact {
            worst_exact = lmin;
            witness_time = t;
            let y = eig.eigenvectors.column(imin).into_owned();
            witness = l_inv.tr_mul(&y).as_slice().to_vec();
        }
        // random directions, spread evenly across the sampled times
        let share = trials / times.len() + usize::from(j < trials % times.len());
        for _ in 0..share {
            let v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let margin = (&q * &v).dot(&v) / (&norm * &v).dot(&v);
            worst_random = worst_random.min(margin);
        }
    }

    let report = CoercivityReport {
        trials,
        worst_random_margin: worst_random,
        worst_exact_margin: worst_exact,
        witness_time,
        witness,
    };
    let margin = worst_exact.min(worst_random);
    if margin < -1e-10 {
        return Err(SeeError::Coercivity {
            t: report.witness_time,
            margin,
            witness: report.witness,
        });
    }
    Ok(report)
}

/// Operator norms `‖A(t)‖_{L(V,V*)}` and `‖B(t)‖_{L(V,H)}` over sampled times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub drift_operator_norm: f64,
    pub noise_operator_norm: f64,
    pub lipschitz_estimate: f64,
    pub bound: f64,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Evaluates the operator norms and a sampled Lipschitz constant of the
/// coefficients, failing when any exceeds `C`.
pub fn check_bounds(
    problem: &GelfandProblem,
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<BoundReport, SeeError> {
    let l = problem.space.form_cholesky().l();
    let l_inv = l.try_inverse().expect("Cholesky factor is invertible");
    let times: Vec<f64> = (0..=samples.max(1))
        .map(|j| horizon * j as f64 / samples.max(1) as f64)
        .collect();
    let mut a_norm: f64 = 0.0;
    let mut b_norm: f64 = 0.0;
    let bound = problem.constants.bound;
    for &t in &times {
        let a = problem.drift_operator.at(t);
        let na = spectral_norm(&(&l_inv * &*a * l_inv.transpose()));
        let b = problem.noise_operator.at(t);
        let minv_b = problem.space.gram_cholesky().solve(&*b);
        let bb = crate::galerkin::symmetrize(&l_inv * (b.transpose() * minv_b) * l_inv.transpose());
        let nb = bb.symmetric_eigenvalues().max().max(0.0).sqrt();
        if na > bound {
            return Err(SeeError::OperatorBound {
                t,
                operator: "A",
                norm: na,
                bound,
            });
        }
        if nb > bound {
            return Err(SeeError::OperatorBound {
                t,
                operator: "B",
                norm: nb,
                bound,
            });
        }
        a_norm = a_norm.max(na);
        b_norm = b_norm.max(nb);
    }

    let lip = lipschitz_estimate(problem, horizon, 4 * samples.max(1), seed);
    if lip > bound {
        return Err(SeeError::OperatorBound {
            t: 0.0,
            operator: "Lipschitz(b, g, σ)",
            norm: lip,
            bound,
        });
    }
    Ok(BoundReport {
        drift_operator_norm: a_norm,
        noise_operator_norm: b_norm,
        lipschitz_estimate: lip,
        bound,
    })
}

/// Largest sampled ratio `Σ_channels ‖f(x,u) − f(x',u')‖_H / (‖x−x'‖_H + ‖u−u'‖_U)`.
pub fn lipschitz_estimate(problem: &GelfandProblem, horizon: f64, trials: usize, seed: u64) -> f64 {
    let n = problem.dim();
    let k = problem.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let coef = &problem.coefficients;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let t = horizon * rand::Rng::random::<f64>(&mut rng);
        let mut draw = |len: usize| DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng));
        let (x, y, u, v) = (draw(n), draw(n), draw(k), draw(k));
        let mut num2 = 0.0;
        let mut num = 0.0;
        for ch in coef.channels() {
            let d = coef.eval(ch, t, &x, &u) - coef.eval(ch, t, &y, &v);
            let nrm2 = problem.space.load_norm2(&d);
            match ch {
                Channel::Jump(_) => num2 += nrm2,
                _ => num += nrm2.sqrt(),
            }
        }
        num += num2.sqrt();
        let den =
            problem.space.h_norm2(&(&x - &y)).sqrt() + problem.control_norm2(&(&u - &v)).sqrt();
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    worst
}

/// Convenience: the Galerkin matrix `A` of `-κ` times the V-form (heat operator).
pub fn heat_operator(space: &GalerkinSpace, diffusivity: f64) -> Operator {
    Operator::constant(space.form_v() * -diffusivity)
}
