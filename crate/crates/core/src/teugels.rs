//! Teugels martingales of a Lévy process.
//!
//! The martingale `H^i` is `Σ_k c_{i,k} Y^{(k)}` where `Y^{(k)}` is the
//! compensated power-jump process of order `k` and the row `c_{i,·}` holds the
//! coefficients of the `(i-1)`-th orthonormal polynomial with respect to
//! `μ(dx) = x² ν(dx) + σ² δ₀(dx)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::BasisError;
use crate::levy::{LevyTriplet, PathBundle, TimeGrid};

/// Largest supported basis size.
pub const MAX_BASIS: usize = 12;
/// Above this size the Hankel matrix is badly conditioned; a warning is logged.
pub const CONDITIONING_WARNING: usize = 8;
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Moments `M_k = ∫ x^k μ(dx)` for `k = 0..=2 K_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentFunctional {
    moments: Vec<f64>,
    k_max: usize,
}

impl MomentFunctional {
    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn total_mass(&self) -> f64 {
        self.moments[0]
    }

    /// `(M_{i+j})_{0 ≤ i,j < k}`.
    pub fn hankel(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |i, j| self.moments[i + j])
    }

    /// `∫ f g dμ` for polynomials given by monomial coefficients.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let mut acc = CompensatedSum::default();
        for (a, &fa) in f.iter().enumerate() {
            if fa == 0.0 {
                continue;
            }
            for (b, &gb) in g.iter().enumerate() {
                if gb != 0.0 {
                    acc.add_product(fa * gb, self.moments[a + b]);
                }
            }
        }
        acc.value()
    }
}

/// Double-word accumulator (TwoSum / FMA-based TwoProduct).
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
        self.lo += err;
    }

    fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        self.lo += e;
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Builds the moment functional of `μ` up to order `2 k_max`.
pub fn build_moment_functional(
    triplet: &LevyTriplet,
    k_max: usize,
) -> Result<MomentFunctional, BasisError> {
    if k_max == 0 || k_max > MAX_BASIS {
        return Err(BasisError::UnsupportedSize(k_max));
    }
    if k_max > CONDITIONING_WARNING {
        warn!(
            "basis size {k_max} > {CONDITIONING_WARNING}: the Hankel moment matrix is badly \
             conditioned and higher-order coefficients may be inaccurate"
        );
    }
    let s2 = triplet.sigma * triplet.sigma;
    let moments: Vec<f64> = (0..=2 * k_max)
        .map(|k| {
            let jump = if triplet.jumps.is_empty() {
                0.0
            } else {
                triplet.nu_moment(k as u32 + 2)
            };
            if k == 0 {
                s2 + jump
            } else {
                jump
            }
        })
        .collect();
    if !(moments[0] > 0.0) {
        return Err(BasisError::DegenerateNoise);
    }
    let mf = MomentFunctional { moments, k_max };

    let hankel = mf.hankel(k_max);
    let eig = hankel.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(BasisError::NotPositiveSemidefinite(min));
    }
    Ok(mf)
}

/// Orthonormal polynomial coefficients, one row per polynomial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolynomialBasis {
    /// Lower-triangular `D × D`; row `i` holds the monomial coefficients of `p_i`.
    #[serde(serialize_with = "crate::rows::matrix")]
    coefficients: DMatrix<f64>,
    rank_tolerance: f64,
}

impl PolynomialBasis {
    pub fn dim(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    /// Monomial coefficients of `p_i` (degree `i`).
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|k| self.coefficients[(i, k)]).collect()
    }

    pub fn gram(&self, m: &MomentFunctional) -> DMatrix<f64> {
        let d = self.dim();
        let rows: Vec<Vec<f64>> = (0..d).map(|i| self.row(i)).collect();
        DMatrix::from_fn(d, d, |i, j| m.inner(&rows[i], &rows[j]))
    }

    /// Largest entry of `|Gram - I|`, computed from the moments without sampling.
    pub fn orthonormality_error(&self, m: &MomentFunctional) -> f64 {
        let g = self.gram(m);
        (g - DMatrix::identity(self.dim(), self.dim())).amax()
    }

    /// Restricts the basis to its first `m` polynomials.
    pub fn truncate(&self, m: usize) -> PolynomialBasis {
        let m = m.clamp(1, self.dim());
        PolynomialBasis {
            coefficients: self.coefficients.view((0, 0), (m, m)).into_owned(),
            rank_tolerance: self.rank_tolerance,
        }
    }
}

/// Gram–Schmidt on `1, x, x², ...` against `μ`, with one reorthogonalization
/// pass. Stops at the first monomial whose residual norm² falls below
/// `rank_tolerance · M_0` or below `rank_tolerance` times its own norm².
pub fn orthonormalize(m: &MomentFunctional, rank_tolerance: f64) -> PolynomialBasis {
    let k = m.k_max();
    let m0 = m.total_mass();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for deg in 0..k {
        let mut v = vec![0.0; k];
        v[deg] = 1.0;
        let own = m.moments()[2 * deg];
        for _pass in 0..2 {
            for q in &basis {
                let proj = m.inner(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= proj * qi;
                }
            }
        }
        let r2 = m.inner(&v, &v);
        if !(r2 > rank_tolerance * m0) || !(r2 > rank_tolerance * own) {
            break;
        }
        let inv = 1.0 / r2.sqrt();
        v.iter_mut().for_each(|x| *x *= inv);
        basis.push(v);
    }
    // ‖1‖² = M_0 > 0, so the constant always survives.
    debug_assert!(!basis.is_empty());
    let d = basis.len();
    let coefficients = DMatrix::from_fn(d, d, |i, j| if j <= i { basis[i][j] } else { 0.0 });
    PolynomialBasis {
        coefficients,
        rank_tolerance,
    }
}

/// Per-path increments `ΔH^i_n`, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TeugelsIncrements {
    pub grid: TimeGrid,
    pub dim: usize,
    pub per_path: Vec<Vec<f64>>,
}

impl TeugelsIncrements {
    pub fn n_paths(&self) -> usize {
        self.per_path.len()
    }

    pub fn step(&self, path: usize, n: usize) -> &[f64] {
        &self.per_path[path][n * self.dim..(n + 1) * self.dim]
    }

    /// `H^i(T)` on every path.
    pub fn terminal_values(&self, path: usize) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        for n in 0..self.grid.steps() {
            for (hi, d) in h.iter_mut().zip(self.step(path, n)) {
                *hi += d;
            }
        }
        h
    }
}

fn path_increments(
    basis: &PolynomialBasis,
    path: &PathBundle,
    mean_rate: f64,
    compensators: &[f64],
) -> Vec<f64> {
    let d = basis.dim();
    let dt = path.grid.dt();
    let c = basis.coefficients();
    let mut out = Vec::with_capacity(path.grid.steps() * d);
    let mut y = vec![0.0; d];
    for n in 0..path.grid.steps() {
        y[0] = path.dl[n] - mean_rate * dt;
        let jumps = path.jumps(n);
        for k in 1..d {
            let power: f64 = jumps.iter().map(|x| x.powi(k as i32 + 1)).sum();
            y[k] = power - compensators[k - 1] * dt;
        }
        for i in 0..d {
            let mut h = 0.0;
            for k in 0..=i {
                h += c[(i, k)] * y[k];
            }
            out.push(h);
        }
    }
    out
}

/// `ΔH^i_n = c_{i,1}(ΔL_n − mean_rate Δt) + Σ_{k≥2} c_{i,k}(Σ_jumps (Δℓ)^k − μ̄_k Δt)`.
///
/// `compensators[j]` is `μ̄_{j+2} = ∫ x^{j+2} ν(dx)`.
pub fn teugels_increments(
    basis: &PolynomialBasis,
    paths: &[PathBundle],
    mean_rate: f64,
    compensators: &[f64],
) -> Result<TeugelsIncrements, BasisError> {
    let d = basis.dim();
    if d > compensators.len() + 1 {
        return Err(BasisError::MissingMoments {
            dim: d,
            available: compensators.len() + 1,
        });
    }
    let grid = match paths.first() {
        Some(p) => p.grid,
        None => TimeGrid::new(1.0, 1).expect("unit grid"),
    };
    let per_path = paths
        .par_iter()
        .map(|p| path_increments(basis, p, mean_rate, compensators))
        .collect();
    Ok(TeugelsIncrements {
        grid,
        dim: d,
        per_path,
    })
}

/// Ensemble summary of realized brackets `[H^i, H^j](T)` and terminal values.
#[derive(Debug, Clone, Serialize)]
pub struct CovariationReport {
    pub dim: usize,
    pub horizon: f64,
    pub n_paths: usize,
    #[serde(skip)]
    pub per_path: Vec<DMatrix<f64>>,
    #[serde(serialize_with = "crate::rows::matrix")]
    pub mean: DMatrix<f64>,
    #[serde(serialize_with = "crate::rows::matrix")]
    pub stderr: DMatrix<f64>,
    #[serde(serialize_with = "crate::rows::vector")]
    pub terminal_mean: DVector<f64>,
    #[serde(serialize_with = "crate::rows::vector")]
    pub terminal_stderr: DVector<f64>,
}

impl CovariationReport {
    /// `|mean_ij − δ_ij T| / stderr_ij` maximized over pairs.
    pub fn worst_z_score(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let target = if i == j { self.horizon } else { 0.0 };
                let dev = (self.mean[(i, j)] - target).abs();
                let z = if self.stderr[(i, j)] > 0.0 {
                    dev / self.stderr[(i, j)]
                } else if dev == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst = worst.max(z);
            }
        }
        worst
    }

    pub fn worst_martingale_z_score(&self) -> f64 {
        self.terminal_mean
            .iter()
            .zip(self.terminal_stderr.iter())
            .map(|(m, s)| {
                if *s > 0.0 {
                    m.abs() / s
                } else if *m == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `Σ_n ΔH^i_n ΔH^j_n` per path, with ensemble mean and standard error.
pub fn realized_covariation(inc: &TeugelsIncrements) -> CovariationReport {
    let d = inc.dim;
    let steps = inc.grid.steps();
    let per_path: Vec<DMatrix<f64>> = inc
        .per_path
        .par_iter()
        .map(|dh| {
            let mut m = DMatrix::zeros(d, d);
            for n in 0..steps {
                let s = &dh[n * d..(n + 1) * d];
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] += s[i] * s[j];
                    }
                }
            }
            m
        })
        .collect();
    let terminals: Vec<DVector<f64>> = (0..inc.n_paths())
        .map(|p| DVector::from_vec(inc.terminal_values(p)))
        .collect();
    let (mean, stderr) = matrix_mean_stderr(&per_path, d, d);
    let (tm, ts) = vector_mean_stderr(&terminals, d);
    CovariationReport {
        dim: d,
        horizon: inc.grid.horizon(),
        n_paths: inc.n_paths(),
        per_path,
        mean,
        stderr,
        terminal_mean: tm,
        terminal_stderr: ts,
    }
}

fn matrix_mean_stderr(xs: &[DMatrix<f64>], r: usize, c: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = xs.len() as f64;
    let mut mean = DMatrix::zeros(r, c);
    if xs.is_empty() {
        return (mean.clone(), mean);
    }
    for x in xs {
        mean += x;
    }
    mean /= n;
    let mut var = DMatrix::zeros(r, c);
    for x in xs {
        let d = x - &mean;
        var += d.component_mul(&d);
    }
    let denom = if n > 1.0 {
        (n - 1.0) * n
    } else {
        f64::INFINITY
    };
    let stderr = var.map(|v| (v / denom).sqrt());
    (mean, stderr)
}

fn vector_mean_stderr(xs: &[DVector<f64>], d: usize) -> (DVector<f64>, DVector<f64>) {
    let as_mats: Vec<DMatrix<f64>> = xs
        .iter()
        .map(|v| DMatrix::from_column_slice(d, 1, v.as_slice()))
        .collect();
    let (m, s) = matrix_mean_stderr(&as_mats, d, 1);
    (m.column(0).into_owned(), s.column(0).into_owned())
}
