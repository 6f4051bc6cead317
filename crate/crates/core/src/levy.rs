//! Lévy triplets with finite-activity jump measures and joint simulation of
//! the driving noise `(W, L)`.
//!
//! Paths are built from the compensated decomposition
//!
//! ```text
//! L(t) = mean_rate * t + sigma * B(t) + (sum of jumps up to t) - t * ∫ x ν(dx)
//! ```
//!
//! so that `L(t) - mean_rate * t` is a martingale on every path. The truncation
//! `I{|x| < 1}` of the characteristic exponent is absorbed into `mean_rate`.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::LevyError;

/// A single atom `intensity * δ_size` of a finitely supported jump measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub size: f64,
    pub intensity: f64,
}

/// Finite-activity Lévy measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JumpMeasure {
    /// `ν = Σ λ_k δ_{x_k}`. An empty list is the zero measure.
    FinitePointMasses(Vec<Atom>),
    /// Density `(λ/2) β exp(-β|x|)`.
    TwoSidedExponential { intensity: f64, rate: f64 },
}

impl JumpMeasure {
    pub fn empty() -> Self {
        JumpMeasure::FinitePointMasses(Vec::new())
    }

    pub fn point_masses(atoms: &[(f64, f64)]) -> Self {
        JumpMeasure::FinitePointMasses(
            atoms
                .iter()
                .map(|&(size, intensity)| Atom { size, intensity })
                .collect(),
        )
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, JumpMeasure::FinitePointMasses(a) if a.is_empty())
    }

    /// `ν(ℝ)`, finite for every supported family.
    pub fn total_intensity(&self) -> f64 {
        match self {
            JumpMeasure::FinitePointMasses(atoms) => atoms.iter().map(|a| a.intensity).sum(),
            JumpMeasure::TwoSidedExponential { intensity, .. } => *intensity,
        }
    }

    fn check(&self) -> Result<(), LevyError> {
        match self {
            JumpMeasure::FinitePointMasses(atoms) => {
                for (k, a) in atoms.iter().enumerate() {
                    if !(a.intensity.is_finite() && a.intensity > 0.0) {
                        return Err(LevyError::InvalidTriplet(format!(
                            "atom {k}: intensity must be finite and > 0, got {}",
                            a.intensity
                        )));
                    }
                    if !a.size.is_finite() || a.size == 0.0 {
                        return Err(LevyError::InvalidTriplet(format!(
                            "atom {k}: size must be finite and nonzero, got {}",
                            a.size
                        )));
                    }
                }
                Ok(())
            }
            JumpMeasure::TwoSidedExponential { intensity, rate } => {
                if !(intensity.is_finite() && *intensity > 0.0) {
                    return Err(LevyError::InvalidTriplet(format!(
                        "two-sided exponential intensity must be finite and > 0, got {intensity}"
                    )));
                }
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(LevyError::InvalidTriplet(format!(
                        "two-sided exponential tail rate must be finite and > 0, got {rate}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// `∫ x^k ν(dx)` in closed form.
    pub fn moment(&self, k: u32) -> f64 {
        assert!(k >= 1, "jump-measure moments start at k = 1");
        match self {
            JumpMeasure::FinitePointMasses(atoms) => atoms
                .iter()
                .map(|a| a.intensity * a.size.powi(k as i32))
                .sum(),
            JumpMeasure::TwoSidedExponential { intensity, rate } => {
                if k % 2 == 1 {
                    0.0
                } else {
                    // λ k! / β^k
                    let mut v = *intensity;
                    for j in 1..=k {
                        v *= j as f64 / rate;
                    }
                    v
                }
            }
        }
    }

    /// `∫_{|x| ≥ 1} x ν(dx)`.
    fn large_jump_mean(&self) -> f64 {
        match self {
            JumpMeasure::FinitePointMasses(atoms) => atoms
                .iter()
                .filter(|a| a.size.abs() >= 1.0)
                .map(|a| a.size * a.intensity)
                .sum(),
            JumpMeasure::TwoSidedExponential { .. } => 0.0,
        }
    }

    /// Supremum of exponential rates `λ₀` with `∫_{|x|>ε} e^{λ₀|x|} ν(dx) < ∞`.
    pub fn exponential_moment_bound(&self) -> f64 {
        match self {
            JumpMeasure::FinitePointMasses(_) => f64::INFINITY,
            JumpMeasure::TwoSidedExponential { rate, .. } => *rate,
        }
    }

    fn sample_size<R: Rng>(&self, sampler: &JumpSampler, rng: &mut R) -> f64 {
        match (self, sampler) {
            (JumpMeasure::FinitePointMasses(atoms), JumpSampler::Atoms(index)) => {
                atoms[index.sample(rng)].size
            }
            (JumpMeasure::TwoSidedExponential { .. }, JumpSampler::Laplace(exp)) => {
                let magnitude = exp.sample(rng);
                if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            }
            _ => unreachable!("sampler built from a different measure"),
        }
    }
}

enum JumpSampler {
    None,
    Atoms(WeightedIndex<f64>),
    Laplace(Exp<f64>),
}

impl JumpSampler {
    fn new(measure: &JumpMeasure) -> Self {
        match measure {
            JumpMeasure::FinitePointMasses(atoms) if atoms.is_empty() => JumpSampler::None,
            JumpMeasure::FinitePointMasses(atoms) => JumpSampler::Atoms(
                WeightedIndex::new(atoms.iter().map(|a| a.intensity))
                    .expect("intensities validated positive"),
            ),
            JumpMeasure::TwoSidedExponential { rate, .. } => {
                JumpSampler::Laplace(Exp::new(*rate).expect("rate validated positive"))
            }
        }
    }
}

/// Characteristic triplet `(a, σ, ν)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyTriplet {
    pub drift: f64,
    pub sigma: f64,
    pub jumps: JumpMeasure,
}

impl LevyTriplet {
    pub fn new(drift: f64, sigma: f64, jumps: JumpMeasure) -> Result<Self, LevyError> {
        if !drift.is_finite() {
            return Err(LevyError::InvalidTriplet(format!(
                "drift must be finite, got {drift}"
            )));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(LevyError::InvalidTriplet(format!(
                "sigma must be finite and >= 0, got {sigma}"
            )));
        }
        jumps.check()?;
        Ok(Self {
            drift,
            sigma,
            jumps,
        })
    }

    pub fn brownian(sigma: f64) -> Result<Self, LevyError> {
        Self::new(0.0, sigma, JumpMeasure::empty())
    }

    /// `∫ x^k ν(dx)`.
    pub fn nu_moment(&self, k: u32) -> f64 {
        self.jumps.moment(k)
    }

    /// Compensator rate of `Y^{(1)}`: `E[L(1)] = a + ∫_{|x|≥1} x ν(dx)`.
    pub fn mean_rate(&self) -> f64 {
        self.drift + self.jumps.large_jump_mean()
    }

    /// Compensators `[μ̄_2, ..., μ̄_{max_order}]` of the power-jump processes.
    pub fn power_jump_compensators(&self, max_order: usize) -> Vec<f64> {
        (2..=max_order as u32).map(|k| self.nu_moment(k)).collect()
    }
}

/// Result of checking one moment condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub condition: &'static str,
    pub passed: bool,
    pub epsilon: f64,
    pub lambda0: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Turns the first failing condition into an error.
    pub fn into_result(self) -> Result<Self, LevyError> {
        match self.checks.iter().find(|c| !c.passed) {
            Some(c) => Err(LevyError::MomentCondition {
                condition: c.condition,
                detail: c.detail.clone(),
            }),
            None => Ok(self),
        }
    }
}

/// Checks moment conditions (i) and (ii), the latter with the requested
/// exponential rate `lambda0` and cut-off `ε = 1`.
pub fn validate_triplet(triplet: &LevyTriplet, lambda0: f64) -> ValidationReport {
    let total = triplet.jumps.total_intensity();
    // ∫(1 ∧ x²) ν(dx) ≤ ν(ℝ), finite for every finite-activity family.
    let small = match &triplet.jumps {
        JumpMeasure::FinitePointMasses(atoms) => atoms
            .iter()
            .map(|a| a.intensity * a.size.powi(2).min(1.0))
            .sum::<f64>(),
        JumpMeasure::TwoSidedExponential { .. } => total,
    };
    let cond_i = ConditionCheck {
        condition: "i",
        passed: small.is_finite(),
        epsilon: f64::NAN,
        lambda0: f64::NAN,
        detail: format!("∫(1∧x²)ν(dx) ≤ {small:.6e} (finite activity, ν(ℝ) = {total:.6e})"),
    };

    let bound = triplet.jumps.exponential_moment_bound();
    let ok = lambda0 > 0.0 && lambda0 < bound;
    let detail = if !(lambda0 > 0.0) {
        format!("requested exponential rate λ₀ = {lambda0} must be > 0")
    } else if ok {
        format!("∫_{{|x|>1}} e^{{λ₀|x|}} ν(dx) < ∞ for λ₀ = {lambda0} < {bound}")
    } else {
        format!("∫_{{|x|>1}} e^{{λ₀|x|}} ν(dx) diverges: λ₀ = {lambda0} ≥ tail rate {bound}")
    };
    let cond_ii = ConditionCheck {
        condition: "ii",
        passed: ok,
        epsilon: 1.0,
        lambda0,
        detail,
    };
    ValidationReport {
        checks: vec![cond_i, cond_ii],
    }
}

/// Uniform time grid `t_n = n T / N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, LevyError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LevyError::InvalidGrid(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(LevyError::InvalidGrid("steps must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn refine(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor,
        }
    }
}

/// Driving noise of one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub seed: u64,
    pub path_index: u64,
    /// Increments of the Brownian motion `W` driving the equation.
    pub dw: Vec<f64>,
    /// Increments `σ ΔB` of the Gaussian part of `L`.
    pub dw_levy: Vec<f64>,
    /// Increments `ΔL` of the Lévy process itself.
    pub dl: Vec<f64>,
    jump_offsets: Vec<usize>,
    jump_sizes: Vec<f64>,
}

impl PathBundle {
    /// Jump sizes of `L` falling into step `n`.
    pub fn jumps(&self, n: usize) -> &[f64] {
        &self.jump_sizes[self.jump_offsets[n]..self.jump_offsets[n + 1]]
    }

    pub fn jump_count(&self) -> usize {
        self.jump_sizes.len()
    }

    /// `Σ_{jumps in [0, T]} (ΔL)^k`.
    pub fn power_jump_total(&self, k: i32) -> f64 {
        self.jump_sizes.iter().map(|x| x.powi(k)).sum()
    }

    /// Aggregates `factor` consecutive steps into one. The coarse path is the
    /// same realization observed on the coarser grid.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle, LevyError> {
        let n = self.grid.steps;
        if factor == 0 || n % factor != 0 {
            return Err(LevyError::InvalidGrid(format!(
                "cannot coarsen {n} steps by a factor of {factor}"
            )));
        }
        let coarse_steps = n / factor;
        let sum_blocks =
            |v: &[f64]| -> Vec<f64> { v.chunks(factor).map(|c| c.iter().sum()).collect() };
        let mut jump_offsets = Vec::with_capacity(coarse_steps + 1);
        for k in 0..=coarse_steps {
            jump_offsets.push(self.jump_offsets[k * factor]);
        }
        Ok(PathBundle {
            grid: TimeGrid::new(self.grid.horizon, coarse_steps)?,
            seed: self.seed,
            path_index: self.path_index,
            dw: sum_blocks(&self.dw),
            dw_levy: sum_blocks(&self.dw_levy),
            dl: sum_blocks(&self.dl),
            jump_offsets,
            jump_sizes: self.jump_sizes.clone(),
        })
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates one path. `W` and `L` use the independent ChaCha streams
/// `2 i` and `2 i + 1` of the generator keyed by `seed`.
pub fn simulate_path(
    triplet: &LevyTriplet,
    grid: TimeGrid,
    seed: u64,
    path_index: u64,
) -> PathBundle {
    let steps = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut w_rng = stream_rng(seed, 2 * path_index);
    let dw: Vec<f64> = (0..steps)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut w_rng);
            sqrt_dt * z
        })
        .collect();

    let mut l_rng = stream_rng(seed, 2 * path_index + 1);
    let sampler = JumpSampler::new(&triplet.jumps);
    let rate = triplet.jumps.total_intensity() * dt;
    let poisson = if rate > 0.0 {
        Poisson::new(rate).ok()
    } else {
        None
    };
    let drift_step = (triplet.mean_rate() - triplet.nu_moment(1)) * dt;

    let mut dw_levy = Vec::with_capacity(steps);
    let mut dl = Vec::with_capacity(steps);
    let mut jump_offsets = Vec::with_capacity(steps + 1);
    let mut jump_sizes = Vec::new();
    jump_offsets.push(0);
    for _ in 0..steps {
        let z: f64 = StandardNormal.sample(&mut l_rng);
        let gauss = triplet.sigma * sqrt_dt * z;
        let count = match &poisson {
            Some(p) => p.sample(&mut l_rng) as usize,
            None => 0,
        };
        let mut jump_sum = 0.0;
        if !matches!(sampler, JumpSampler::None) {
            for _ in 0..count {
                let x = triplet.jumps.sample_size(&sampler, &mut l_rng);
                jump_sum += x;
                jump_sizes.push(x);
            }
        }
        jump_offsets.push(jump_sizes.len());
        dw_levy.push(gauss);
        dl.push(drift_step + gauss + jump_sum);
    }

    PathBundle {
        grid,
        seed,
        path_index,
        dw,
        dw_levy,
        dl,
        jump_offsets,
        jump_sizes,
    }
}

/// Simulates `n_paths` independent paths in parallel. The result does not
/// depend on the thread schedule.
pub fn simulate_bundle(
    triplet: &LevyTriplet,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Vec<PathBundle> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| simulate_path(triplet, grid, seed, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn pure_brownian_passes_validation() {
        let t = LevyTriplet::brownian(1.0).unwrap();
        let report = validate_triplet(&t, 1.0);
        assert!(report.passed());
    }

    #[test]
    fn heavy_tail_fails_condition_ii() {
        let t = LevyTriplet::new(
            0.0,
            1.0,
            JumpMeasure::TwoSidedExponential {
                intensity: 1.0,
                rate: 0.5,
            },
        )
        .unwrap();
        let report = validate_triplet(&t, 1.0);
        assert!(!report.passed());
        match report.into_result() {
            Err(LevyError::MomentCondition { condition, .. }) => assert_eq!(condition, "ii"),
            other => panic!("expected condition (ii) failure, got {other:?}"),
        }
    }

    #[test]
    fn bounded_jumps_pass() {
        let t = LevyTriplet::new(0.0, 0.0, JumpMeasure::point_masses(&[(1.0, 2.0)])).unwrap();
        assert!(validate_triplet(&t, 50.0).passed());
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(LevyTriplet::new(0.0, 1.0, JumpMeasure::point_masses(&[(0.0, 1.0)])).is_err());
        assert!(LevyTriplet::new(0.0, 1.0, JumpMeasure::point_masses(&[(1.0, -1.0)])).is_err());
        assert!(LevyTriplet::new(0.0, -1.0, JumpMeasure::empty()).is_err());
    }

    #[test]
    fn nu_moments_closed_form() {
        let single = JumpMeasure::point_masses(&[(1.0, 3.5)]);
        assert_eq!(single.moment(3), 3.5);
        let lap = JumpMeasure::TwoSidedExponential {
            intensity: 2.0,
            rate: 3.0,
        };
        assert_eq!(lap.moment(1), 0.0);
        assert_eq!(lap.moment(5), 0.0);
        // 2 · 4! / 3^4
        assert_relative_eq!(lap.moment(4), 2.0 * 24.0 / 81.0, max_relative = 1e-15);
        let two = JumpMeasure::point_masses(&[(-1.0, 0.5), (2.0, 0.5)]);
        assert_eq!(two.moment(2), 2.5);
    }

    #[test]
    fn mean_rate_examples() {
        assert_eq!(LevyTriplet::brownian(1.0).unwrap().mean_rate(), 0.0);
        let t = LevyTriplet::new(1.0, 0.0, JumpMeasure::point_masses(&[(2.0, 3.0)])).unwrap();
        assert_eq!(t.mean_rate(), 7.0);
        let t = LevyTriplet::new(0.0, 0.0, JumpMeasure::point_masses(&[(0.5, 4.0)])).unwrap();
        assert_eq!(t.mean_rate(), 0.0);
    }

    #[test]
    fn monte_carlo_mean_of_l1_matches_mean_rate() {
        // Small atoms sit inside the truncation; the simulated mean is zero.
        let t = LevyTriplet::new(0.0, 0.0, JumpMeasure::point_masses(&[(0.5, 4.0)])).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let paths = simulate_bundle(&t, grid, 20_000, 11);
        let totals: Vec<f64> = paths.iter().map(|p| p.dl.iter().sum()).collect();
        let (m, se) = mean_and_stderr(&totals);
        assert!(m.abs() < 4.0 * se, "mean {m} stderr {se}");

        let t = LevyTriplet::new(1.0, 0.3, JumpMeasure::point_masses(&[(2.0, 3.0)])).unwrap();
        let paths = simulate_bundle(&t, grid, 20_000, 12);
        let totals: Vec<f64> = paths.iter().map(|p| p.dl.iter().sum()).collect();
        let (m, se) = mean_and_stderr(&totals);
        assert!((m - 7.0).abs() < 4.0 * se, "mean {m} stderr {se}");
    }

    #[test]
    fn no_jumps_without_measure() {
        let t = LevyTriplet::brownian(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        for p in simulate_bundle(&t, grid, 50, 3) {
            assert_eq!(p.jump_count(), 0);
            for n in 0..32 {
                assert!(p.jumps(n).is_empty());
            }
        }
    }

    #[test]
    fn jump_counts_are_poisson() {
        let t = LevyTriplet::new(0.0, 0.0, JumpMeasure::point_masses(&[(1.0, 5.0)])).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let paths = simulate_bundle(&t, grid, 10_000, 99);
        let counts: Vec<f64> = paths.iter().map(|p| p.jump_count() as f64).collect();
        let (m, se) = mean_and_stderr(&counts);
        assert!((m - 5.0).abs() < 3.0 * se, "mean {m} stderr {se}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let t = LevyTriplet::new(
            0.2,
            0.7,
            JumpMeasure::TwoSidedExponential {
                intensity: 3.0,
                rate: 2.0,
            },
        )
        .unwrap();
        let grid = TimeGrid::new(2.0, 17).unwrap();
        let a = simulate_bundle(&t, grid, 40, 5);
        let b = simulate_bundle(&t, grid, 40, 5);
        assert_eq!(a, b);
        let c = simulate_bundle(&t, grid, 40, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn coarsening_preserves_totals() {
        let t = LevyTriplet::new(0.0, 1.0, JumpMeasure::point_masses(&[(1.0, 4.0)])).unwrap();
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let fine = simulate_path(&t, grid, 1, 0);
        let coarse = fine.coarsen(4).unwrap();
        assert_eq!(coarse.grid.steps(), 16);
        assert_relative_eq!(
            coarse.dw.iter().sum::<f64>(),
            fine.dw.iter().sum::<f64>(),
            epsilon = 1e-12
        );
        assert_eq!(coarse.jump_count(), fine.jump_count());
        let merged: Vec<f64> = (0..4).flat_map(|n| fine.jumps(n).to_vec()).collect();
        assert_eq!(coarse.jumps(0), merged.as_slice());
        assert!(fine.coarsen(3).is_err());
    }

    #[test]
    fn compensated_power_jumps_have_zero_mean() {
        let t = LevyTriplet::new(
            0.0,
            0.5,
            JumpMeasure::point_masses(&[(1.0, 2.0), (-0.5, 1.0)]),
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let paths = simulate_bundle(&t, grid, 10_000, 21);
        for k in 2..=4 {
            let xs: Vec<f64> = paths
                .iter()
                .map(|p| p.power_jump_total(k) - t.nu_moment(k as u32))
                .collect();
            let (m, se) = mean_and_stderr(&xs);
            assert!(m.abs() < 4.0 * se, "k = {k}: mean {m} stderr {se}");
        }
    }

    #[test]
    fn brownian_components_are_independent_with_unit_variance() {
        let t = LevyTriplet::new(0.0, 1.0, JumpMeasure::point_masses(&[(1.0, 1.0)])).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let paths = simulate_bundle(&t, grid, 10_000, 8);
        let w: Vec<f64> = paths.iter().map(|p| p.dw.iter().sum()).collect();
        let l: Vec<f64> = paths.iter().map(|p| p.dl.iter().sum()).collect();
        let n = w.len() as f64;
        let (mw, _) = mean_and_stderr(&w);
        let (ml, _) = mean_and_stderr(&l);
        let sw = (w.iter().map(|x| (x - mw).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sl = (l.iter().map(|x| (x - ml).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let corr = w
            .iter()
            .zip(&l)
            .map(|(a, b)| (a - mw) * (b - ml))
            .sum::<f64>()
            / ((n - 1.0) * sw * sl);
        // stderr of a sample correlation under independence ≈ 1/√n
        assert!(corr.abs() < 4.0 / n.sqrt(), "corr {corr}");

        let squares: Vec<f64> = w.iter().map(|x| (x - mw).powi(2)).collect();
        let (var, se) = mean_and_stderr(&squares);
        assert!((var - 1.0).abs() < 4.0 * se, "var {var} stderr {se}");
    }
}
