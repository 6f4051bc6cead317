//! Experiment configuration files.
//!
//! Physical parameters have no defaults and must be spelled out; only
//! numerical tolerances, optimizer settings and output options fall back
//! to defaults. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use teugels_see::cauchy::{CauchyCoefficients, CauchyRun, StartingControl};
use teugels_see::control::{Admissible, OptimizerSettings};
use teugels_see::galerkin::Basis1d;
use teugels_see::levy::{Atom, JumpMeasure, LevyTriplet, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub levy: LevySection,
    pub teugels: TeugelsSection,
    pub grid: GridSection,
    pub space: Basis1d,
    pub truncation: TruncationSection,
    pub ensemble: EnsembleSection,
    pub coefficients: CauchyCoefficients,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevySection {
    pub drift: f64,
    pub sigma: f64,
    pub jumps: JumpSection,
    /// Exponential rate used to check the tail moment condition.
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
}

fn default_lambda0() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpSection {
    None,
    Atoms { atoms: Vec<Atom> },
    Exponential { intensity: f64, rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeugelsSection {
    pub k_max: usize,
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
}

fn default_rank_tolerance() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSection {
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default = "default_start")]
    pub start: StartingControl,
    #[serde(default = "default_admissible")]
    pub admissible: Admissible,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

fn default_start() -> StartingControl {
    StartingControl::Zero
}

fn default_admissible() -> Admissible {
    Admissible::Unconstrained
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            start: default_start(),
            admissible: default_admissible(),
            optimizer: OptimizerSettings::default(),
        }
    }
}

/// Sizes of the property suite run by `check`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub gradient_coordinates: usize,
    pub finite_difference_step: f64,
    pub duality_directions: usize,
    pub verification_trials: usize,
    pub verification_radius: f64,
    /// Paths of the small frozen ensemble used for the exactness checks.
    pub exactness_paths: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            gradient_coordinates: 20,
            finite_difference_step: 1e-5,
            duality_directions: 10,
            verification_trials: 1000,
            verification_radius: 1.0,
            exactness_paths: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

impl OutputSection {
    pub fn wants(&self, format: Format) -> bool {
        self.formats.contains(&format)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Range checks that the schema alone cannot express.
    pub fn check(&self) -> Result<()> {
        if !(self.levy.sigma >= 0.0 && self.levy.sigma.is_finite()) {
            bail!(
                "levy.sigma: must be finite and >= 0, got {}",
                self.levy.sigma
            );
        }
        if !self.levy.drift.is_finite() {
            bail!("levy.drift: must be finite");
        }
        if !(1..=12).contains(&self.teugels.k_max) {
            bail!(
                "teugels.k_max: must lie in 1..=12, got {}",
                self.teugels.k_max
            );
        }
        if !(self.teugels.rank_tolerance > 0.0 && self.teugels.rank_tolerance < 1.0) {
            bail!(
                "teugels.rank_tolerance: must lie in (0, 1), got {}",
                self.teugels.rank_tolerance
            );
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            bail!(
                "grid.horizon: must be finite and > 0, got {}",
                self.grid.horizon
            );
        }
        if self.grid.steps == 0 {
            bail!("grid.steps: must be >= 1");
        }
        if self.space.dim() == 0 || !(self.space.length() > 0.0) {
            bail!("space: needs a positive length and at least one basis function");
        }
        if self.ensemble.paths == 0 {
            bail!("ensemble.paths: must be >= 1");
        }
        if self.truncation.m > self.teugels.k_max {
            bail!(
                "truncation.m: {} exceeds teugels.k_max = {}",
                self.truncation.m,
                self.teugels.k_max
            );
        }
        if self.truncation.m > self.coefficients.gamma.len() {
            bail!(
                "coefficients.gamma: truncation.m = {} needs that many entries, got {}",
                self.truncation.m,
                self.coefficients.gamma.len()
            );
        }
        if let StartingControl::Random { scale, .. } = self.control.start {
            if !(scale >= 0.0 && scale.is_finite()) {
                bail!("control.start.scale: must be finite and >= 0");
            }
        }
        self.control
            .admissible
            .check()
            .context("control.admissible")?;
        self.control
            .optimizer
            .check()
            .context("control.optimizer")?;
        if self.check.exactness_paths == 0 || self.check.verification_trials == 0 {
            bail!("check: path and trial counts must be >= 1");
        }
        if !(self.check.finite_difference_step > 0.0) {
            bail!("check.finite_difference_step: must be > 0");
        }
        if self.outputs.formats.is_empty() {
            bail!("outputs.formats: at least one format is required");
        }
        Ok(())
    }

    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        paths: Option<usize>,
        out: Option<PathBuf>,
    ) -> Result<()> {
        if let Some(seed) = seed {
            self.ensemble.seed = seed;
        }
        if let Some(paths) = paths {
            self.ensemble.paths = paths;
        }
        if let Some(out) = out {
            self.outputs.directory = out;
        }
        self.check()
    }

    pub fn triplet(&self) -> Result<LevyTriplet> {
        let jumps = match &self.levy.jumps {
            JumpSection::None => JumpMeasure::empty(),
            JumpSection::Atoms { atoms } => JumpMeasure::FinitePointMasses(atoms.clone()),
            JumpSection::Exponential { intensity, rate } => JumpMeasure::TwoSidedExponential {
                intensity: *intensity,
                rate: *rate,
            },
        };
        LevyTriplet::new(self.levy.drift, self.levy.sigma, jumps).context("levy")
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps).context("grid")
    }

    pub fn cauchy_run(&self) -> Result<CauchyRun> {
        Ok(CauchyRun {
            coefficients: self.coefficients.clone(),
            basis: self.space,
            triplet: self.triplet()?,
            k_max: self.teugels.k_max,
            rank_tolerance: self.teugels.rank_tolerance,
            grid: self.time_grid()?,
            truncation: self.truncation.m,
            paths: self.ensemble.paths,
            seed: self.ensemble.seed,
            start: self.control.start,
            admissible: self.control.admissible,
            optimizer: self.control.optimizer,
        })
    }
}
