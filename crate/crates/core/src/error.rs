//! Error types shared across the crate.

use thiserror::Error;

/// Problems with a Lévy triplet or with path simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevyError {
    #[error("invalid Lévy triplet: {0}")]
    InvalidTriplet(String),
    #[error("moment condition ({condition}) violated: {detail}")]
    MomentCondition {
        condition: &'static str,
        detail: String,
    },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
}

/// Problems building the Teugels polynomial basis.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("degenerate driving noise: sigma = 0 and the jump measure is empty")]
    DegenerateNoise,
    #[error("basis size {0} outside supported range 1..=12")]
    UnsupportedSize(usize),
    #[error("Hankel moment matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("basis of dimension {dim} needs compensators up to order {dim}, got {available}")]
    MissingMoments { dim: usize, available: usize },
}

/// Failures of the Galerkin solver or its runtime checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("implicit matrix is singular at t = {t} (pivot ratio {pivot_ratio:e})")]
    SingularImplicit { t: f64, pivot_ratio: f64 },
    #[error("coercivity violated at t = {t}: margin {margin:e} for witness v = {witness:?}")]
    Coercivity {
        t: f64,
        margin: f64,
        witness: Vec<f64>,
    },
    #[error("operator bound violated at t = {t}: {operator} norm {norm:e} exceeds C = {bound:e}")]
    OperatorBound {
        t: f64,
        operator: &'static str,
        norm: f64,
        bound: f64,
    },
    #[error("non-finite state at path {path}, step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("divergence at path {path}, step {step}: |X|_H = {norm:e}")]
    Divergence { path: usize, step: usize, norm: f64 },
    #[error("invalid Galerkin space: {0}")]
    Space(String),
}

/// Failures of the control layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    See(#[from] SeeError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("control violates the admissible set at node {node}")]
    Inadmissible { node: usize },
    #[error("invalid optimizer settings: {0}")]
    Settings(String),
}

/// Failures when setting up the divergence-form example.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CauchyError {
    #[error(
        "super-parabolic condition kappa + eta^2 <= 2a <= K fails at t = {t}, z = {z}: \
         kappa + eta^2 = {lhs}, 2a = {two_a}, K = {bound}"
    )]
    SuperParabolic {
        t: f64,
        z: f64,
        lhs: f64,
        two_a: f64,
        bound: f64,
    },
    #[error("coefficient `{name}` exceeds bound K = {bound} at t = {t}, z = {z} (value {value})")]
    Bound {
        name: String,
        t: f64,
        z: f64,
        value: f64,
        bound: f64,
    },
    #[error("invalid coefficients: {0}")]
    Invalid(String),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    See(#[from] SeeError),
    #[error(transparent)]
    Control(#[from] ControlError),
}
