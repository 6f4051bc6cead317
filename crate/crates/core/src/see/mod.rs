//! Galerkin discretization of the stochastic evolution equation.

mod diagnostics;
mod problem;
mod stepper;

pub(crate) use diagnostics::energy_norm;
pub use diagnostics::{
    apriori_estimate_check, continuous_dependence_check, ito_energy_residual, loglog_slope,
    relative_spread, EnergyResidual, EstimateReport,
};
pub use problem::{
    check_bounds, check_coercivity, heat_operator, lipschitz_estimate, AffineCoefficients,
    AffineMap, BoundReport, Channel, Coefficients, CoercivityConstants, CoercivityReport,
    GelfandProblem, Jacobian, Operator, SineNonlinearity,
};
pub use stepper::{
    solve_ensemble, solve_with, zero_control, DrivingNoise, PathNoise, Stepper, TrajectoryEnsemble,
    DIVERGENCE_FACTOR,
};
