//! Cost functional, variation and adjoint equations, and the optimizer.

mod adjoint;
mod cost;
mod optimize;

pub use adjoint::{
    duality_check, hamiltonian_gradient, pathwise_adjoint, regress_coefficients, variation_solve,
    AdjointEnsemble, ConditionalCoefficients, DualityReport, GradientField, Regression,
};
pub use cost::{cost, growth_constants, CostEstimate, CostSpec, GrowthReport, QuadraticCost};
pub use optimize::{
    control_dependence_check, cost_resolution, evaluate_cost, linearize, minimum_condition_check,
    optimize, stationarity_measure, verification_check, Admissible, ControlGrid, IterationRecord,
    Linearization, MinimumConditionReport, OptimizationResult, OptimizerSettings, OptimizerStatus,
    VerificationReport,
};
