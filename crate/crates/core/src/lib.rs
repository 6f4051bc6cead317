//! Stochastic evolution equations driven by Brownian motion and Teugels
//! martingales of a Lévy process, with adjoint-based optimal control.

pub mod cauchy;
pub mod control;
pub mod error;
pub mod galerkin;
pub mod levy;
mod rows;
pub mod see;
pub mod teugels;

pub use error::{BasisError, CauchyError, ControlError, LevyError, SeeError};
