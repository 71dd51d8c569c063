//! Semiparametric estimation of linear (and nonlinear/quantile) models whose
//! endogenous regressor is a nonlinear function of an instrument that also enters
//! the outcome equation.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod disc;
pub mod error;
pub mod first_stage;
pub mod flag;
pub mod inference;
pub mod linalg;
pub mod linear;
pub mod nlq;
pub mod simulation;
pub mod table;

pub use data::{AugmentedDesign, Dataset, Theta};
pub use error::{Error, Result};
pub use flag::Flag;
pub use linear::{EstimateResult, EstimatorTag};
