//! Kernel min-max estimation of nuisance functions defined by linear inverse
//! problems with structural zeros, plus cross-fitted debiased estimation.

pub mod cli;
pub mod data;
pub mod dgps;
pub mod dml;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod suites;
pub mod workbench;

pub use error::{KrasError, Result};
