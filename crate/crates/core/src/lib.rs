//! Solvers for the reduced Merton HJB equation under an OU+CIR state process
//! with Heston-type returns: a Deep Galerkin trainer, a Newton finite
//! difference solver and the optimal-portfolio evaluator.

pub mod dgm;
pub mod error;
pub mod fdm;
pub mod model;
pub mod net;
pub mod pde;
pub mod portfolio;
pub mod surface;

pub use error::{Error, Result};
