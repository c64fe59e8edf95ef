//! Exact dephasing-qubit dynamics under pulse control over a Gaussian bath,
//! and the estimators that reconstruct the bath's classical and quantum
//! noise spectra from measured expectations.

pub mod control;
pub mod dynamics;
pub mod error;
pub mod inference;
pub mod presets;
pub mod quad;
pub mod reconstruction;
pub mod spectra;

pub use error::{Error, Result};
