//! Inverse scattering toolkit for the 3D Hartree equation
//! `i∂ₜu + Δu = (V∗|u|²)u`.
//!
//! Recovers Fourier derivatives `∂^β F V(0)` of the interaction potential from
//! small-amplitude scattering data, and checks the error and stability laws
//! of that reconstruction numerically.

pub mod cli;
pub mod fields;
pub mod hartree;
pub mod indexcomb;
pub mod phi;
pub mod potentials;
pub mod quadrature;
pub mod recon;

pub use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
