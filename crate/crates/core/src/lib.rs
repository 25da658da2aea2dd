//! Collective emission dynamics of quantum emitters coupled through a
//! one-dimensional waveguide.
//!
//! The crate covers the single-excitation effective Hamiltonian, the full
//! Lindblad master equation, closed-form two-emitter output fields, spectral
//! diffusion averaging, detector-response convolution, bi-exponential decay
//! fitting and detuning sweeps. Rates are configured as linear frequencies
//! in GHz, times in ns.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod fit;
pub mod liouvillian;
pub mod model;
pub mod propagate;
pub mod sweep;
pub mod trace_io;

pub use error::{Error, Result};
pub use liouvillian::{DensityMatrix, DriveSpec, Envelope, Port};
pub use model::{build_system, EmitterParams, PhaseLags, SystemModel};
