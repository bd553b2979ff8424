//! Focal EEG source imaging in a 2D three-compartment head model, with the
//! skull conductivity treated as an uncertain parameter.
//!
//! The approximation error between lead fields built with the true and with a
//! fixed standard skull conductivity is premarginalized: its mean and leading
//! eigenvectors are precomputed per source location by Monte Carlo
//! ([`baestats`]), a single-dipole scan then solves jointly for the dipole and
//! the low-order error coefficients ([`scan`]), and the recovered coefficients
//! give a linear-Gaussian estimate of the skull conductivity.
//!
//! Modules, bottom-up:
//!
//! * [`headmesh`]: concentric-disk meshes, electrodes and the source space.
//! * [`fem`]: P1 stiffness assembly, transfer matrices and lead fields.
//! * [`baestats`]: per-location error statistics and their binary library.
//! * [`scan`]: standard and error-augmented dipole scans.
//! * [`simharness`]: synthetic experiments, metrics and reports.
//! * [`pipeline`]: configuration and the end-to-end commands behind the CLI.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod baestats;
pub mod error;
pub mod fem;
pub mod headmesh;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod scan;
pub mod simharness;

pub use error::{Error, ErrorKind, Result};
