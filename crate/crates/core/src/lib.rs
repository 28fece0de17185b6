//! Entropic optimal transport on grid measures, with numerical diagnostics for
//! local energies, affine rescalings, harmonic one-step improvement and
//! Campanato-type decay down to the entropic length scale.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod coupling;
pub mod error;
pub mod measure;
pub mod numeric;
pub mod regularity;
pub mod runner;
pub mod scaling;
pub mod solvers;

pub use error::{Error, Result};
