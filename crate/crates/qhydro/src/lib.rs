//! Learning hydrodynamic equations from exact lattice dynamics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field_store;
pub mod par;
pub mod pde_forward;
pub mod pipeline;
pub mod preprocess;
pub mod presets;
pub mod quantum_sim;
pub mod sparse_regress;
pub mod spectral;
pub mod term_library;

pub use error::{Error, Result};
pub use field_store::{Dataset, Field, Grid, Parity, C64};
pub use par::Exec;
