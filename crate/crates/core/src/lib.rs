//! Correlation-aware sparse signal recovery for multiple measurement vectors.
//!
//! Solvers share one contract ([`registry::Solver`]) and are looked up by id
//! at runtime; the experiment harness drives them over seeded synthetic data.

pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod plot;
pub mod registry;
pub mod reweighted;
pub mod sbl;
pub mod synth;
pub mod timevarying;

pub use error::{Error, Result};
