//! Mean transition times of irreversible metastable diffusions.
//!
//! For `dX = b dt + sqrt(2 eps) sigma dW` with a transverse decomposition
//! `b = -a grad U + l`, `<grad U, l> = 0`, the crate computes the
//! quasipotential, the instanton, the non-Gibbsian prefactor correction and
//! the resulting Eyring-Kramers mean transition time, and checks each piece
//! against direct simulation.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod json;
pub mod landscape;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod ode;
pub mod saddle;
pub mod validate;

pub use error::{Error, Result};
pub use model::{builtin_models, lookup, Field, ModelSpec, RegisteredModel};
pub use saddle::{transition_rate, RateReport, SaddleData};
