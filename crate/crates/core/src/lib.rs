//! Desk-scale synergistic attention encoder with strict gradient routing.
//!
//! The attention topology (`W_Q`, `W_K`) is trained only by a structural
//! alignment loss against a mask-derived teacher, while values, MLPs and the
//! semantic projector are trained by contrastive anchoring and
//! reconstruction. [`diagnostics`] measures the resulting gradient
//! interference per parameter subspace.

pub mod autodiff;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod scenes;
pub mod trainer;

pub use error::{MuseError, Result};
