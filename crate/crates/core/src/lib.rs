//! Deformation-field based garment and model resizing.
//!
//! The crate is organized around a warping core (dense displacement fields,
//! differentiable bilinear sampling, smoothness energy), a procedural paired-size
//! dataset generator, the learnable networks (conditional field generator, two
//! discriminators, size classifier), the adversarial training loop, and an
//! evaluation harness with a single-axis scaling baseline.

pub mod autodiff;
pub mod error;
pub mod field;

pub use error::{Error, Result};
pub use field::DeformationField;
