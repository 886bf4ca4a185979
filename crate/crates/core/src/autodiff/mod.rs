//! Minimal reverse-mode automatic differentiation over `ndarray` values.
//!
//! The tape is eager: every operation computes its value immediately and
//! records how it was produced. `Tape::backward` builds the gradients as
//! further tape nodes, so a gradient can itself be differentiated — this is
//! what the R1 gradient penalty needs (a parameter gradient of an input
//! gradient). Only the op set used on discriminator paths supports that
//! second differentiation; `grid_sample` is first-order only.

mod conv;
mod sample;
mod scalar;
mod tape;

pub use sample::{bilinear_sample, resize_plane, resize_plane_adjoint, BilinearTap};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
