//! Dense array support, bilinear interpolation with analytic gradients,
//! small neural primitives, and a finite-difference gradient checker.
//!
//! Everything here is a pure function over immutable inputs (or an owned
//! parameter block) and safe to call concurrently.

pub mod bilinear;
pub mod gradcheck;
pub mod nn;

pub use bilinear::{bilinear_sample, bilinear_sample_grad, footprint, Footprint};
pub use gradcheck::{finite_diff_check, finite_diff_check_flat, rel_error};
pub use nn::{
    softmax, LayerNorm, LinearLayer, MultiHeadAttention,
};
