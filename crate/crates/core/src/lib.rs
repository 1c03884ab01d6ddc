//! Reconstruction of variable respiratory motion from unsorted 4DCT
//! segments with a surrogate-driven B-spline motion model whose surrogate
//! signals can be estimated jointly with the model.

pub mod bspline;
pub mod error;
pub mod hypergrad;
pub mod interp;
pub mod mcir;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod surrmodel;
pub mod volgrid;

pub use error::{Error, Result};
