//! Separable shape tensors for ensembles of closed planar curves.
//!
//! Curves are resampled to landmark matrices, split into an orthonormal
//! undulation factor on the Grassmannian and an SPD scale factor, charted
//! by tangent PCA at the Karcher means, and compared across two ensembles
//! with per-factor kernel two-sample tests.

pub mod alignment;
pub mod curve;
pub mod discrepancy;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod pipeline;
pub mod quadrature;
pub mod spline;
pub mod synth;
pub mod sst;

pub use error::{Error, Result};
