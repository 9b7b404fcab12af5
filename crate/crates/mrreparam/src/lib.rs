//! Spin-echo MR image re-parameterization.
//!
//! The crate simulates spin-echo brain scans from a synthetic tissue phantom,
//! trains an autoencoder over the resulting images, and trains a
//! coarse-to-fine network that re-renders a scan under new acquisition
//! parameters (TE, TR) by decoding the autoencoder's feature pyramid together
//! with broadcast parameter planes.

pub mod ae;
pub mod error;
pub mod eval;
pub mod io;
pub mod phantom;
pub mod pnet;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
