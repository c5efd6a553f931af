//! Numerics for multiscale block-spin renormalization on small periodic lattices.
//!
//! The crate builds the averaging operators, Gaussian flows, Green's functions,
//! fluctuation covariances, polymer combinatorics and the cluster expansion with
//! holes, and checks each exact identity against a brute-force oracle.

pub mod error;
pub mod geometry;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod linalg;
pub mod blockavg;
pub mod quadforms;
pub mod greens;
pub mod fluctuation;
pub mod polymers;
pub mod cluster;
pub mod fieldregions;
pub mod renormflow;
