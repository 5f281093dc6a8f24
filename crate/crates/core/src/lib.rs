//! Orbit recovery of images and volumes from rigid-motion invariant
//! autocorrelations.

pub mod error;
pub mod extract2d;
pub mod extract3d;
pub mod grids_io;
pub mod harmonics;
pub mod invert2d;
pub mod invert3d;
pub mod observe;
pub mod phantoms;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
