//! Z-parameter modeling, solvers, gradients and optimization for stacked
//! intelligent metasurfaces.
pub mod coupling;
pub mod dft;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod linalg;
pub mod load;
pub mod optimizer;
pub mod quad;
pub mod transfer;
pub mod verify;
pub use error::{Result, SimError};
