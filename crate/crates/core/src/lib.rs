//! Numerical construction of hyperkahler metrics from prepotentials, the
//! Ooguri-Vafa metric and GMN instanton corrections, together with residual
//! checks of the quaternionic, trans-rotational and wall-crossing identities.

pub mod error;
pub mod special;
pub mod charge;
pub mod geometry;
pub mod semiflat;
pub mod toric;
pub mod tba;
pub mod runner;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C;
