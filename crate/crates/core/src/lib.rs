//! Forward model and inverse estimation for a dissipative three-level
//! molecule driven by spectrally shaped femtosecond pulses.
//!
//! The pipeline runs pulse synthesis ([`field`]) into Lindblad dynamics
//! ([`lindblad`]), maps the steady S1 population to photoluminescence
//! ([`pl`]), and recovers molecular parameters from PL-versus-chirp traces
//! by multi-start Nelder–Mead ([`simplex`]). [`dataset`] samples parameter
//! sets, builds training data and provides the feature scalers used by the
//! neural-network regressor in `tpa-nn`.

pub mod dataset;
pub mod error;
pub mod field;
pub mod io;
pub mod lindblad;
pub mod pl;
pub mod simplex;
pub mod units;

pub use error::{Error, Result};
