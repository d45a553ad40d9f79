//! Spectral-Galerkin homogenisation of the curl-curl resolvent on periodic measures.
//!
//! Fields are truncated Fourier series on the unit cell; measures are Lebesgue plus
//! axis-parallel flats, whose Fourier moments are exact. Every operator is assembled as a
//! dense matrix over groups of coupled modes.

pub mod cell;
pub mod electromag;
pub mod error;
pub mod floquet;
pub mod galerkin;
pub mod helmholtz;
pub mod linalg;
pub mod measure;
pub mod poincare;
pub mod pool;
pub mod resolvent;
pub mod spectral;

pub use error::{Error, Result};
pub use measure::{FlatComponent, Offset, PeriodicMeasure};
pub use spectral::{CoefficientField, FrequencyCube, Quasimomentum, SpectralField};

pub type C64 = num_complex::Complex64;
