//! Cross-correlation spectra of a cavity-levitated nanoparticle driven by an
//! oriented stochastic force: analytic spectra, a Langevin simulator used as an
//! independent check, and inversions for mode rotation, detector misalignment
//! and force orientation.

pub mod cli;
pub mod error;
pub mod estimate;
pub mod model;
pub mod numerics;
pub mod response;
pub mod simulate;
pub mod spectra;

pub use error::{Error, Result};
