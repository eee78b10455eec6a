//! Minimal deterministic NN toolkit: conv / norm / activation / resampling
//! primitives with explicit backward passes, an Adam optimizer over
//! [`crate::params::ParamSet`], and seeded RNG stream derivation.

pub mod act;
pub mod adam;
pub mod conv;
pub mod norm;
pub mod resample;
pub mod rng;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, ConvCache, Init};
pub use norm::{InstanceNorm2d, NormCache};
