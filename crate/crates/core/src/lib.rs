//! Training and evaluation toolkit for unsupervised cross-modality
//! segmentation adaptation under source-label scarcity.
//!
//! The pipeline has three stages: bidirectional cycle-consistent image
//! translation between the two modalities ([`dcam`]), dual EMA-teacher
//! consistency training of a segmentation student ([`trainer`]), and
//! evaluation with connected-component postprocessing ([`metrics`]). A
//! synthetic two-modality benchmark ([`data`]) makes the whole loop run on a
//! CPU in minutes.

pub mod config;
pub mod data;
pub mod dcam;
pub mod ema;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod params;
pub mod schedules;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use params::{Checkpoint, ParamSet};
