//! Architecture contracts: the segmentation backbone, translation
//! generators, patch discriminators, and the input perturbation used by the
//! consistency streams.
//!
//! All forward passes are pure functions of (parameters, input, explicit
//! seed); a [`crate::params::ParamSet`] is an immutable value once built, so
//! snapshots can be evaluated concurrently.

pub mod blocks;
pub mod discriminator;
pub mod generator;
pub mod segnet;

use ndarray::Array4;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng::stream;
use crate::params::ParamSet;

pub use discriminator::{Discriminator, DiscSpec};
pub use generator::{GenSpec, Generator};
pub use segnet::{SegNet, SegNetSpec};

/// Appearance domain of a batch: real or synthetic source-looking images are
/// `Source`, target-looking ones are `Target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn flipped(self) -> Self {
        match self {
            DomainTag::Source => DomainTag::Target,
            DomainTag::Target => DomainTag::Source,
        }
    }
}

/// A rank-4 (B, C, H, W) stack of intensity-normalized slices plus its
/// appearance tag.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub domain: DomainTag,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, domain: DomainTag) -> Self {
        ImageBatch { data, domain }
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }
}

/// Input perturbation for the consistency streams: seeded Gaussian noise
/// plus optional pixel dropout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub input_noise_std: f32,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            input_noise_std: 0.1,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_noise_std < 0.0 {
            return Err(Error::validation("input_noise_std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Adds seeded Gaussian noise (and optional dropout) to a batch. Shape and
/// domain tag are preserved; std = 0 and rate = 0 is the identity.
pub fn perturb(batch: &ImageBatch, cfg: &NoiseConfig) -> Result<ImageBatch> {
    cfg.validate()?;
    let mut data = batch.data.clone();
    if cfg.input_noise_std > 0.0 {
        let mut rng = stream(cfg.seed, "perturb-noise", 0);
        let normal = Normal::new(0.0f32, cfg.input_noise_std)
            .map_err(|e| Error::validation(format!("noise: {e}")))?;
        data.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    if cfg.dropout_rate > 0.0 {
        let mut rng = stream(cfg.seed, "perturb-drop", 0);
        let keep = 1.0 - cfg.dropout_rate;
        data.mapv_inplace(|v| {
            if rand::Rng::random_range(&mut rng, 0.0f32..1.0) < cfg.dropout_rate {
                0.0
            } else {
                v / keep
            }
        });
    }
    Ok(ImageBatch {
        data,
        domain: batch.domain,
    })
}

/// Segmentation forward pass: (B, C, H, W) logits for a batch.
pub fn seg_forward(spec: &SegNetSpec, params: &ParamSet, batch: &ImageBatch) -> Result<Array4<f32>> {
    SegNet::new(*spec)?.forward(params, &batch.data)
}

/// Translation forward pass; the output batch carries the flipped domain tag.
pub fn gen_forward(spec: &GenSpec, params: &ParamSet, batch: &ImageBatch) -> Result<ImageBatch> {
    let data = Generator::new(*spec)?.forward(params, &batch.data)?;
    Ok(ImageBatch {
        data,
        domain: batch.domain.flipped(),
    })
}
