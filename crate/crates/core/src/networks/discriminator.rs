//! Patch discriminator: three stride-2 convs then a patch-logit head, so the
//! output grid is 1/8 of the input in each spatial dim.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::blocks::{Act, CnaCache, ConvNormAct};
use crate::nn::rng::stream;
use crate::nn::{Conv2d, ConvCache, Init};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// 1 (binary, least-squares) or 3 (real / translated / reconstructed).
    pub num_outputs: usize,
}

impl Default for DiscSpec {
    fn default() -> Self {
        DiscSpec {
            in_channels: 1,
            base_width: 16,
            num_outputs: 3,
        }
    }
}

impl DiscSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::config("discriminator: size fields must be > 0"));
        }
        if self.num_outputs != 1 && self.num_outputs != 3 {
            return Err(Error::config(
                "discriminator: num_outputs must be 1 (binary) or 3 (three-class)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub spec: DiscSpec,
    c1: ConvNormAct,
    c2: ConvNormAct,
    c3: ConvNormAct,
    head: Conv2d,
}

#[derive(Debug)]
pub struct DiscriminatorCache {
    c1: CnaCache,
    c2: CnaCache,
    c3: CnaCache,
    head: ConvCache,
}

impl Discriminator {
    pub fn new(spec: DiscSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        Ok(Discriminator {
            spec,
            c1: ConvNormAct::new("c1", spec.in_channels, w, 4, 2, 1, false, Act::Leaky(0.2)),
            c2: ConvNormAct::new("c2", w, 2 * w, 4, 2, 1, true, Act::Leaky(0.2)),
            c3: ConvNormAct::new("c3", 2 * w, 4 * w, 4, 2, 1, true, Act::Leaky(0.2)),
            head: Conv2d::new("head", 4 * w, spec.num_outputs, 3, 1, 1),
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng: ChaCha8Rng = stream(seed, "disc-init", 0);
        let mut ps = ParamSet::new();
        self.c1.init(&mut ps, &mut rng, Init::HeNormal)?;
        self.c2.init(&mut ps, &mut rng, Init::HeNormal)?;
        self.c3.init(&mut ps, &mut rng, Init::HeNormal)?;
        self.head.init(&mut ps, &mut rng, Init::HeNormal)?;
        Ok(ps)
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(Error::validation(format!(
                "discriminator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::validation(format!(
                "discriminator needs dims divisible by 8, got ({h}, {w})"
            )));
        }
        Ok(())
    }

    /// Patch logits of shape (B, num_outputs, H/8, W/8).
    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let h = self.c1.forward(params, x)?;
        let h = self.c2.forward(params, &h)?;
        let h = self.c3.forward(params, &h)?;
        self.head.forward(params, &h)
    }

    pub fn forward_t(
        &self,
        params: &ParamSet,
        x: &Array4<f32>,
    ) -> Result<(Array4<f32>, DiscriminatorCache)> {
        self.check_input(x)?;
        let (h, c1) = self.c1.forward_t(params, x)?;
        let (h, c2) = self.c2.forward_t(params, &h)?;
        let (h, c3) = self.c3.forward_t(params, &h)?;
        let (y, head) = self.head.forward_t(params, &h)?;
        Ok((y, DiscriminatorCache { c1, c2, c3, head }))
    }

    /// Accumulates parameter gradients; returns dL/dx when `want_dx` (the
    /// generator phase backpropagates through the frozen discriminator).
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &DiscriminatorCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
        want_dx: bool,
    ) -> Result<Option<Array4<f32>>> {
        let dh = self
            .head
            .backward(params, &cache.head, dy, grads, true)?
            .expect("head backward produces dx");
        let dh = self
            .c3
            .backward(params, &cache.c3, &dh, grads, true)?
            .expect("c3 backward produces dx");
        let dh = self
            .c2
            .backward(params, &cache.c2, &dh, grads, true)?
            .expect("c2 backward produces dx");
        self.c1.backward(params, &cache.c1, &dh, grads, want_dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_grid_is_smaller_than_input() {
        for num_outputs in [1usize, 3] {
            let disc = Discriminator::new(DiscSpec {
                in_channels: 1,
                base_width: 8,
                num_outputs,
            })
            .unwrap();
            let ps = disc.init_params(0).unwrap();
            let x = Array4::<f32>::zeros((2, 1, 32, 32));
            let y = disc.forward(&ps, &x).unwrap();
            assert_eq!(y.dim(), (2, num_outputs, 4, 4));
        }
    }

    #[test]
    fn rejects_wrong_mode_and_shape() {
        assert!(Discriminator::new(DiscSpec {
            in_channels: 1,
            base_width: 8,
            num_outputs: 2,
        })
        .is_err());
        let disc = Discriminator::new(DiscSpec::default()).unwrap();
        let ps = disc.init_params(0).unwrap();
        assert!(disc.forward(&ps, &Array4::<f32>::zeros((1, 1, 20, 20))).is_err());
    }
}
