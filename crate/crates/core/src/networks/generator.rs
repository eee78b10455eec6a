//! Residual translation generator.
//!
//! Computes a residual correction `delta(x)` through a small encode /
//! resblock / decode stack and emits `clamp(x + delta)` onto [-1, 1]. The
//! head conv is zero-initialized, so a fresh generator is the identity map
//! on normalized images, and a zero-delta cycle reconstructs exactly.
//!
//! The trunk is norm-free: per-image normalization would strip the absolute
//! intensity statistics that cross-modality appearance maps depend on.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::blocks::{Act, CnaCache, ConvNormAct, ResBlock, ResBlockCache};
use crate::nn::rng::stream;
use crate::nn::{act, resample, Conv2d, ConvCache, Init};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub channels: usize,
    pub base_width: usize,
    pub res_blocks: usize,
    /// Std of the head conv at init. Zero keeps a fresh generator exactly
    /// at the identity; a small positive value gives the cycle objective a
    /// non-trivial starting point during adversarial training.
    pub head_init_std: f32,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            channels: 1,
            base_width: 16,
            res_blocks: 4,
            head_init_std: 0.0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.res_blocks == 0 {
            return Err(Error::config("generator: all size fields must be > 0"));
        }
        if self.head_init_std < 0.0 {
            return Err(Error::config("generator: head_init_std must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GenSpec,
    stem: ConvNormAct,
    down: ConvNormAct,
    res: Vec<ResBlock>,
    up: ConvNormAct,
    head: Conv2d,
}

#[derive(Debug)]
pub struct GeneratorCache {
    stem: CnaCache,
    down: CnaCache,
    res: Vec<ResBlockCache>,
    up: CnaCache,
    head: ConvCache,
    /// Clamped output, reused for the saturation mask.
    y: Array4<f32>,
}

impl Generator {
    pub fn new(spec: GenSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        Ok(Generator {
            spec,
            stem: ConvNormAct::new("stem", spec.channels, w, 7, 1, 3, false, Act::Relu),
            down: ConvNormAct::new("down", w, 2 * w, 3, 2, 1, false, Act::Relu),
            res: (0..spec.res_blocks)
                .map(|i| ResBlock::new(&format!("res{i}"), 2 * w, false))
                .collect(),
            up: ConvNormAct::new("up", 2 * w, w, 3, 1, 1, false, Act::Relu),
            head: Conv2d::new("head", w, spec.channels, 7, 1, 3),
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng: ChaCha8Rng = stream(seed, "generator-init", 0);
        let mut ps = ParamSet::new();
        self.stem.init(&mut ps, &mut rng, Init::HeNormal)?;
        self.down.init(&mut ps, &mut rng, Init::HeNormal)?;
        for r in &self.res {
            r.init(&mut ps, &mut rng)?;
        }
        self.up.init(&mut ps, &mut rng, Init::HeNormal)?;
        // Residual-zero head by default; optionally a small random start.
        let head_init = if self.spec.head_init_std > 0.0 {
            Init::Normal(self.spec.head_init_std)
        } else {
            Init::Zero
        };
        self.head.init(&mut ps, &mut rng, head_init)?;
        Ok(ps)
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.channels {
            return Err(Error::validation(format!(
                "generator expects {} channels, got {c}",
                self.spec.channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::validation(format!(
                "generator needs even spatial dims, got ({h}, {w})"
            )));
        }
        Ok(())
    }

    fn delta(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        let h = self.stem.forward(params, x)?;
        let mut h = self.down.forward(params, &h)?;
        for r in &self.res {
            h = r.forward(params, &h)?;
        }
        let h = resample::upsample2(&h);
        let h = self.up.forward(params, &h)?;
        self.head.forward(params, &h)
    }

    /// `clamp(x + delta(x))`; output values always lie in [-1, 1].
    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let delta = self.delta(params, x)?;
        Ok(act::clamp_unit(&(x + &delta)))
    }

    pub fn forward_t(
        &self,
        params: &ParamSet,
        x: &Array4<f32>,
    ) -> Result<(Array4<f32>, GeneratorCache)> {
        self.check_input(x)?;
        let (h, stem_c) = self.stem.forward_t(params, x)?;
        let (mut h, down_c) = self.down.forward_t(params, &h)?;
        let mut res_c = Vec::with_capacity(self.res.len());
        for r in &self.res {
            let (y, c) = r.forward_t(params, &h)?;
            res_c.push(c);
            h = y;
        }
        let h = resample::upsample2(&h);
        let (h, up_c) = self.up.forward_t(params, &h)?;
        let (delta, head_c) = self.head.forward_t(params, &h)?;
        let y = act::clamp_unit(&(x + &delta));
        Ok((
            y.clone(),
            GeneratorCache {
                stem: stem_c,
                down: down_c,
                res: res_c,
                up: up_c,
                head: head_c,
                y,
            },
        ))
    }

    /// Accumulates parameter gradients and returns dL/dx (needed when the
    /// generator sits inside a cycle or under a discriminator).
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &GeneratorCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
    ) -> Result<Array4<f32>> {
        // y = clamp(u), u = x + delta.
        let du = act::clamp_unit_backward(&cache.y, dy);
        let dh = self
            .head
            .backward(params, &cache.head, &du, grads, true)?
            .expect("head backward produces dx");
        let dh = self
            .up
            .backward(params, &cache.up, &dh, grads, true)?
            .expect("up backward produces dx");
        let mut dh = resample::upsample2_backward(&dh);
        for (r, c) in self.res.iter().zip(cache.res.iter()).rev() {
            dh = r.backward(params, c, &dh, grads)?;
        }
        let dh = self
            .down
            .backward(params, &cache.down, &dh, grads, true)?
            .expect("down backward produces dx");
        let dstem = self
            .stem
            .backward(params, &cache.stem, &dh, grads, true)?
            .expect("stem backward produces dx");
        // u = x + delta: the input gradient gets both paths.
        Ok(&du + &dstem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_near_identity_and_bounded() {
        let gen = Generator::new(GenSpec::default()).unwrap();
        let ps = gen.init_params(0).unwrap();
        let mut rng = stream(5, "x", 0);
        let x = Array4::from_shape_simple_fn((2, 1, 16, 16), || {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        let y = gen.forward(&ps, &x).unwrap();
        assert_eq!(y.dim(), x.dim());
        assert!(y.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // Residual-zero head: a fresh generator is the identity on in-range
        // inputs, so the mean deviation is small relative to the [-1, 1] range.
        let mean_dev = (&y - &x).mapv(f32::abs).mean().unwrap();
        assert!(mean_dev < 0.1, "mean |out - in| = {mean_dev}");
        for (yv, xv) in y.iter().zip(x.iter()) {
            assert!((yv - xv.clamp(-1.0, 1.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let gen = Generator::new(GenSpec {
            channels: 1,
            base_width: 4,
            res_blocks: 2,
            ..Default::default()
        })
        .unwrap();
        let mut ps = gen.init_params(1).unwrap();
        // Nudge the head away from zero so its gradient path is non-trivial.
        {
            let mut rng = stream(2, "head", 0);
            for v in ps.get_mut("head.w").unwrap().iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.05f32..0.05);
            }
        }
        // Inputs kept well inside (-1, 1) so no probe crosses the clamp kink.
        let mut rng = stream(3, "x", 0);
        let x = Array4::from_shape_simple_fn((1, 1, 8, 8), || {
            rand::Rng::random_range(&mut rng, -0.6f32..0.6)
        });
        let r = Array4::from_shape_simple_fn((1, 1, 8, 8), || {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        let loss = |ps: &ParamSet, x: &Array4<f32>| -> f64 {
            let y = gen.forward(ps, x).unwrap();
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = gen.forward_t(&ps, &x).unwrap();
        let mut grads = ps.zeros_like();
        let dx = gen.backward(&ps, &cache, &r, &mut grads).unwrap();

        let eps = 1e-2f32;
        for name in ["stem.w", "res1.c1.w", "up.w", "head.w"] {
            let pick = ps.get(name).unwrap().len() / 3;
            let orig = ps.get(name).unwrap().as_slice().unwrap()[pick];
            ps.get_mut(name).unwrap().as_slice_mut().unwrap()[pick] = orig + eps;
            let up = loss(&ps, &x);
            ps.get_mut(name).unwrap().as_slice_mut().unwrap()[pick] = orig - eps;
            let down = loss(&ps, &x);
            ps.get_mut(name).unwrap().as_slice_mut().unwrap()[pick] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = grads.get(name).unwrap().as_slice().unwrap()[pick] as f64;
            assert!(
                (fd - an).abs() < 5e-2 * (1.0 + an.abs()),
                "{name}: fd {fd} vs analytic {an}"
            );
        }
        // Input gradient: perturb one pixel.
        let mut xp = x.clone();
        let orig = xp[[0, 0, 3, 3]];
        xp[[0, 0, 3, 3]] = orig + eps;
        let up = loss(&ps, &xp);
        xp[[0, 0, 3, 3]] = orig - eps;
        let down = loss(&ps, &xp);
        let fd = (up - down) / (2.0 * eps as f64);
        let an = dx[[0, 0, 3, 3]] as f64;
        assert!((fd - an).abs() < 5e-2 * (1.0 + an.abs()), "dx: fd {fd} vs {an}");
    }
}
