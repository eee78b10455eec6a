//! Encoder-decoder segmentation backbone with skip connections.

use ndarray::{Array4, Array4 as A4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::blocks::{Act, ConvNormAct, CnaCache, DoubleConv, DoubleConvCache};
use crate::nn::rng::stream;
use crate::nn::{resample, Conv2d, ConvCache, Init};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for SegNetSpec {
    fn default() -> Self {
        SegNetSpec {
            in_channels: 1,
            num_classes: 5,
            base_width: 16,
            depth: 4,
        }
    }
}

impl SegNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::config("segnet: channel counts and depth must be > 0"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("segnet: need at least 2 classes"));
        }
        Ok(())
    }
}

/// U-shaped net: `depth` double-conv encoder levels with 2x2 max pooling,
/// a bottleneck, and mirrored upsample + concat + double-conv decoder levels.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub spec: SegNetSpec,
    enc: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    dec_up: Vec<ConvNormAct>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
}

#[derive(Debug)]
pub struct SegNetCache {
    enc: Vec<DoubleConvCache>,
    pool_idx: Vec<Array4<u8>>,
    bottleneck: DoubleConvCache,
    dec: Vec<(CnaCache, DoubleConvCache)>, // indexed by level
    head: ConvCache,
}

impl SegNet {
    pub fn new(spec: SegNetSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let mut enc = Vec::new();
        for i in 0..spec.depth {
            let in_ch = if i == 0 { spec.in_channels } else { w << (i - 1) };
            enc.push(DoubleConv::new(&format!("enc{i}"), in_ch, w << i));
        }
        let bottleneck = DoubleConv::new("bott", w << (spec.depth - 1), w << spec.depth);
        let mut dec_up = Vec::new();
        let mut dec = Vec::new();
        for i in 0..spec.depth {
            dec_up.push(ConvNormAct::new(
                &format!("dec{i}.up"),
                w << (i + 1),
                w << i,
                3,
                1,
                1,
                true,
                Act::Relu,
            ));
            dec.push(DoubleConv::new(&format!("dec{i}"), w << (i + 1), w << i));
        }
        let head = Conv2d::new("head", w, spec.num_classes, 1, 1, 0);
        Ok(SegNet {
            spec,
            enc,
            bottleneck,
            dec_up,
            dec,
            head,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng: ChaCha8Rng = stream(seed, "segnet-init", 0);
        let mut ps = ParamSet::new();
        for e in &self.enc {
            e.init(&mut ps, &mut rng)?;
        }
        self.bottleneck.init(&mut ps, &mut rng)?;
        for (u, d) in self.dec_up.iter().zip(self.dec.iter()) {
            u.init(&mut ps, &mut rng, Init::HeNormal)?;
            d.init(&mut ps, &mut rng)?;
        }
        self.head.init(&mut ps, &mut rng, Init::HeNormal)?;
        Ok(ps)
    }

    fn check_input(&self, x: &A4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(Error::validation(format!(
                "segnet expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let div = 1usize << self.spec.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::validation(format!(
                "spatial dims ({h}, {w}) must be divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    /// Inference forward: logits of shape (B, num_classes, H, W).
    pub fn forward(&self, params: &ParamSet, x: &A4<f32>) -> Result<A4<f32>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x.clone();
        for e in &self.enc {
            let y = e.forward(params, &h)?;
            let (p, _) = resample::maxpool2(&y);
            skips.push(y);
            h = p;
        }
        h = self.bottleneck.forward(params, &h)?;
        for i in (0..self.spec.depth).rev() {
            let u = resample::upsample2(&h);
            let uc = self.dec_up[i].forward(params, &u)?;
            let cat = resample::concat_channels(&skips[i], &uc);
            h = self.dec[i].forward(params, &cat)?;
        }
        self.head.forward(params, &h)
    }

    /// Training forward keeping everything the backward pass needs.
    pub fn forward_t(&self, params: &ParamSet, x: &A4<f32>) -> Result<(A4<f32>, SegNetCache)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::new();
        let mut pool_idx = Vec::new();
        let mut skips = Vec::new();
        let mut h = x.clone();
        for e in &self.enc {
            let (y, c) = e.forward_t(params, &h)?;
            let (p, idx) = resample::maxpool2(&y);
            enc_caches.push(c);
            pool_idx.push(idx);
            skips.push(y);
            h = p;
        }
        let (mut h, bott_cache) = self.bottleneck.forward_t(params, &h)?;
        let mut dec_caches: Vec<Option<(CnaCache, DoubleConvCache)>> =
            (0..self.spec.depth).map(|_| None).collect();
        for i in (0..self.spec.depth).rev() {
            let u = resample::upsample2(&h);
            let (uc, up_cache) = self.dec_up[i].forward_t(params, &u)?;
            let cat = resample::concat_channels(&skips[i], &uc);
            let (y, dc) = self.dec[i].forward_t(params, &cat)?;
            dec_caches[i] = Some((up_cache, dc));
            h = y;
        }
        let (logits, head_cache) = self.head.forward_t(params, &h)?;
        Ok((
            logits,
            SegNetCache {
                enc: enc_caches,
                pool_idx,
                bottleneck: bott_cache,
                dec: dec_caches.into_iter().map(|c| c.unwrap()).collect(),
                head: head_cache,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &SegNetCache,
        dlogits: &A4<f32>,
        grads: &mut ParamSet,
    ) -> Result<()> {
        let w = self.spec.base_width;
        let mut dh = self
            .head
            .backward(params, &cache.head, dlogits, grads, true)?
            .expect("head backward produces dx");
        let mut dskips: Vec<Array4<f32>> = Vec::with_capacity(self.spec.depth);
        for i in 0..self.spec.depth {
            let (up_cache, dc) = &cache.dec[i];
            let dcat = self.dec[i]
                .backward(params, dc, &dh, grads, true)?
                .expect("decoder backward produces dx");
            let (dskip, duc) = resample::split_channels(&dcat, w << i);
            dskips.push(dskip);
            let du = self.dec_up[i]
                .backward(params, up_cache, &duc, grads, true)?
                .expect("up-conv backward produces dx");
            dh = resample::upsample2_backward(&du);
        }
        let mut dlow = self
            .bottleneck
            .backward(params, &cache.bottleneck, &dh, grads, true)?
            .expect("bottleneck backward produces dx");
        for i in (0..self.spec.depth).rev() {
            let mut dy = resample::maxpool2_backward(&cache.pool_idx[i], &dlow);
            dy += &dskips[i];
            let dx = self.enc[i].backward(params, &cache.enc[i], &dy, grads, i > 0)?;
            dlow = dx.unwrap_or_else(|| Array4::zeros((0, 0, 0, 0)));
        }
        Ok(())
    }
}
