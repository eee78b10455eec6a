//! Conv → instance-norm → activation building blocks shared by the
//! segmentation backbone, generators and discriminators.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{act, Conv2d, ConvCache, Init, InstanceNorm2d, NormCache};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    Leaky(f32),
    None,
}

/// One conv, optional instance norm, optional activation.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: Option<InstanceNorm2d>,
    pub act: Act,
}

#[derive(Debug, Clone)]
pub struct CnaCache {
    conv: ConvCache,
    norm: Option<NormCache>,
    /// Post-activation output; activations recover their mask from it.
    y: Array4<f32>,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        with_norm: bool,
        act: Act,
    ) -> Self {
        ConvNormAct {
            conv: Conv2d::new(prefix, in_ch, out_ch, ksize, stride, pad),
            norm: with_norm.then(|| InstanceNorm2d::new(&format!("{prefix}.n"), out_ch)),
            act,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng, winit: Init) -> Result<()> {
        self.conv.init(params, rng, winit)?;
        if let Some(n) = &self.norm {
            n.init(params)?;
        }
        Ok(())
    }

    fn activate(&self, x: Array4<f32>) -> Array4<f32> {
        match self.act {
            Act::Relu => act::relu(&x),
            Act::Leaky(s) => act::leaky_relu(&x, s),
            Act::None => x,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        let mut h = self.conv.forward(params, x)?;
        if let Some(n) = &self.norm {
            h = n.forward(params, &h)?;
        }
        Ok(self.activate(h))
    }

    pub fn forward_t(&self, params: &ParamSet, x: &Array4<f32>) -> Result<(Array4<f32>, CnaCache)> {
        let (h, conv_cache) = self.conv.forward_t(params, x)?;
        let (h, norm_cache) = match &self.norm {
            Some(n) => {
                let (h, c) = n.forward_t(params, &h)?;
                (h, Some(c))
            }
            None => (h, None),
        };
        let y = self.activate(h);
        Ok((
            y.clone(),
            CnaCache {
                conv: conv_cache,
                norm: norm_cache,
                y,
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &CnaCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
        want_dx: bool,
    ) -> Result<Option<Array4<f32>>> {
        let dpre = match self.act {
            Act::Relu => act::relu_backward(&cache.y, dy),
            Act::Leaky(s) => act::leaky_relu_backward(&cache.y, dy, s),
            Act::None => dy.clone(),
        };
        let dconv_out = match (&self.norm, &cache.norm) {
            (Some(n), Some(nc)) => n.backward(params, nc, &dpre, grads)?,
            _ => dpre,
        };
        self.conv.backward(params, &cache.conv, &dconv_out, grads, want_dx)
    }
}

/// Two stacked conv-norm-relu units; the U-Net level block.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub a: ConvNormAct,
    pub b: ConvNormAct,
}

#[derive(Debug, Clone)]
pub struct DoubleConvCache {
    a: CnaCache,
    b: CnaCache,
}

impl DoubleConv {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize) -> Self {
        DoubleConv {
            a: ConvNormAct::new(&format!("{prefix}.c1"), in_ch, out_ch, 3, 1, 1, true, Act::Relu),
            b: ConvNormAct::new(&format!("{prefix}.c2"), out_ch, out_ch, 3, 1, 1, true, Act::Relu),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.a.init(params, rng, Init::HeNormal)?;
        self.b.init(params, rng, Init::HeNormal)
    }

    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        let h = self.a.forward(params, x)?;
        self.b.forward(params, &h)
    }

    pub fn forward_t(
        &self,
        params: &ParamSet,
        x: &Array4<f32>,
    ) -> Result<(Array4<f32>, DoubleConvCache)> {
        let (h, ca) = self.a.forward_t(params, x)?;
        let (y, cb) = self.b.forward_t(params, &h)?;
        Ok((y, DoubleConvCache { a: ca, b: cb }))
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &DoubleConvCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
        want_dx: bool,
    ) -> Result<Option<Array4<f32>>> {
        let dh = self
            .b
            .backward(params, &cache.b, dy, grads, true)?
            .expect("inner backward always produces dx");
        self.a.backward(params, &cache.a, &dh, grads, want_dx)
    }
}

/// Residual block `x + f(x)` where `f` is conv-relu, conv (optionally with
/// instance norm after each conv).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub a: ConvNormAct,
    pub b: ConvNormAct,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    a: CnaCache,
    b: CnaCache,
}

impl ResBlock {
    pub fn new(prefix: &str, channels: usize, with_norm: bool) -> Self {
        ResBlock {
            a: ConvNormAct::new(&format!("{prefix}.c1"), channels, channels, 3, 1, 1, with_norm, Act::Relu),
            b: ConvNormAct::new(&format!("{prefix}.c2"), channels, channels, 3, 1, 1, with_norm, Act::None),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.a.init(params, rng, Init::HeNormal)?;
        self.b.init(params, rng, Init::HeNormal)
    }

    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        let h = self.a.forward(params, x)?;
        let h = self.b.forward(params, &h)?;
        Ok(x + &h)
    }

    pub fn forward_t(
        &self,
        params: &ParamSet,
        x: &Array4<f32>,
    ) -> Result<(Array4<f32>, ResBlockCache)> {
        let (h, ca) = self.a.forward_t(params, x)?;
        let (h, cb) = self.b.forward_t(params, &h)?;
        Ok((x + &h, ResBlockCache { a: ca, b: cb }))
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ResBlockCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
    ) -> Result<Array4<f32>> {
        let dh = self
            .b
            .backward(params, &cache.b, dy, grads, true)?
            .expect("res branch backward produces dx");
        let dbranch = self
            .a
            .backward(params, &cache.a, &dh, grads, true)?
            .expect("res branch backward produces dx");
        Ok(dy + &dbranch)
    }
}
