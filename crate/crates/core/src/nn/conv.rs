//! 2D convolution with explicit backward pass.
//!
//! Forward lowers each sample to an im2col matrix and runs a single GEMM per
//! sample. Backward recomputes the column matrix from the cached input
//! instead of caching it, trading a little compute for a much smaller
//! activation footprint.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub fn conv_out_size(input: usize, ksize: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - ksize) / stride + 1
}

/// Convolution layer descriptor. Weights live in a [`ParamSet`] under
/// `<prefix>.w` (out, in, k, k) and `<prefix>.b` (out).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub wname: String,
    pub bname: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal scaled by fan-in; the default for conv + ReLU stacks.
    HeNormal,
    /// All-zero weights and bias. Used for residual branch outputs so a
    /// freshly built generator starts as the identity map.
    Zero,
    /// Normal with a fixed absolute std (bias zero).
    Normal(f32),
}

impl Conv2d {
    pub fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            wname: format!("{prefix}.w"),
            bname: format!("{prefix}.b"),
            in_ch,
            out_ch,
            ksize,
            stride,
            pad,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng, init: Init) -> Result<()> {
        let k = self.ksize;
        let shape = [self.out_ch, self.in_ch, k, k];
        let w = match init {
            Init::Zero => Array4::<f32>::zeros(shape),
            Init::HeNormal => {
                let fan_in = (self.in_ch * k * k) as f32;
                let std = (2.0 / fan_in).sqrt();
                let dist = Normal::new(0.0f32, std)
                    .map_err(|e| Error::validation(format!("init: {e}")))?;
                Array4::from_shape_simple_fn(shape, || dist.sample(rng))
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std)
                    .map_err(|e| Error::validation(format!("init: {e}")))?;
                Array4::from_shape_simple_fn(shape, || dist.sample(rng))
            }
        };
        params.insert(&self.wname, w.into_dyn())?;
        params.insert(&self.bname, ndarray::Array1::<f32>::zeros(self.out_ch).into_dyn())?;
        Ok(())
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        if x.shape()[1] != self.in_ch {
            return Err(Error::config(format!(
                "conv `{}`: input has {} channels, layer expects {}",
                self.wname,
                x.shape()[1],
                self.in_ch
            )));
        }
        Ok(())
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.ksize, self.stride, self.pad),
            conv_out_size(w, self.ksize, self.stride, self.pad),
        )
    }

    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        let (y, _) = self.forward_impl(params, x, false)?;
        Ok(y)
    }

    /// Forward pass that keeps the input for the backward pass.
    pub fn forward_t(&self, params: &ParamSet, x: &Array4<f32>) -> Result<(Array4<f32>, ConvCache)> {
        let (y, _) = self.forward_impl(params, x, false)?;
        Ok((
            y,
            ConvCache {
                x: x.clone(),
            },
        ))
    }

    fn forward_impl(&self, params: &ParamSet, x: &Array4<f32>, _keep: bool) -> Result<(Array4<f32>, ())> {
        self.check_input(x)?;
        let (batch, _, h, w) = dims4(x);
        let (ho, wo) = self.out_spatial(h, w);
        let ksq = self.in_ch * self.ksize * self.ksize;
        let l = ho * wo;

        let w4 = params.view4(&self.wname)?;
        let w2 = w4
            .to_shape((self.out_ch, ksq))
            .map_err(|e| Error::config(format!("conv `{}`: {e}", self.wname)))?;
        let bias = params.view1(&self.bname)?;

        let mut y = Array4::<f32>::zeros((batch, self.out_ch, ho, wo));
        let mut col = Array2::<f32>::zeros((ksq, l));
        for b in 0..batch {
            let xb = x.index_axis(Axis(0), b);
            im2col(&xb, self.ksize, self.stride, self.pad, ho, wo, &mut col);
            let mut yb = Array2::<f32>::zeros((self.out_ch, l));
            ndarray::linalg::general_mat_mul(1.0, &w2, &col, 0.0, &mut yb);
            for (mut row, bi) in yb.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bi);
            }
            y.slice_mut(s![b, .., .., ..])
                .assign(&yb.into_shape_with_order((self.out_ch, ho, wo)).unwrap());
        }
        Ok((y, ()))
    }

    /// Backpropagates `dy`, accumulating weight gradients into `grads` and
    /// returning the input gradient when `want_dx` is set.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ConvCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
        want_dx: bool,
    ) -> Result<Option<Array4<f32>>> {
        let x = &cache.x;
        let (batch, _, h, w) = dims4(x);
        let (ho, wo) = self.out_spatial(h, w);
        let ksq = self.in_ch * self.ksize * self.ksize;
        let l = ho * wo;

        let w4 = params.view4(&self.wname)?;
        let w2 = w4
            .to_shape((self.out_ch, ksq))
            .map_err(|e| Error::config(format!("conv `{}`: {e}", self.wname)))?;

        let mut dw2 = Array2::<f32>::zeros((self.out_ch, ksq));
        let mut db = ndarray::Array1::<f32>::zeros(self.out_ch);
        let mut dx = if want_dx {
            Some(Array4::<f32>::zeros((batch, self.in_ch, h, w)))
        } else {
            None
        };

        let mut col = Array2::<f32>::zeros((ksq, l));
        let mut dcol = Array2::<f32>::zeros((ksq, l));
        for b in 0..batch {
            let xb = x.index_axis(Axis(0), b);
            im2col(&xb, self.ksize, self.stride, self.pad, ho, wo, &mut col);
            let dyb4 = dy.index_axis(Axis(0), b);
            let dyb = dyb4
                .to_shape((self.out_ch, l))
                .map_err(|e| Error::config(format!("conv `{}`: {e}", self.wname)))?;
            // dW += dy . col^T, db += row sums
            ndarray::linalg::general_mat_mul(1.0, &dyb, &col.t(), 1.0, &mut dw2);
            for (o, row) in dyb.outer_iter().enumerate() {
                db[o] += row.sum();
            }
            if let Some(dx) = dx.as_mut() {
                ndarray::linalg::general_mat_mul(1.0, &w2.t(), &dyb, 0.0, &mut dcol);
                let mut dxb = dx.index_axis_mut(Axis(0), b);
                col2im_acc(
                    &dcol.view(),
                    self.ksize,
                    self.stride,
                    self.pad,
                    ho,
                    wo,
                    &mut dxb,
                );
            }
        }

        grads
            .get_mut(&self.wname)?
            .zip_mut_with(&dw2.into_shape_with_order((self.out_ch, self.in_ch, self.ksize, self.ksize)).unwrap().into_dyn(), |g, d| *g += d);
        grads
            .get_mut(&self.bname)?
            .zip_mut_with(&db.into_dyn(), |g, d| *g += d);
        Ok(dx)
    }
}

/// Cached forward inputs needed by [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    x: Array4<f32>,
}

pub(crate) fn dims4(x: &Array4<f32>) -> (usize, usize, usize, usize) {
    let d = x.dim();
    (d.0, d.1, d.2, d.3)
}

/// Lowers one (C, H, W) sample into a (C*k*k, Ho*Wo) column matrix.
fn im2col(
    x: &ArrayView3<f32>,
    ksize: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut Array2<f32>,
) {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("im2col: input not contiguous");
    let cs = col.as_slice_mut().expect("im2col: col not contiguous");
    let l = ho * wo;
    for ci in 0..c {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = (ci * ksize + ky) * ksize + kx;
                let base = row * l;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = base + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cs[dst..dst + wo].fill(0.0);
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    if stride == 1 {
                        // Contiguous span: ox + kx - pad must land in [0, w).
                        let lo = pad.saturating_sub(kx); // first valid ox
                        let hi = (w + pad - kx).min(wo); // one past last valid ox
                        cs[dst..dst + lo.min(wo)].fill(0.0);
                        if lo < hi {
                            let src = src_row + lo + kx - pad;
                            cs[dst + lo..dst + hi].copy_from_slice(&xs[src..src + (hi - lo)]);
                        }
                        if hi < wo {
                            cs[dst + hi..dst + wo].fill(0.0);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            cs[dst + ox] = if ix >= 0 && ix < w as isize {
                                xs[src_row + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the (C, H, W) input grid.
fn col2im_acc(
    dcol: &ArrayView2<f32>,
    ksize: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut ndarray::ArrayViewMut3<f32>,
) {
    let (c, h, w) = dx.dim();
    let ds = dcol.as_slice().expect("col2im: dcol not contiguous");
    let out = dx.as_slice_mut().expect("col2im: dx not contiguous");
    let l = ho * wo;
    for ci in 0..c {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = (ci * ksize + ky) * ksize + kx;
                let base = row * l;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += ds[src + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_conv(stride: usize, pad: usize) -> (Conv2d, ParamSet) {
        let conv = Conv2d::new("c", 2, 3, 3, stride, pad);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        conv.init(&mut ps, &mut rng, Init::HeNormal).unwrap();
        (conv, ps)
    }

    /// Direct quadruple-loop convolution used as the oracle.
    fn conv_naive(conv: &Conv2d, ps: &ParamSet, x: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = dims4(x);
        let (ho, wo) = conv.out_spatial(h, w);
        let wt = ps.view4(&conv.wname).unwrap();
        let bias = ps.view1(&conv.bname).unwrap();
        let mut y = Array4::<f32>::zeros((b, conv.out_ch, ho, wo));
        for bi in 0..b {
            for o in 0..conv.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for ky in 0..conv.ksize {
                                for kx in 0..conv.ksize {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * wt[[o, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[bi, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_convolution() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let (conv, ps) = tiny_conv(stride, pad);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = Array4::from_shape_simple_fn((2, 2, 8, 8), || {
                rand::Rng::random_range(&mut rng, -1.0f32..1.0)
            });
            let fast = conv.forward(&ps, &x).unwrap();
            let slow = conv_naive(&conv, &ps, &x);
            let max_err = (&fast - &slow).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-4, "stride {stride} pad {pad}: err {max_err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (conv, mut ps) = tiny_conv(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_simple_fn((1, 2, 5, 5), || {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        // Loss = sum(y * r) with fixed r, so dL/dy = r.
        let r = Array4::from_shape_simple_fn((1, 3, 5, 5), || {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        let loss = |ps: &ParamSet, x: &Array4<f32>| -> f64 {
            let y = conv.forward(ps, x).unwrap();
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };

        let (_, cache) = conv.forward_t(&ps, &x).unwrap();
        let mut grads = ps.zeros_like();
        let dx = conv.backward(&ps, &cache, &r, &mut grads, true).unwrap().unwrap();

        // Check a scattering of weight coordinates.
        let eps = 1e-3f32;
        for &idx in &[[0usize, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 2]] {
            let orig = ps.view4("c.w").unwrap()[idx];
            ps.view4_mut("c.w").unwrap()[idx] = orig + eps;
            let up = loss(&ps, &x);
            ps.view4_mut("c.w").unwrap()[idx] = orig - eps;
            let down = loss(&ps, &x);
            ps.view4_mut("c.w").unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = grads.view4("c.w").unwrap()[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "w{idx:?}: fd {fd} vs {an}");
        }
        // And a couple of input coordinates.
        let mut xp = x.clone();
        for &idx in &[[0usize, 0, 2, 2], [0, 1, 0, 4]] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = loss(&ps, &xp);
            xp[idx] = orig - eps;
            let down = loss(&ps, &xp);
            xp[idx] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = dx[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "x{idx:?}: fd {fd} vs {an}");
        }
    }
}
