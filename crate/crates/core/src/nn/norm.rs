//! Instance normalization with affine gain/shift.
//!
//! Normalizes each (sample, channel) plane by its own mean and variance, so
//! there are no running statistics to track and batch size 1 behaves the same
//! as any other. Parameters are `<prefix>.g` and `<prefix>.s`, both length C.

use ndarray::{Array1, Array4};

use crate::error::Result;
use crate::params::ParamSet;

const EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub gname: String,
    pub sname: String,
    pub channels: usize,
}

/// Values the backward pass needs: normalized activations and per-plane
/// inverse standard deviations.
#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array4<f32>,
    inv_std: ndarray::Array2<f32>,
}

impl InstanceNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        InstanceNorm2d {
            gname: format!("{prefix}.g"),
            sname: format!("{prefix}.s"),
            channels,
        }
    }

    pub fn init(&self, params: &mut ParamSet) -> Result<()> {
        params.insert(&self.gname, Array1::<f32>::ones(self.channels).into_dyn())?;
        params.insert(&self.sname, Array1::<f32>::zeros(self.channels).into_dyn())?;
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: &Array4<f32>) -> Result<Array4<f32>> {
        Ok(self.forward_t(params, x)?.0)
    }

    pub fn forward_t(&self, params: &ParamSet, x: &Array4<f32>) -> Result<(Array4<f32>, NormCache)> {
        let (batch, c, h, w) = x.dim();
        let n = (h * w) as f32;
        let gain = params.view1(&self.gname)?;
        let shift = params.view1(&self.sname)?;

        let mut xhat = x.clone();
        let mut inv_std = ndarray::Array2::<f32>::zeros((batch, c));
        for b in 0..batch {
            for ci in 0..c {
                let mut plane = xhat.slice_mut(ndarray::s![b, ci, .., ..]);
                let mean = plane.sum() / n;
                let mut var = 0.0f32;
                plane.mapv_inplace(|v| {
                    let d = v - mean;
                    var += d * d;
                    d
                });
                var /= n;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[[b, ci]] = is;
                plane.mapv_inplace(|v| v * is);
            }
        }
        let mut y = xhat.clone();
        for b in 0..batch {
            for ci in 0..c {
                let (g, s) = (gain[ci], shift[ci]);
                y.slice_mut(ndarray::s![b, ci, .., ..])
                    .mapv_inplace(|v| v * g + s);
            }
        }
        Ok((y, NormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &NormCache,
        dy: &Array4<f32>,
        grads: &mut ParamSet,
    ) -> Result<Array4<f32>> {
        let (batch, c, h, w) = dy.dim();
        let n = (h * w) as f32;
        let gain = params.view1(&self.gname)?;

        let mut dgain = Array1::<f32>::zeros(c);
        let mut dshift = Array1::<f32>::zeros(c);
        let mut dx = Array4::<f32>::zeros((batch, c, h, w));
        for b in 0..batch {
            for ci in 0..c {
                let xh = cache.xhat.slice(ndarray::s![b, ci, .., ..]);
                let dyp = dy.slice(ndarray::s![b, ci, .., ..]);
                let mut sum_dy = 0.0f32;
                let mut sum_dy_xh = 0.0f32;
                ndarray::Zip::from(&dyp).and(&xh).for_each(|d, x| {
                    sum_dy += d;
                    sum_dy_xh += d * x;
                });
                dshift[ci] += sum_dy;
                dgain[ci] += sum_dy_xh;
                let g = gain[ci];
                let is = cache.inv_std[[b, ci]];
                let mut dxp = dx.slice_mut(ndarray::s![b, ci, .., ..]);
                ndarray::Zip::from(&mut dxp).and(&dyp).and(&xh).for_each(|o, d, x| {
                    *o = g * is * (*d - sum_dy / n - x * sum_dy_xh / n);
                });
            }
        }
        grads
            .get_mut(&self.gname)?
            .zip_mut_with(&dgain.into_dyn(), |g, d| *g += d);
        grads
            .get_mut(&self.sname)?
            .zip_mut_with(&dshift.into_dyn(), |g, d| *g += d);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_each_plane() {
        let norm = InstanceNorm2d::new("n", 3);
        let mut ps = ParamSet::new();
        norm.init(&mut ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array4::from_shape_simple_fn((2, 3, 6, 6), || {
            rand::Rng::random_range(&mut rng, -2.0f32..5.0)
        });
        let y = norm.forward(&ps, &x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let plane = y.slice(ndarray::s![b, c, .., ..]);
                let mean = plane.mean().unwrap();
                let var = plane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let norm = InstanceNorm2d::new("n", 2);
        let mut ps = ParamSet::new();
        norm.init(&mut ps).unwrap();
        // Non-trivial gain/shift so their gradients are exercised.
        ps.view1_mut("n.g").unwrap().assign(&ndarray::arr1(&[1.3, 0.7]));
        ps.view1_mut("n.s").unwrap().assign(&ndarray::arr1(&[0.2, -0.4]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_simple_fn((1, 2, 4, 4), || {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        let r = Array4::from_shape_simple_fn((1, 2, 4, 4), || {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        let loss = |x: &Array4<f32>| -> f64 {
            let y = norm.forward(&ps, x).unwrap();
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };

        let (_, cache) = norm.forward_t(&ps, &x).unwrap();
        let mut grads = ps.zeros_like();
        let dx = norm.backward(&ps, &cache, &r, &mut grads).unwrap();

        let eps = 1e-3f32;
        let mut xp = x.clone();
        for &idx in &[[0usize, 0, 1, 1], [0, 1, 3, 0], [0, 0, 0, 3]] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = loss(&xp);
            xp[idx] = orig - eps;
            let down = loss(&xp);
            xp[idx] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = dx[idx] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "{idx:?}: fd {fd} vs {an}");
        }
    }
}
