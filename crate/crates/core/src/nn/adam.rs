//! Adam optimizer over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment banks plus the step counter for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl Adam {
    pub fn new(like: &ParamSet, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    /// Rebuild an optimizer from checkpointed moment banks.
    pub fn from_state(cfg: AdamConfig, m: ParamSet, v: ParamSet, t: u64) -> Self {
        Adam { cfg, m, v, t }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f32) -> Result<()> {
        params.check_same_layout(grads, "adam step")?;
        params.check_same_layout(&self.m, "adam moments")?;
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.cfg.eps;
        for i in 0..params.len() {
            let g = grads.array_at(i);
            let m = self.m.array_at_mut(i);
            m.zip_mut_with(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        }
        for i in 0..params.len() {
            let g = grads.array_at(i);
            let v = self.v.array_at_mut(i);
            v.zip_mut_with(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
        }
        for i in 0..params.len() {
            let p = params.array_at_mut(i);
            let m = self.m.array_at(i);
            let v = self.v.array_at(i);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use ndarray::IxDyn;

    #[test]
    fn minimizes_a_quadratic() {
        // f(p) = 0.5 * p^2, grad = p. Adam should walk p toward zero.
        let mut params = ParamSet::new();
        params
            .insert("p", ArrayD::from_elem(IxDyn(&[1]), 5.0f32))
            .unwrap();
        let mut opt = Adam::new(&params, AdamConfig::default());
        for _ in 0..500 {
            let grads = {
                let mut g = params.zeros_like();
                let p = params.get("p").unwrap().clone();
                g.get_mut("p").unwrap().assign(&p);
                g
            };
            opt.step(&mut params, &grads, 0.05).unwrap();
        }
        let p = params.get("p").unwrap()[0];
        assert!(p.abs() < 0.05, "p = {p}");
    }

    #[test]
    fn zero_lr_is_noop_for_params() {
        let mut params = ParamSet::new();
        params
            .insert("p", ArrayD::from_elem(IxDyn(&[2]), 1.0f32))
            .unwrap();
        let before = params.clone();
        let mut g = params.zeros_like();
        g.fill(3.0);
        let mut opt = Adam::new(&params, AdamConfig::default());
        opt.step(&mut params, &g, 0.0).unwrap();
        assert!(params.bit_eq(&before));
        assert_eq!(opt.t, 1); // moments still advance
    }
}
