//! Consistency-weight ramp-up and the learning-rate schedule.
//!
//! The consistency weights follow the sigmoid-shaped curve
//! `peak * exp(-5 * (1 - t/t_max)^2)`, applied independently to the semantic
//! and structural trade-off weights. The learning rate warms up linearly and
//! then decays along a cosine to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RampConfig {
    pub peak: f64,
    pub t_max: u64,
}

impl Default for RampConfig {
    fn default() -> Self {
        RampConfig {
            peak: 0.01,
            t_max: 150,
        }
    }
}

impl RampConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) {
            return Err(Error::validation("rampup.peak must be > 0"));
        }
        if self.t_max == 0 {
            return Err(Error::validation("rampup.t_max must be > 0"));
        }
        Ok(())
    }
}

/// Consistency weight at step `t`; steps past `t_max` saturate at the peak.
pub fn rampup_weight(t: i64, cfg: &RampConfig) -> Result<f64> {
    cfg.validate()?;
    if t < 0 {
        return Err(Error::validation(format!("rampup step {t} < 0")));
    }
    let t = (t as u64).min(cfg.t_max) as f64;
    let frac = 1.0 - t / cfg.t_max as f64;
    Ok(cfg.peak * (-5.0 * frac * frac).exp())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            warmup: 20,
            total: 150,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) {
            return Err(Error::validation("lr.base must be > 0"));
        }
        if self.warmup >= self.total {
            return Err(Error::validation("lr.warmup must be < lr.total"));
        }
        Ok(())
    }
}

/// Linear warmup 0 -> base over `warmup` steps, then cosine decay to zero at
/// `total`. Steps past `total` stay at zero.
pub fn learning_rate(t: i64, sched: &LrSchedule) -> Result<f64> {
    sched.validate()?;
    if t < 0 {
        return Err(Error::validation(format!("lr step {t} < 0")));
    }
    let t = t as u64;
    if t < sched.warmup {
        return Ok(sched.base * t as f64 / sched.warmup as f64);
    }
    if t >= sched.total {
        return Ok(0.0);
    }
    let progress = (t - sched.warmup) as f64 / (sched.total - sched.warmup) as f64;
    Ok(sched.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
