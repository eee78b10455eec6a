//! Dual cycle alignment: bidirectional unpaired translation with two
//! weight-shared generators and discriminators extended to a third,
//! reconstructed-fake stream.
//!
//! `gen_t` maps source-appearance images to target appearance, `gen_s` the
//! reverse. The reconstruction paths reuse the same two parameter sets (the
//! s->t->s reconstructor *is* `gen_s`), so exactly two generators exist. A
//! training step runs one generator phase (adversarial + cycle losses, both
//! directions) and one discriminator phase per domain on replay-pooled fakes.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::networks::{DiscSpec, Discriminator, DomainTag, GenSpec, Generator, ImageBatch};
use crate::nn::rng::{permutation, stream};
use crate::nn::{Adam, AdamConfig};
use crate::params::{Checkpoint, ParamSet};

/// How the extended discriminators treat the three image streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminationMode {
    /// 3 logits per patch: real / translated-fake / reconstructed-fake,
    /// trained with cross-entropy.
    ThreeClass,
    /// 1 logit per patch, least-squares objective, both fake kinds pooled.
    BinaryPooled,
}

impl DiscriminationMode {
    pub fn num_outputs(self) -> usize {
        match self {
            DiscriminationMode::ThreeClass => 3,
            DiscriminationMode::BinaryPooled => 1,
        }
    }
}

pub const CLASS_REAL: usize = 0;
pub const CLASS_FAKE_TRANSLATED: usize = 1;
pub const CLASS_FAKE_RECONSTRUCTED: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DcamConfig {
    pub gen: GenSpec,
    pub disc_base_width: usize,
    pub mode: DiscriminationMode,
    pub lambda_cyc: f64,
    /// Weight on the generators' adversarial terms relative to the cycle
    /// loss. The followed recipe fixes neither; the cycle anchor is strong
    /// at toy scale, so the adversarial push gets a gain here.
    pub lambda_adv: f64,
    /// Discriminator-only steps before generator updates begin.
    pub disc_warmup_steps: u64,
    pub lr: f64,
    /// Adam beta1 for both generator and discriminator optimizers.
    pub beta1: f32,
    pub steps: u64,
    pub batch_size: usize,
    pub pool_capacity: usize,
    /// Hold the learning rate for the first half of training, then decay
    /// linearly to zero.
    pub lr_decay: bool,
    pub seed: u64,
}

impl Default for DcamConfig {
    fn default() -> Self {
        DcamConfig {
            gen: GenSpec {
                head_init_std: 0.01,
                ..GenSpec::default()
            },
            disc_base_width: 16,
            mode: DiscriminationMode::ThreeClass,
            lambda_cyc: 10.0,
            lambda_adv: 1.0,
            disc_warmup_steps: 0,
            lr: 2e-4,
            beta1: 0.5,
            steps: 300,
            batch_size: 1,
            pool_capacity: 50,
            lr_decay: true,
            seed: 0,
        }
    }
}

impl DcamConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::validation("dcam: steps and batch_size must be > 0"));
        }
        if self.lambda_cyc < 0.0 || self.lambda_adv < 0.0 || !(self.lr > 0.0) {
            return Err(Error::validation("dcam: bad loss weights or lr"));
        }
        Ok(())
    }

    /// Learning rate at a given step: constant for the first half, then
    /// linear to zero.
    pub fn lr_at(&self, step: u64) -> f32 {
        if !self.lr_decay {
            return self.lr as f32;
        }
        let half = self.steps / 2;
        if step < half || self.steps == half {
            self.lr as f32
        } else {
            let remain = self.steps.saturating_sub(step) as f64;
            (self.lr * remain / (self.steps - half) as f64) as f32
        }
    }

    pub fn disc_spec(&self) -> DiscSpec {
        DiscSpec {
            in_channels: self.gen.channels,
            base_width: self.disc_base_width,
            num_outputs: self.mode.num_outputs(),
        }
    }
}

/// Replay pool holding up to `cap` past fakes of one kind; queries swap the
/// incoming fake for a stored one with probability 1/2 once full.
#[derive(Debug, Clone, Default)]
struct ImagePool {
    cap: usize,
    items: Vec<Array4<f32>>,
}

impl ImagePool {
    fn new(cap: usize) -> Self {
        ImagePool {
            cap,
            items: Vec::new(),
        }
    }

    fn query(&mut self, batch: &Array4<f32>, rng: &mut ChaCha8Rng) -> Array4<f32> {
        if self.cap == 0 {
            return batch.clone();
        }
        let mut out = batch.clone();
        for b in 0..batch.dim().0 {
            let current = batch.slice(s![b..b + 1, .., .., ..]).to_owned();
            if self.items.len() < self.cap {
                self.items.push(current);
                continue; // out already holds the incoming image
            }
            if rand::Rng::random_range(rng, 0.0f32..1.0) < 0.5 {
                let idx = rand::Rng::random_range(rng, 0..self.items.len());
                out.slice_mut(s![b..b + 1, .., .., ..]).assign(&self.items[idx]);
                self.items[idx] = current;
            }
        }
        out
    }
}

/// Full DCAM training state: two generators, two discriminators, their
/// optimizer moments, and the replay pools.
#[derive(Debug, Clone)]
pub struct DcamState {
    pub cfg: DcamConfig,
    pub gen_s: ParamSet,
    pub gen_t: ParamSet,
    pub disc_s: ParamSet,
    pub disc_t: ParamSet,
    pub opt_gen_s: Adam,
    pub opt_gen_t: Adam,
    pub opt_disc_s: Adam,
    pub opt_disc_t: Adam,
    pub step: u64,
    pool_s_translated: ImagePool,
    pool_s_reconstructed: ImagePool,
    pool_t_translated: ImagePool,
    pool_t_reconstructed: ImagePool,
}

impl DcamState {
    pub fn init(cfg: &DcamConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(cfg.gen)?;
        let disc = Discriminator::new(cfg.disc_spec())?;
        let gen_s = gen.init_params(cfg.seed ^ 0x01)?;
        let gen_t = gen.init_params(cfg.seed ^ 0x02)?;
        let disc_s = disc.init_params(cfg.seed ^ 0x03)?;
        let disc_t = disc.init_params(cfg.seed ^ 0x04)?;
        let adam = AdamConfig {
            beta1: cfg.beta1,
            ..AdamConfig::default()
        };
        Ok(DcamState {
            opt_gen_s: Adam::new(&gen_s, adam),
            opt_gen_t: Adam::new(&gen_t, adam),
            opt_disc_s: Adam::new(&disc_s, adam),
            opt_disc_t: Adam::new(&disc_t, adam),
            gen_s,
            gen_t,
            disc_s,
            disc_t,
            step: 0,
            pool_s_translated: ImagePool::new(cfg.pool_capacity),
            pool_s_reconstructed: ImagePool::new(cfg.pool_capacity),
            pool_t_translated: ImagePool::new(cfg.pool_capacity),
            pool_t_reconstructed: ImagePool::new(cfg.pool_capacity),
            cfg: cfg.clone(),
        })
    }

    /// Parameters of the generator that produces the given appearance. The
    /// t->s translator and the s->t->s reconstructor both resolve to
    /// `gen_s`; there is no third or fourth generator.
    pub fn generator_params(&self, target_appearance: DomainTag) -> &ParamSet {
        match target_appearance {
            DomainTag::Source => &self.gen_s,
            DomainTag::Target => &self.gen_t,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_section("gen_s", self.gen_s.clone());
        ckpt.insert_section("gen_t", self.gen_t.clone());
        ckpt.insert_section("disc_s", self.disc_s.clone());
        ckpt.insert_section("disc_t", self.disc_t.clone());
        ckpt.insert_section("opt_gen_s.m", self.opt_gen_s.m.clone());
        ckpt.insert_section("opt_gen_s.v", self.opt_gen_s.v.clone());
        ckpt.insert_section("opt_gen_t.m", self.opt_gen_t.m.clone());
        ckpt.insert_section("opt_gen_t.v", self.opt_gen_t.v.clone());
        ckpt.insert_section("opt_disc_s.m", self.opt_disc_s.m.clone());
        ckpt.insert_section("opt_disc_s.v", self.opt_disc_s.v.clone());
        ckpt.insert_section("opt_disc_t.m", self.opt_disc_t.m.clone());
        ckpt.insert_section("opt_disc_t.v", self.opt_disc_t.v.clone());
        ckpt.meta = serde_json::json!({
            "kind": "dcam",
            "step": self.step,
            "opt_t": self.opt_gen_s.t,
            "config": serde_json::to_value(&self.cfg)?,
        });
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let cfg: DcamConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::config("dcam checkpoint missing config"))?,
        )?;
        let step = ckpt.meta_u64("step")?;
        let opt_t = ckpt.meta_u64("opt_t")?;
        let adam = AdamConfig {
            beta1: cfg.beta1,
            ..AdamConfig::default()
        };
        let sect = |name: &str| ckpt.required_section(name).cloned();
        Ok(DcamState {
            gen_s: sect("gen_s")?,
            gen_t: sect("gen_t")?,
            disc_s: sect("disc_s")?,
            disc_t: sect("disc_t")?,
            opt_gen_s: Adam::from_state(adam, sect("opt_gen_s.m")?, sect("opt_gen_s.v")?, opt_t),
            opt_gen_t: Adam::from_state(adam, sect("opt_gen_t.m")?, sect("opt_gen_t.v")?, opt_t),
            opt_disc_s: Adam::from_state(adam, sect("opt_disc_s.m")?, sect("opt_disc_s.v")?, opt_t),
            opt_disc_t: Adam::from_state(adam, sect("opt_disc_t.m")?, sect("opt_disc_t.v")?, opt_t),
            step,
            pool_s_translated: ImagePool::new(cfg.pool_capacity),
            pool_s_reconstructed: ImagePool::new(cfg.pool_capacity),
            pool_t_translated: ImagePool::new(cfg.pool_capacity),
            pool_t_reconstructed: ImagePool::new(cfg.pool_capacity),
            cfg,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    S2t,
    T2s,
}

/// Applies the direction's generator and flips the batch's domain tag. The
/// input tag must match the direction's expected appearance.
pub fn translate(state: &DcamState, batch: &ImageBatch, direction: Direction) -> Result<ImageBatch> {
    let (params, expect) = match direction {
        Direction::S2t => (&state.gen_t, DomainTag::Source),
        Direction::T2s => (&state.gen_s, DomainTag::Target),
    };
    if batch.domain != expect {
        return Err(Error::validation(format!(
            "translate {direction:?}: batch is tagged {:?}, expected {:?}",
            batch.domain, expect
        )));
    }
    let gen = Generator::new(state.cfg.gen)?;
    let data = gen.forward(params, &batch.data)?;
    Ok(ImageBatch::new(data, batch.domain.flipped()))
}

/// Cycle-consistency loss: `lambda * mean |x - x_rec|`.
pub fn cycle_loss(x: &ImageBatch, x_rec: &ImageBatch, lambda: f64) -> Result<f64> {
    if x.data.dim() != x_rec.data.dim() {
        return Err(Error::validation("cycle_loss: shape mismatch"));
    }
    let n = x.data.len() as f64;
    let sum: f64 = x
        .data
        .iter()
        .zip(x_rec.data.iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(lambda * sum / n)
}

/// Gradient of the cycle loss with respect to the reconstruction.
fn cycle_loss_grad(x: &Array4<f32>, rec: &Array4<f32>, lambda: f64) -> (f64, Array4<f32>) {
    let n = x.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = rec.clone();
    ndarray::Zip::from(&mut grad).and(x).for_each(|r, xv| {
        let d = *r - xv;
        sum += d.abs() as f64;
        *r = (lambda / n) as f32 * d.signum();
    });
    (lambda * sum / n, grad)
}

fn check_mode_channels(out: &Array4<f32>, mode: DiscriminationMode, what: &str) -> Result<()> {
    if out.dim().1 != mode.num_outputs() {
        return Err(Error::validation(format!(
            "{what}: discriminator output has {} channels, mode {mode:?} expects {}",
            out.dim().1,
            mode.num_outputs()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of 3-class patch logits against a fixed class, with
/// value and gradient scaled by 1/total so streams can share one mean.
fn ce_against_class(logits: &Array4<f32>, class: usize, total: f64) -> (f64, Array4<f32>) {
    let probs = softmax(logits);
    let p = probs.values();
    let (b, _, h, w) = p.dim();
    let mut value = 0.0f64;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                value -= (p[[bi, class, y, x]].max(1e-12) as f64).ln();
            }
        }
    }
    // d/dz of -log p_class is softmax - onehot.
    let mut grad = p.clone();
    grad.index_axis_mut(Axis(1), class).mapv_inplace(|v| v - 1.0);
    grad.mapv_inplace(|v| v / total as f32);
    (value / total, grad)
}

/// Least-squares distance of patch outputs to a target value.
fn lsq_toward(out: &Array4<f32>, target: f32, total: f64) -> (f64, Array4<f32>) {
    let mut value = 0.0f64;
    let mut grad = out.clone();
    grad.mapv_inplace(|v| {
        let d = v - target;
        value += (d * d) as f64;
        2.0 * d / total as f32
    });
    (value / total, grad)
}

/// Discriminator objective over the three streams.
///
/// Three-class mode: mean cross-entropy of every patch against its true
/// class (real / translated / reconstructed); the reconstructed stream is
/// required. Binary mode: least squares with real -> 1 and both fake kinds
/// pooled toward 0, each side weighted 1/2.
pub fn disc_loss(
    out_real: &Array4<f32>,
    out_fake_translated: &Array4<f32>,
    out_fake_reconstructed: Option<&Array4<f32>>,
    mode: DiscriminationMode,
) -> Result<f64> {
    Ok(disc_loss_grad(out_real, out_fake_translated, out_fake_reconstructed, mode)?.0)
}

#[allow(clippy::type_complexity)]
pub fn disc_loss_grad(
    out_real: &Array4<f32>,
    out_fake_translated: &Array4<f32>,
    out_fake_reconstructed: Option<&Array4<f32>>,
    mode: DiscriminationMode,
) -> Result<(f64, Array4<f32>, Array4<f32>, Option<Array4<f32>>)> {
    check_mode_channels(out_real, mode, "disc_loss real")?;
    check_mode_channels(out_fake_translated, mode, "disc_loss translated")?;
    if let Some(r) = out_fake_reconstructed {
        check_mode_channels(r, mode, "disc_loss reconstructed")?;
    }
    match mode {
        DiscriminationMode::ThreeClass => {
            let rec = out_fake_reconstructed.ok_or_else(|| {
                Error::validation("three_class mode requires the reconstructed stream")
            })?;
            let patches = |a: &Array4<f32>| (a.len() / a.dim().1) as f64;
            let total = patches(out_real) + patches(out_fake_translated) + patches(rec);
            let (v1, g1) = ce_against_class(out_real, CLASS_REAL, total);
            let (v2, g2) = ce_against_class(out_fake_translated, CLASS_FAKE_TRANSLATED, total);
            let (v3, g3) = ce_against_class(rec, CLASS_FAKE_RECONSTRUCTED, total);
            Ok((v1 + v2 + v3, g1, g2, Some(g3)))
        }
        DiscriminationMode::BinaryPooled => {
            let n_real = out_real.len() as f64;
            let n_fake = out_fake_translated.len() as f64
                + out_fake_reconstructed.map_or(0.0, |r| r.len() as f64);
            // 0.5 * mean((real - 1)^2) + 0.5 * mean(fakes^2), fakes pooled.
            let (vr, gr) = lsq_toward(out_real, 1.0, 2.0 * n_real);
            let (vt, gt) = lsq_toward(out_fake_translated, 0.0, 2.0 * n_fake);
            let (vrec, grec) = match out_fake_reconstructed {
                Some(r) => {
                    let (v, g) = lsq_toward(r, 0.0, 2.0 * n_fake);
                    (v, Some(g))
                }
                None => (0.0, None),
            };
            Ok((vr + vt + vrec, gr, gt, grec))
        }
    }
}

/// Generator adversarial objective on its translated fake: cross-entropy
/// toward the "real" class (three-class) or least squares toward 1 (binary).
pub fn gen_adv_loss(out_fake: &Array4<f32>, mode: DiscriminationMode) -> Result<f64> {
    Ok(gen_adv_loss_grad(out_fake, mode)?.0)
}

pub fn gen_adv_loss_grad(
    out_fake: &Array4<f32>,
    mode: DiscriminationMode,
) -> Result<(f64, Array4<f32>)> {
    check_mode_channels(out_fake, mode, "gen_adv_loss")?;
    match mode {
        DiscriminationMode::ThreeClass => {
            let total = (out_fake.len() / out_fake.dim().1) as f64;
            Ok(ce_against_class(out_fake, CLASS_REAL, total))
        }
        DiscriminationMode::BinaryPooled => Ok(lsq_toward(out_fake, 1.0, out_fake.len() as f64)),
    }
}

/// Per-step loss report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DcamStepReport {
    pub step: u64,
    pub g_adv_s: f64,
    pub g_adv_t: f64,
    pub cyc_s: f64,
    pub cyc_t: f64,
    pub d_s: f64,
    pub d_t: f64,
}

impl DcamStepReport {
    pub fn all_finite(&self) -> bool {
        [self.g_adv_s, self.g_adv_t, self.cyc_s, self.cyc_t, self.d_s, self.d_t]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything the discriminator phase needs from the generator phase.
pub struct GenPhaseOut {
    pub fake_s: Array4<f32>,
    pub fake_t: Array4<f32>,
    pub rec_s: Array4<f32>,
    pub rec_t: Array4<f32>,
    pub g_adv_s: f64,
    pub g_adv_t: f64,
    pub cyc_s: f64,
    pub cyc_t: f64,
}

/// Forward-only translation paths, for discriminator warmup steps.
fn forward_fakes(state: &DcamState, x_s: &Array4<f32>, x_t: &Array4<f32>) -> Result<GenPhaseOut> {
    let gen = Generator::new(state.cfg.gen)?;
    let fake_t = gen.forward(&state.gen_t, x_s)?;
    let fake_s = gen.forward(&state.gen_s, x_t)?;
    let rec_s = gen.forward(&state.gen_s, &fake_t)?;
    let rec_t = gen.forward(&state.gen_t, &fake_s)?;
    let cyc_s = cycle_loss_grad(x_s, &rec_s, state.cfg.lambda_cyc).0;
    let cyc_t = cycle_loss_grad(x_t, &rec_t, state.cfg.lambda_cyc).0;
    Ok(GenPhaseOut {
        fake_s,
        fake_t,
        rec_s,
        rec_t,
        g_adv_s: 0.0,
        g_adv_t: 0.0,
        cyc_s,
        cyc_t,
    })
}

/// Generator phase: adversarial + cycle losses in both directions, one Adam
/// step on each generator. Discriminator parameters are read but never
/// written.
pub fn generator_phase(
    state: &mut DcamState,
    x_s: &Array4<f32>,
    x_t: &Array4<f32>,
) -> Result<GenPhaseOut> {
    let gen = Generator::new(state.cfg.gen)?;
    let disc = Discriminator::new(state.cfg.disc_spec())?;
    let mode = state.cfg.mode;
    let lambda = state.cfg.lambda_cyc;

    // Forward all four translation paths. The reconstructors share weights
    // with the direct generators: the same ParamSet is applied twice.
    let (fake_t, c_gt) = gen.forward_t(&state.gen_t, x_s)?;
    let (fake_s, c_gs) = gen.forward_t(&state.gen_s, x_t)?;
    let (rec_s, c_gs_rec) = gen.forward_t(&state.gen_s, &fake_t)?;
    let (rec_t, c_gt_rec) = gen.forward_t(&state.gen_t, &fake_s)?;

    let mut grads_gen_s = state.gen_s.zeros_like();
    let mut grads_gen_t = state.gen_t.zeros_like();

    // Cycle losses; backprop the reconstruction paths first so the cycle
    // contribution to each fake is known before the direct-path backward.
    let (cyc_s, d_rec_s) = cycle_loss_grad(x_s, &rec_s, lambda);
    let (cyc_t, d_rec_t) = cycle_loss_grad(x_t, &rec_t, lambda);
    let d_fake_t_cyc = gen.backward(&state.gen_s, &c_gs_rec, &d_rec_s, &mut grads_gen_s)?;
    let d_fake_s_cyc = gen.backward(&state.gen_t, &c_gt_rec, &d_rec_t, &mut grads_gen_t)?;

    // Adversarial terms through frozen discriminators (scratch gradients).
    let (out_fake_s, c_ds) = disc.forward_t(&state.disc_s, &fake_s)?;
    let (out_fake_t, c_dt) = disc.forward_t(&state.disc_t, &fake_t)?;
    let (g_adv_s, mut d_out_s) = gen_adv_loss_grad(&out_fake_s, mode)?;
    let (g_adv_t, mut d_out_t) = gen_adv_loss_grad(&out_fake_t, mode)?;
    let adv_w = state.cfg.lambda_adv as f32;
    d_out_s.mapv_inplace(|v| v * adv_w);
    d_out_t.mapv_inplace(|v| v * adv_w);
    let mut scratch_s = state.disc_s.zeros_like();
    let mut scratch_t = state.disc_t.zeros_like();
    let d_fake_s_adv = disc
        .backward(&state.disc_s, &c_ds, &d_out_s, &mut scratch_s, true)?
        .expect("disc backward with want_dx");
    let d_fake_t_adv = disc
        .backward(&state.disc_t, &c_dt, &d_out_t, &mut scratch_t, true)?
        .expect("disc backward with want_dx");

    // Direct translation paths get both adversarial and cycle gradients.
    let d_fake_t = &d_fake_t_adv + &d_fake_t_cyc;
    let d_fake_s = &d_fake_s_adv + &d_fake_s_cyc;
    gen.backward(&state.gen_t, &c_gt, &d_fake_t, &mut grads_gen_t)?;
    gen.backward(&state.gen_s, &c_gs, &d_fake_s, &mut grads_gen_s)?;

    let lr = state.cfg.lr_at(state.step);
    state.opt_gen_s.step(&mut state.gen_s, &grads_gen_s, lr)?;
    state.opt_gen_t.step(&mut state.gen_t, &grads_gen_t, lr)?;

    Ok(GenPhaseOut {
        fake_s,
        fake_t,
        rec_s,
        rec_t,
        g_adv_s,
        g_adv_t,
        cyc_s,
        cyc_t,
    })
}

/// Discriminator phase: each domain's discriminator trains on the real
/// batch plus replay-pooled fakes. Generator parameters are not touched.
pub fn discriminator_phase(
    state: &mut DcamState,
    x_s: &Array4<f32>,
    x_t: &Array4<f32>,
    fakes: &GenPhaseOut,
    step: u64,
) -> Result<(f64, f64)> {
    let disc = Discriminator::new(state.cfg.disc_spec())?;
    let mode = state.cfg.mode;
    let seed = state.cfg.seed;
    let lr = state.cfg.lr_at(step);

    let mut rng_s = stream(seed, "pool-s", step);
    let mut rng_t = stream(seed, "pool-t", step);
    let fake_s = state.pool_s_translated.query(&fakes.fake_s, &mut rng_s);
    let rec_s = state.pool_s_reconstructed.query(&fakes.rec_s, &mut rng_s);
    let fake_t = state.pool_t_translated.query(&fakes.fake_t, &mut rng_t);
    let rec_t = state.pool_t_reconstructed.query(&fakes.rec_t, &mut rng_t);

    let run_domain = |params: &mut ParamSet,
                      opt: &mut Adam,
                      real: &Array4<f32>,
                      fake: &Array4<f32>,
                      rec: &Array4<f32>|
     -> Result<f64> {
        let (out_real, c_real) = disc.forward_t(params, real)?;
        let (out_fake, c_fake) = disc.forward_t(params, fake)?;
        let (out_rec, c_rec) = disc.forward_t(params, rec)?;
        let (value, g_real, g_fake, g_rec) =
            disc_loss_grad(&out_real, &out_fake, Some(&out_rec), mode)?;
        let mut grads = params.zeros_like();
        disc.backward(params, &c_real, &g_real, &mut grads, false)?;
        disc.backward(params, &c_fake, &g_fake, &mut grads, false)?;
        if let Some(g_rec) = g_rec {
            disc.backward(params, &c_rec, &g_rec, &mut grads, false)?;
        }
        opt.step(params, &grads, lr)?;
        Ok(value)
    };

    let d_s = run_domain(
        &mut state.disc_s,
        &mut state.opt_disc_s,
        x_s,
        &fake_s,
        &rec_s,
    )?;
    let d_t = run_domain(
        &mut state.disc_t,
        &mut state.opt_disc_t,
        x_t,
        &fake_t,
        &rec_t,
    )?;
    Ok((d_s, d_t))
}

/// One full DCAM step: generator phase then discriminator phase, on one
/// unpaired batch per domain.
pub fn dcam_train_step(
    state: &mut DcamState,
    batch_s: &ImageBatch,
    batch_t: &ImageBatch,
) -> Result<DcamStepReport> {
    if batch_s.domain != DomainTag::Source || batch_t.domain != DomainTag::Target {
        return Err(Error::validation("dcam step: batches have wrong domain tags"));
    }
    let step = state.step;
    let fakes = if step < state.cfg.disc_warmup_steps {
        // Warmup: produce fakes without updating the generators.
        forward_fakes(state, &batch_s.data, &batch_t.data)?
    } else {
        generator_phase(state, &batch_s.data, &batch_t.data)?
    };
    let (d_s, d_t) = discriminator_phase(state, &batch_s.data, &batch_t.data, &fakes, step)?;
    state.step += 1;
    let report = DcamStepReport {
        step,
        g_adv_s: fakes.g_adv_s,
        g_adv_t: fakes.g_adv_t,
        cyc_s: fakes.cyc_s,
        cyc_t: fakes.cyc_t,
        d_s,
        d_t,
    };
    if !report.all_finite() {
        return Err(Error::runtime(format!(
            "dcam step {step}: non-finite loss {report:?}"
        )));
    }
    Ok(report)
}

fn gather_batch(pool: &[&Sample], order: &[usize], start: usize, count: usize) -> Array4<f32> {
    let (h, w) = pool[0].image.dim();
    let mut out = Array4::<f32>::zeros((count, 1, h, w));
    for k in 0..count {
        let idx = order[(start + k) % order.len()];
        out.slice_mut(s![k, 0, .., ..]).assign(&pool[idx].image);
    }
    out
}

/// Trains DCAM on the unpaired source/target training pools. Batches are
/// drawn by seeded per-epoch shuffles; `on_step` sees every loss report.
pub fn train_dcam(
    cfg: &DcamConfig,
    ds: &Dataset,
    mut on_step: impl FnMut(&DcamStepReport),
) -> Result<DcamState> {
    cfg.validate()?;
    let src: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(|s| s.domain == DomainTag::Source && s.split == crate::data::Split::Train)
        .collect();
    let tgt: Vec<&Sample> = ds.target_train();
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::validation("dcam training needs both domains non-empty"));
    }
    let mut state = DcamState::init(cfg)?;
    let bs = cfg.batch_size;
    let steps_per_epoch_s = src.len().div_ceil(bs).max(1);
    let steps_per_epoch_t = tgt.len().div_ceil(bs).max(1);
    for step in 0..cfg.steps {
        let epoch_s = step / steps_per_epoch_s as u64;
        let epoch_t = step / steps_per_epoch_t as u64;
        let order_s = permutation(cfg.seed, "dcam-src", epoch_s, src.len());
        let order_t = permutation(cfg.seed, "dcam-tgt", epoch_t, tgt.len());
        let off_s = (step as usize % steps_per_epoch_s) * bs;
        let off_t = (step as usize % steps_per_epoch_t) * bs;
        let batch_s = ImageBatch::new(gather_batch(&src, &order_s, off_s, bs), DomainTag::Source);
        let batch_t = ImageBatch::new(gather_batch(&tgt, &order_t, off_t, bs), DomainTag::Target);
        let report = dcam_train_step(&mut state, &batch_s, &batch_t)?;
        on_step(&report);
    }
    Ok(state)
}

/// A translated sample carrying its pre-image identity and inherited label.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pre_image: String,
    pub kind: TranslationKind,
    pub domain: DomainTag,
    pub image: ndarray::Array2<f32>,
    pub label: Option<ndarray::Array2<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationKind {
    T2s,
    S2t2s,
    S2t,
    T2s2t,
}

impl TranslationKind {
    pub fn suffix(self) -> &'static str {
        match self {
            TranslationKind::T2s => "t2s",
            TranslationKind::S2t2s => "s2t2s",
            TranslationKind::S2t => "s2t",
            TranslationKind::T2s2t => "t2s2t",
        }
    }
}

/// The two intermediate domains: source-like = {t2s, s2t2s} and target-like
/// = {s2t, t2s2t}, each sample inheriting the segmentation mask of its
/// pre-image when one exists.
pub struct SynthesizedDomains {
    pub sourcelike: Vec<SynthSample>,
    pub targetlike: Vec<SynthSample>,
}

/// Materializes both intermediate domains from the frozen generators.
/// Translation jobs run in parallel over input shards; output order is
/// deterministic by input index.
pub fn synthesize_domains(
    state: &DcamState,
    d_s: &[&Sample],
    d_t: &[&Sample],
) -> Result<SynthesizedDomains> {
    let gen_spec = state.cfg.gen;
    let run = |samples: &[&Sample], first: Direction| -> Result<Vec<(Array4<f32>, Array4<f32>)>> {
        let pool = crate::util::worker_pool()?;
        let gen = Generator::new(gen_spec)?;
        let job = |smp: &&Sample| -> Result<(Array4<f32>, Array4<f32>)> {
            let (h, w) = smp.image.dim();
            let mut x = Array4::<f32>::zeros((1, 1, h, w));
            x.slice_mut(s![0, 0, .., ..]).assign(&smp.image);
            let (p1, p2) = match first {
                Direction::S2t => (&state.gen_t, &state.gen_s),
                Direction::T2s => (&state.gen_s, &state.gen_t),
            };
            let once = gen.forward(p1, &x)?;
            let twice = gen.forward(p2, &once)?;
            Ok((once, twice))
        };
        match pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                samples.par_iter().map(job).collect()
            }),
            None => samples.iter().map(job).collect(),
        }
    };

    let src_out = run(d_s, Direction::S2t)?; // (s2t, s2t2s)
    let tgt_out = run(d_t, Direction::T2s)?; // (t2s, t2s2t)

    let to2d = |a: &Array4<f32>| a.slice(s![0, 0, .., ..]).to_owned();
    let mut sourcelike = Vec::new();
    let mut targetlike = Vec::new();
    for (smp, (once, twice)) in d_t.iter().zip(tgt_out.iter()) {
        sourcelike.push(SynthSample {
            pre_image: smp.id.clone(),
            kind: TranslationKind::T2s,
            domain: DomainTag::Source,
            image: to2d(once),
            label: smp.label.clone(),
        });
        targetlike.push(SynthSample {
            pre_image: smp.id.clone(),
            kind: TranslationKind::T2s2t,
            domain: DomainTag::Target,
            image: to2d(twice),
            label: smp.label.clone(),
        });
    }
    for (smp, (once, twice)) in d_s.iter().zip(src_out.iter()) {
        targetlike.push(SynthSample {
            pre_image: smp.id.clone(),
            kind: TranslationKind::S2t,
            domain: DomainTag::Target,
            image: to2d(once),
            label: smp.label.clone(),
        });
        sourcelike.push(SynthSample {
            pre_image: smp.id.clone(),
            kind: TranslationKind::S2t2s,
            domain: DomainTag::Source,
            image: to2d(twice),
            label: smp.label.clone(),
        });
    }
    Ok(SynthesizedDomains {
        sourcelike,
        targetlike,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, SynthConfig};

    fn toy_cfg() -> DcamConfig {
        DcamConfig {
            gen: GenSpec {
                channels: 1,
                base_width: 4,
                res_blocks: 2,
                head_init_std: 0.01,
            },
            disc_base_width: 4,
            steps: 3,
            batch_size: 1,
            seed: 9,
            ..Default::default()
        }
    }

    fn toy_ds() -> Dataset {
        make_dataset(&SynthConfig {
            image_size: 32,
            source_count: 4,
            target_count: 4,
            target_test_count: 2,
            label_fraction: 0.5,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn as_batch(sample: &Sample, domain: DomainTag) -> ImageBatch {
        let (h, w) = sample.image.dim();
        let mut x = Array4::<f32>::zeros((1, 1, h, w));
        x.slice_mut(s![0, 0, .., ..]).assign(&sample.image);
        ImageBatch::new(x, domain)
    }

    #[test]
    fn translate_contract_and_weight_sharing() {
        let state = DcamState::init(&toy_cfg()).unwrap();
        // The t->s translator and the s->t->s reconstructor resolve to the
        // same ParamSet object: identity, not just equality.
        assert!(std::ptr::eq(
            state.generator_params(DomainTag::Source),
            &state.gen_s
        ));
        let ds = toy_ds();
        let xs = as_batch(&ds.samples[0], DomainTag::Source);
        let fake_t = translate(&state, &xs, Direction::S2t).unwrap();
        assert_eq!(fake_t.domain, DomainTag::Target);
        assert_eq!(fake_t.data.dim(), xs.data.dim());
        let rec_s = translate(&state, &fake_t, Direction::T2s).unwrap();
        assert_eq!(rec_s.domain, DomainTag::Source);
        // Deterministic given state.
        let again = translate(&state, &xs, Direction::S2t).unwrap();
        assert!(fake_t
            .data
            .iter()
            .zip(again.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // Wrong-direction input is rejected.
        assert!(translate(&state, &fake_t, Direction::S2t).is_err());
    }

    #[test]
    fn cycle_loss_examples() {
        let zeros = ImageBatch::new(Array4::zeros((1, 1, 4, 4)), DomainTag::Source);
        let halves = ImageBatch::new(Array4::from_elem((1, 1, 4, 4), 0.5f32), DomainTag::Source);
        assert_eq!(cycle_loss(&zeros, &zeros, 10.0).unwrap(), 0.0);
        assert!((cycle_loss(&zeros, &halves, 10.0).unwrap() - 5.0).abs() < 1e-6);
        assert_eq!(
            cycle_loss(&zeros, &halves, 10.0).unwrap(),
            cycle_loss(&halves, &zeros, 10.0).unwrap()
        );
    }

    #[test]
    fn disc_loss_examples() {
        // Three-class, uniform logits: ln 3 per patch.
        let z = Array4::<f32>::zeros((1, 3, 2, 2));
        let v = disc_loss(&z, &z, Some(&z), DiscriminationMode::ThreeClass).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-6);
        // Missing reconstructed stream in three_class mode.
        assert!(disc_loss(&z, &z, None, DiscriminationMode::ThreeClass).is_err());

        // Binary, all outputs 0.5: 0.5*0.25 + 0.5*0.25 = 0.25.
        let half = Array4::<f32>::from_elem((1, 1, 2, 2), 0.5);
        let v = disc_loss(&half, &half, Some(&half), DiscriminationMode::BinaryPooled).unwrap();
        assert!((v - 0.25).abs() < 1e-6);

        // Perfectly separating logits: near-zero loss.
        let mut sep = Array4::<f32>::zeros((1, 3, 1, 1));
        sep[[0, 0, 0, 0]] = 30.0;
        let mut sep_t = Array4::<f32>::zeros((1, 3, 1, 1));
        sep_t[[0, 1, 0, 0]] = 30.0;
        let mut sep_r = Array4::<f32>::zeros((1, 3, 1, 1));
        sep_r[[0, 2, 0, 0]] = 30.0;
        let v = disc_loss(&sep, &sep_t, Some(&sep_r), DiscriminationMode::ThreeClass).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn gen_adv_loss_examples() {
        // Binary: disc output 0 -> squared distance 1 to the real label.
        let zero = Array4::<f32>::zeros((1, 1, 2, 2));
        assert!(
            (gen_adv_loss(&zero, DiscriminationMode::BinaryPooled).unwrap() - 1.0).abs() < 1e-6
        );
        // Fake classified real with probability ~1 -> ~0 in both modes.
        let mut confident = Array4::<f32>::zeros((1, 3, 1, 1));
        confident[[0, 0, 0, 0]] = 30.0;
        assert!(gen_adv_loss(&confident, DiscriminationMode::ThreeClass).unwrap() < 1e-6);
        let ones = Array4::<f32>::from_elem((1, 1, 2, 2), 1.0);
        assert!(gen_adv_loss(&ones, DiscriminationMode::BinaryPooled).unwrap() < 1e-12);
        // Strictly decreasing as the real-class score rises.
        let mut prev = f64::INFINITY;
        for score in [0.0f32, 0.5, 1.5, 4.0] {
            let mut z = Array4::<f32>::zeros((1, 3, 1, 1));
            z[[0, 0, 0, 0]] = score;
            let v = gen_adv_loss(&z, DiscriminationMode::ThreeClass).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn phases_touch_only_their_own_parameters() {
        let ds = toy_ds();
        let mut state = DcamState::init(&toy_cfg()).unwrap();
        let xs = as_batch(ds.labeled_source()[0], DomainTag::Source);
        let xt = as_batch(ds.target_train()[0], DomainTag::Target);

        let disc_s_before = state.disc_s.clone();
        let disc_t_before = state.disc_t.clone();
        let fakes = generator_phase(&mut state, &xs.data, &xt.data).unwrap();
        assert!(state.disc_s.bit_eq(&disc_s_before));
        assert!(state.disc_t.bit_eq(&disc_t_before));
        assert!(fakes.fake_s.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(fakes.rec_t.iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let gen_s_before = state.gen_s.clone();
        let gen_t_before = state.gen_t.clone();
        discriminator_phase(&mut state, &xs.data, &xt.data, &fakes, 0).unwrap();
        assert!(state.gen_s.bit_eq(&gen_s_before));
        assert!(state.gen_t.bit_eq(&gen_t_before));
        assert!(!state.disc_s.bit_eq(&disc_s_before));
    }

    #[test]
    fn train_loop_is_finite_and_deterministic() {
        let ds = toy_ds();
        let cfg = toy_cfg();
        let mut reports_a = Vec::new();
        train_dcam(&cfg, &ds, |r| reports_a.push(r.clone())).unwrap();
        assert_eq!(reports_a.len(), 3);
        assert!(reports_a.iter().all(|r| r.all_finite()));
        assert!(reports_a
            .iter()
            .all(|r| r.cyc_s >= 0.0 && r.cyc_t >= 0.0 && r.d_s >= 0.0 && r.d_t >= 0.0));
        let mut reports_b = Vec::new();
        train_dcam(&cfg, &ds, |r| reports_b.push(r.clone())).unwrap();
        for (a, b) in reports_a.iter().zip(reports_b.iter()) {
            assert_eq!(a.cyc_s.to_bits(), b.cyc_s.to_bits());
            assert_eq!(a.d_t.to_bits(), b.d_t.to_bits());
        }
    }

    #[test]
    fn synthesized_domains_have_union_sizes_and_inherit_labels() {
        let ds = toy_ds();
        let state = DcamState::init(&toy_cfg()).unwrap();
        let d_s: Vec<&Sample> = ds
            .samples
            .iter()
            .filter(|s| s.domain == DomainTag::Source && s.split == crate::data::Split::Train)
            .collect();
        let d_t = ds.target_train();
        let out = synthesize_domains(&state, &d_s, &d_t).unwrap();
        assert_eq!(out.sourcelike.len(), d_t.len() + d_s.len());
        assert_eq!(out.targetlike.len(), d_s.len() + d_t.len());
        assert!(out.sourcelike.iter().all(|s| s.domain == DomainTag::Source));
        assert!(out.targetlike.iter().all(|s| s.domain == DomainTag::Target));
        // Every labeled source pre-image propagates its mask to s2t and s2t2s.
        for pre in &d_s {
            for kind in [TranslationKind::S2t, TranslationKind::S2t2s] {
                let list = if kind == TranslationKind::S2t {
                    &out.targetlike
                } else {
                    &out.sourcelike
                };
                let found = list
                    .iter()
                    .find(|x| x.pre_image == pre.id && x.kind == kind)
                    .unwrap();
                assert_eq!(found.label.is_some(), pre.label.is_some());
                if let (Some(a), Some(b)) = (&found.label, &pre.label) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_state() {
        let dir = std::env::temp_dir().join("mtuda_dcam_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dcam.ckpt");
        let ds = toy_ds();
        let cfg = toy_cfg();
        let state = train_dcam(&cfg, &ds, |_| {}).unwrap();
        state.save(&path).unwrap();
        let back = DcamState::load(&path).unwrap();
        assert!(back.gen_s.bit_eq(&state.gen_s));
        assert!(back.gen_t.bit_eq(&state.gen_t));
        assert!(back.disc_s.bit_eq(&state.disc_s));
        assert_eq!(back.step, state.step);
        assert_eq!(back.cfg, state.cfg);
    }
}
