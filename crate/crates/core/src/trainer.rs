//! The dual-teacher training loop.
//!
//! Each step draws three independent batches: (a) labeled source slices for
//! the supervised loss, (b) unlabeled source-appearance images for the
//! semantic consistency term between student and the first EMA teacher under
//! different input noise, and (c) cross-appearance structural pairs, where
//! the student sees the source-appearance view and the second EMA teacher
//! sees its translated counterpart. Only the student takes gradient steps;
//! both teachers follow by EMA.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::dcam::{synthesize_domains, DcamState, TranslationKind};
use crate::ema::{ema_init, ema_update, EmaState};
use crate::error::{Error, Result};
use crate::losses::{
    mse_consistency_grad, softmax, softmax_backward, structural_consistency_grad,
    supervised_loss_grad, student_total, LossWeights,
};
use crate::networks::{perturb, DomainTag, ImageBatch, NoiseConfig, SegNet, SegNetSpec};
use crate::nn::rng::{permutation, stream};
use crate::nn::{Adam, AdamConfig};
use crate::params::{Checkpoint, ParamSet};
use crate::schedules::{learning_rate, rampup_weight, LrSchedule, RampConfig};

/// Which teacher branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both teachers, structural loss on self-information maps.
    Full,
    /// No semantic teacher (L_kd off).
    Ns,
    /// No structural teacher (L_con off).
    Nt,
    /// No semantic teacher; the structural teacher compares plain
    /// probabilities with MSE instead of self-information maps.
    NsMse,
    /// Both teachers off: plain supervised training on the labeled slices.
    Supervised,
}

impl Ablation {
    pub fn semantic_enabled(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Nt)
    }

    pub fn structural_enabled(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Ns | Ablation::NsMse)
    }

    pub fn structural_uses_mse(self) -> bool {
        matches!(self, Ablation::NsMse)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seg: SegNetSpec,
    pub total_steps: u64,
    pub alpha: f32,
    pub rampup_kd: RampConfig,
    pub rampup_con: RampConfig,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub noise: NoiseConfig,
    pub ablation: Ablation,
    pub batch_labeled: usize,
    pub batch_semantic: usize,
    pub batch_structural: usize,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Also pair target-appearance student views (off by default).
    pub structural_bidirectional: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seg: SegNetSpec::default(),
            total_steps: 150,
            alpha: 0.999,
            rampup_kd: RampConfig::default(),
            rampup_con: RampConfig::default(),
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            noise: NoiseConfig::default(),
            ablation: Ablation::Full,
            batch_labeled: 4,
            batch_semantic: 4,
            batch_structural: 4,
            checkpoint_every: 25,
            keep_checkpoints: 3,
            structural_bidirectional: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.rampup_kd.validate()?;
        self.rampup_con.validate()?;
        self.lr.validate()?;
        self.noise.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation("alpha must lie in [0, 1]"));
        }
        if self.total_steps == 0 {
            return Err(Error::validation("total_steps must be > 0"));
        }
        if self.batch_labeled == 0 || self.batch_semantic == 0 || self.batch_structural == 0 {
            return Err(Error::validation("batch sizes must be > 0"));
        }
        Ok(())
    }
}

/// A structural-consistency pair: two appearance views of one anatomy.
#[derive(Debug, Clone)]
pub struct StructuralPair {
    pub pre_image: String,
    /// Source-appearance view fed to the student.
    pub student_view: Array2<f32>,
    /// Its cross-appearance counterpart fed to the structural teacher.
    pub teacher_view: Array2<f32>,
}

/// Materialized per-step data sources.
pub struct Streams {
    pub labeled: Vec<(Array2<f32>, Array2<u8>)>,
    pub semantic: Vec<Array2<f32>>,
    pub structural: Vec<StructuralPair>,
}

/// Builds the three training streams from the dataset and the frozen DCAM:
/// (a) labeled source; (b) unlabeled source plus both kinds of synthetic
/// source-like images; (c) pairs {(x_s, x_s->t)} plus {(x_t->s, x_t)}.
pub fn build_streams(cfg: &TrainConfig, ds: &Dataset, dcam: &DcamState) -> Result<Streams> {
    cfg.validate()?;
    let labeled_src = ds.labeled_source();
    if labeled_src.is_empty() {
        return Err(Error::validation(
            "training requires at least one labeled source sample (N >= 1)",
        ));
    }
    let labeled = labeled_src
        .iter()
        .map(|smp| {
            (
                smp.image.clone(),
                smp.label.clone().expect("labeled sample carries a mask"),
            )
        })
        .collect();

    let d_s: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(|smp| smp.domain == DomainTag::Source && smp.split == crate::data::Split::Train)
        .collect();
    let d_t = ds.target_train();
    let synth = synthesize_domains(dcam, &d_s, &d_t)?;

    // Semantic stream: real unlabeled source union the source-like domain.
    let mut semantic: Vec<Array2<f32>> = ds
        .unlabeled_source()
        .iter()
        .map(|smp| smp.image.clone())
        .collect();
    semantic.extend(synth.sourcelike.iter().map(|x| x.image.clone()));

    // Structural pairs keyed by pre-image.
    let mut structural = Vec::new();
    for smp in &d_s {
        let translated = synth
            .targetlike
            .iter()
            .find(|x| x.kind == TranslationKind::S2t && x.pre_image == smp.id)
            .expect("every source sample has an s2t translation");
        structural.push(StructuralPair {
            pre_image: smp.id.clone(),
            student_view: smp.image.clone(),
            teacher_view: translated.image.clone(),
        });
        if cfg.structural_bidirectional {
            structural.push(StructuralPair {
                pre_image: smp.id.clone(),
                student_view: translated.image.clone(),
                teacher_view: smp.image.clone(),
            });
        }
    }
    for smp in &d_t {
        let translated = synth
            .sourcelike
            .iter()
            .find(|x| x.kind == TranslationKind::T2s && x.pre_image == smp.id)
            .expect("every target sample has a t2s translation");
        structural.push(StructuralPair {
            pre_image: smp.id.clone(),
            student_view: translated.image.clone(),
            teacher_view: smp.image.clone(),
        });
        if cfg.structural_bidirectional {
            structural.push(StructuralPair {
                pre_image: smp.id.clone(),
                student_view: smp.image.clone(),
                teacher_view: translated.image.clone(),
            });
        }
    }

    Ok(Streams {
        labeled,
        semantic,
        structural,
    })
}

/// Student, both EMA teachers, optimizer moments and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub student: ParamSet,
    pub ema: EmaState,
    pub opt: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = SegNet::new(cfg.seg)?;
        let student = net.init_params(cfg.seed)?;
        Ok(TrainState {
            ema: ema_init(&student, cfg.alpha),
            opt: Adam::new(&student, cfg.adam),
            student,
            step: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_section("student", self.student.clone());
        ckpt.insert_section("teacher_semantic", self.ema.teacher_semantic.clone());
        ckpt.insert_section("teacher_structural", self.ema.teacher_structural.clone());
        ckpt.insert_section("opt.m", self.opt.m.clone());
        ckpt.insert_section("opt.v", self.opt.v.clone());
        ckpt.meta = serde_json::json!({
            "kind": "mtuda",
            "step": self.step,
            "opt_t": self.opt.t,
            "ema_step": self.ema.step,
            "config": serde_json::to_value(&self.cfg)?,
        });
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let cfg: TrainConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::config("train checkpoint missing config"))?,
        )?;
        let sect = |name: &str| ckpt.required_section(name).cloned();
        Ok(TrainState {
            student: sect("student")?,
            ema: EmaState {
                teacher_semantic: sect("teacher_semantic")?,
                teacher_structural: sect("teacher_structural")?,
                alpha_semantic: cfg.alpha,
                alpha_structural: cfg.alpha,
                step: ckpt.meta_u64("ema_step")?,
            },
            opt: Adam::from_state(cfg.adam, sect("opt.m")?, sect("opt.v")?, ckpt.meta_u64("opt_t")?),
            step: ckpt.meta_u64("step")?,
            cfg,
        })
    }
}

/// Per-step loss record, serialized line-by-line into the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub lambda_kd: f64,
    pub lambda_con: f64,
    pub seg: f64,
    pub kd: f64,
    pub con: f64,
    pub total: f64,
}

fn stack_images<'a>(images: impl Iterator<Item = &'a Array2<f32>>, count: usize) -> Array4<f32> {
    let mut images = images.peekable();
    let (h, w) = images.peek().expect("non-empty batch").dim();
    let mut out = Array4::<f32>::zeros((count, 1, h, w));
    for (k, img) in images.enumerate().take(count) {
        out.slice_mut(s![k, 0, .., ..]).assign(img);
    }
    out
}

fn batch_indices(seed: u64, label: &str, step: u64, pool: usize, count: usize) -> Vec<usize> {
    let per_epoch = pool.div_ceil(count).max(1);
    let epoch = step / per_epoch as u64;
    let order = permutation(seed, label, epoch, pool);
    let off = (step as usize % per_epoch) * count;
    (0..count).map(|k| order[(off + k) % pool]).collect()
}

fn derived_noise(cfg: &NoiseConfig, base_seed: u64, label: &str, step: u64) -> NoiseConfig {
    cfg.with_seed(rand::RngCore::next_u64(&mut stream(base_seed, label, step)))
}

/// One training step on the three streams. Returns the loss report; only
/// the student takes a gradient step, then both teachers are EMA-updated.
pub fn mtuda_step(state: &mut TrainState, streams: &Streams) -> Result<StepReport> {
    let cfg = state.cfg.clone();
    let step = state.step;
    let net = SegNet::new(cfg.seg)?;
    let abl = cfg.ablation;

    let lambda_kd = if abl.semantic_enabled() {
        rampup_weight(step as i64, &cfg.rampup_kd)?
    } else {
        0.0
    };
    let lambda_con = if abl.structural_enabled() {
        rampup_weight(step as i64, &cfg.rampup_con)?
    } else {
        0.0
    };
    let lr = learning_rate(step as i64, &cfg.lr)?;

    let mut grads = state.student.zeros_like();

    // (a) Supervised loss on the labeled batch.
    let idx = batch_indices(cfg.seed, "batch-labeled", step, streams.labeled.len(), cfg.batch_labeled);
    let images = stack_images(idx.iter().map(|&i| &streams.labeled[i].0), cfg.batch_labeled);
    let (bh, bw) = streams.labeled[idx[0]].1.dim();
    let mut labels = Array3::<u8>::zeros((cfg.batch_labeled, bh, bw));
    for (k, &i) in idx.iter().enumerate() {
        labels.slice_mut(s![k, .., ..]).assign(&streams.labeled[i].1);
    }
    let (logits, cache) = net.forward_t(&state.student, &images)?;
    let probs = softmax(&logits);
    let (seg, dprobs) = supervised_loss_grad(&probs, &labels)?;
    let dlogits = softmax_backward(&probs, &dprobs);
    net.backward(&state.student, &cache, &dlogits, &mut grads)?;
    let seg = seg as f64;

    // (b) Semantic consistency on source-appearance images.
    let mut kd = 0.0f64;
    if abl.semantic_enabled() && !streams.semantic.is_empty() {
        let idx = batch_indices(cfg.seed, "batch-semantic", step, streams.semantic.len(), cfg.batch_semantic);
        let x = ImageBatch::new(
            stack_images(idx.iter().map(|&i| &streams.semantic[i]), cfg.batch_semantic),
            DomainTag::Source,
        );
        let x_student = perturb(&x, &derived_noise(&cfg.noise, cfg.seed, "kd-noise-student", step))?;
        let x_teacher = perturb(&x, &derived_noise(&cfg.noise, cfg.seed, "kd-noise-teacher", step))?;
        let (logits_s, cache_s) = net.forward_t(&state.student, &x_student.data)?;
        let logits_t = net.forward(&state.ema.teacher_semantic, &x_teacher.data)?;
        let probs_s = softmax(&logits_s);
        let probs_t = softmax(&logits_t); // teacher treated as constant
        let (v, dprobs) = mse_consistency_grad(&probs_s, &probs_t)?;
        kd = v as f64;
        let mut kd_grads = state.student.zeros_like();
        let dlogits = softmax_backward(&probs_s, &dprobs);
        net.backward(&state.student, &cache_s, &dlogits, &mut kd_grads)?;
        grads.add_scaled(&kd_grads, lambda_kd as f32)?;
    }

    // (c) Structural consistency on cross-appearance pairs.
    let mut con = 0.0f64;
    if abl.structural_enabled() && !streams.structural.is_empty() {
        let idx = batch_indices(cfg.seed, "batch-structural", step, streams.structural.len(), cfg.batch_structural);
        let sv = ImageBatch::new(
            stack_images(idx.iter().map(|&i| &streams.structural[i].student_view), cfg.batch_structural),
            DomainTag::Source,
        );
        let tv = ImageBatch::new(
            stack_images(idx.iter().map(|&i| &streams.structural[i].teacher_view), cfg.batch_structural),
            DomainTag::Target,
        );
        let x_student = perturb(&sv, &derived_noise(&cfg.noise, cfg.seed, "con-noise-student", step))?;
        let x_teacher = perturb(&tv, &derived_noise(&cfg.noise, cfg.seed, "con-noise-teacher", step))?;
        let (logits_s, cache_s) = net.forward_t(&state.student, &x_student.data)?;
        let logits_t = net.forward(&state.ema.teacher_structural, &x_teacher.data)?;
        let probs_s = softmax(&logits_s);
        let probs_t = softmax(&logits_t);
        let (v, dprobs) = if abl.structural_uses_mse() {
            mse_consistency_grad(&probs_s, &probs_t)?
        } else {
            structural_consistency_grad(&probs_s, &probs_t)?
        };
        con = v as f64;
        let mut con_grads = state.student.zeros_like();
        let dlogits = softmax_backward(&probs_s, &dprobs);
        net.backward(&state.student, &cache_s, &dlogits, &mut con_grads)?;
        grads.add_scaled(&con_grads, lambda_con as f32)?;
    }

    let total = student_total(
        seg,
        kd,
        con,
        &LossWeights {
            lambda_kd,
            lambda_con,
        },
    )?;
    if !total.is_finite() || !grads.all_finite() {
        return Err(Error::runtime(format!(
            "step {step}: non-finite loss (seg {seg}, kd {kd}, con {con})"
        )));
    }

    state.opt.step(&mut state.student, &grads, lr as f32)?;
    ema_update(&mut state.ema, &state.student)?;
    state.step += 1;

    Ok(StepReport {
        step,
        lr,
        lambda_kd,
        lambda_con,
        seg,
        kd,
        con,
        total,
    })
}

/// Runs the full training loop: `total_steps` of [`mtuda_step`], periodic
/// checkpoints (keeping the last `keep_checkpoints`), and a final
/// checkpoint. Returns the final state and the per-step loss log.
pub fn fit(
    cfg: &TrainConfig,
    ds: &Dataset,
    dcam: &DcamState,
    run_dir: Option<&Path>,
) -> Result<(TrainState, Vec<StepReport>)> {
    let streams = build_streams(cfg, ds, dcam)?;
    let mut state = TrainState::init(cfg)?;
    let mut reports = Vec::with_capacity(cfg.total_steps as usize);
    let mut kept: Vec<PathBuf> = Vec::new();
    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d)?;
    }

    for step in 0..cfg.total_steps {
        let report = mtuda_step(&mut state, &streams).map_err(|e| {
            let last = kept
                .last()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".to_string());
            Error::runtime(format!("{e}; last good checkpoint: {last}"))
        })?;
        reports.push(report);
        if let Some(d) = &ckpt_dir {
            let at_end = step + 1 == cfg.total_steps;
            if cfg.checkpoint_every > 0 && ((step + 1) % cfg.checkpoint_every == 0 || at_end) {
                let path = d.join(format!("step_{:06}.ckpt", step + 1));
                state.save(&path)?;
                kept.push(path);
                while kept.len() > cfg.keep_checkpoints.max(1) {
                    let old = kept.remove(0);
                    let _ = std::fs::remove_file(old);
                }
            }
        }
    }
    if let Some(d) = &ckpt_dir {
        state.save(&d.join("final.ckpt"))?;
    }
    Ok((state, reports))
}

/// Segments a target batch: translate to source appearance through the
/// frozen generator (identity when `dcam` is `None`), run the student, and
/// argmax with ties broken toward the lower class index.
pub fn infer_target(
    spec: &SegNetSpec,
    student: &ParamSet,
    dcam: Option<&DcamState>,
    batch: &ImageBatch,
) -> Result<Array3<u8>> {
    let translated = match dcam {
        Some(state) => crate::dcam::translate(state, batch, crate::dcam::Direction::T2s)?,
        None => batch.clone(),
    };
    let net = SegNet::new(*spec)?;
    let logits = net.forward(student, &translated.data)?;
    Ok(argmax_channels(&logits))
}

/// Channel argmax; ties go to the lower class index.
pub fn argmax_channels(logits: &Array4<f32>) -> Array3<u8> {
    let (b, c, h, w) = logits.dim();
    let mut out = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = logits[[bi, 0, y, x]];
                let mut arg = 0u8;
                for ci in 1..c {
                    let v = logits[[bi, ci, y, x]];
                    if v > best {
                        best = v;
                        arg = ci as u8;
                    }
                }
                out[[bi, y, x]] = arg;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, SynthConfig};
    use crate::dcam::DcamConfig;
    use crate::networks::GenSpec;

    fn toy_seg() -> SegNetSpec {
        SegNetSpec {
            in_channels: 1,
            num_classes: 5,
            base_width: 4,
            depth: 2,
        }
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            seg: toy_seg(),
            total_steps: 4,
            batch_labeled: 2,
            batch_semantic: 2,
            batch_structural: 2,
            checkpoint_every: 2,
            seed: 3,
            ..Default::default()
        }
    }

    fn toy_ds() -> Dataset {
        make_dataset(&SynthConfig {
            image_size: 16,
            source_count: 6,
            target_count: 6,
            target_test_count: 2,
            label_fraction: 0.5,
            seed: 2,
            ..Default::default()
        })
        .unwrap()
    }

    fn toy_dcam(ds: &Dataset) -> DcamState {
        // Generators need >= 8x8 inputs through the discriminator, and the
        // toy images are 16x16. No training steps needed for stream tests.
        let cfg = DcamConfig {
            gen: GenSpec {
                channels: 1,
                base_width: 4,
                res_blocks: 1,
                head_init_std: 0.01,
            },
            disc_base_width: 4,
            steps: 1,
            seed: 8,
            ..Default::default()
        };
        let _ = ds;
        DcamState::init(&cfg).unwrap()
    }

    #[test]
    fn streams_have_expected_membership() {
        let ds = toy_ds();
        let dcam = toy_dcam(&ds);
        let cfg = toy_train_cfg();
        let streams = build_streams(&cfg, &ds, &dcam).unwrap();
        assert_eq!(streams.labeled.len(), 3);
        // semantic: 3 unlabeled source + sourcelike (6 t2s + 6 s2t2s).
        assert_eq!(streams.semantic.len(), 3 + 12);
        // structural: one pair per source + one per target sample.
        assert_eq!(streams.structural.len(), 12);
        // Pairs share a pre-image identifier by construction.
        assert!(streams
            .structural
            .iter()
            .all(|p| !p.pre_image.is_empty()
                && p.student_view.dim() == p.teacher_view.dim()));
    }

    #[test]
    fn streams_nonempty_when_all_source_labeled() {
        let ds = make_dataset(&SynthConfig {
            image_size: 16,
            source_count: 4,
            target_count: 4,
            target_test_count: 2,
            label_fraction: 1.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let dcam = toy_dcam(&ds);
        let streams = build_streams(&toy_train_cfg(), &ds, &dcam).unwrap();
        // N = M leaves no real unlabeled source, but synthetic source-like
        // images keep the semantic stream populated.
        assert!(!streams.semantic.is_empty());
    }

    #[test]
    fn zero_labeled_is_rejected() {
        let ds = make_dataset(&SynthConfig {
            image_size: 16,
            source_count: 4,
            target_count: 4,
            target_test_count: 2,
            label_fraction: 0.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let dcam = toy_dcam(&ds);
        assert!(build_streams(&toy_train_cfg(), &ds, &dcam).is_err());
    }

    #[test]
    fn batch_order_reproducible_and_epoch_dependent() {
        let a = batch_indices(7, "x", 0, 10, 3);
        assert_eq!(a, batch_indices(7, "x", 0, 10, 3));
        // Steps within one epoch tile the same permutation.
        let epoch0: Vec<usize> = (0..4).flat_map(|s| batch_indices(7, "x", s, 10, 3)).collect();
        let epoch1: Vec<usize> = (4..8).flat_map(|s| batch_indices(7, "x", s, 10, 3)).collect();
        assert_ne!(epoch0, epoch1);
    }

    #[test]
    fn ablations_zero_their_terms() {
        let ds = toy_ds();
        let dcam = toy_dcam(&ds);
        for (abl, kd_zero, con_zero) in [
            (Ablation::Ns, true, false),
            (Ablation::Nt, false, true),
            (Ablation::Supervised, true, true),
            (Ablation::NsMse, true, false),
        ] {
            let cfg = TrainConfig {
                ablation: abl,
                total_steps: 1,
                ..toy_train_cfg()
            };
            let streams = build_streams(&cfg, &ds, &dcam).unwrap();
            let mut state = TrainState::init(&cfg).unwrap();
            let r = mtuda_step(&mut state, &streams).unwrap();
            assert_eq!(r.kd == 0.0, kd_zero, "{abl:?} kd");
            assert_eq!(r.con == 0.0, con_zero, "{abl:?} con");
            assert!((r.total - (r.seg + r.lambda_kd * r.kd + r.lambda_con * r.con)).abs() < 1e-9);
        }
    }

    #[test]
    fn teachers_follow_ema_of_student_trajectory() {
        let ds = toy_ds();
        let dcam = toy_dcam(&ds);
        let cfg = toy_train_cfg();
        let streams = build_streams(&cfg, &ds, &dcam).unwrap();
        let mut state = TrainState::init(&cfg).unwrap();

        // Closed-form EMA of the student trajectory, tracked externally.
        let mut shadow = state.student.clone();
        for _ in 0..3 {
            mtuda_step(&mut state, &streams).unwrap();
            let mut blended = shadow.clone();
            blended.fill(0.0);
            blended.add_scaled(&shadow, cfg.alpha).unwrap();
            blended.add_scaled(&state.student, 1.0 - cfg.alpha).unwrap();
            shadow = blended;
        }
        // Teachers never take gradient steps: they equal the EMA exactly.
        let max_dev = state
            .ema
            .teacher_semantic
            .iter()
            .zip(shadow.iter())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()))
            .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(max_dev < 1e-6, "teacher deviates from EMA by {max_dev}");
        assert!(state.ema.teacher_semantic.bit_eq(&state.ema.teacher_structural));
    }

    #[test]
    fn fit_is_deterministic_and_checkpoints_resume_bit_exact() {
        let ds = toy_ds();
        let dcam = toy_dcam(&ds);
        let cfg = toy_train_cfg();
        let dir = std::env::temp_dir().join("mtuda_fit_test");
        let _ = std::fs::remove_dir_all(&dir);

        let (state_a, reports_a) = fit(&cfg, &ds, &dcam, Some(&dir)).unwrap();
        let (state_b, reports_b) = fit(&cfg, &ds, &dcam, None).unwrap();
        assert!(state_a.student.bit_eq(&state_b.student));
        for (a, b) in reports_a.iter().zip(reports_b.iter()) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }

        // Resume from the mid-run checkpoint and replay the tail.
        let mid = dir.join("checkpoints/step_000002.ckpt");
        let mut resumed = TrainState::load(&mid).unwrap();
        assert_eq!(resumed.step, 2);
        let streams = build_streams(&cfg, &ds, &dcam).unwrap();
        let mut tail = Vec::new();
        for _ in 2..cfg.total_steps {
            tail.push(mtuda_step(&mut resumed, &streams).unwrap());
        }
        for (a, b) in reports_a[2..].iter().zip(tail.iter()) {
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "step {}", b.step);
        }
        assert!(resumed.student.bit_eq(&state_a.student));
    }

    #[test]
    fn supervised_ablation_matches_reference_supervised_loop() {
        // With both teachers off, per-step updates bit-match a plain
        // supervised loop over the same labeled batches.
        let ds = toy_ds();
        let dcam = toy_dcam(&ds);
        let cfg = TrainConfig {
            ablation: Ablation::Supervised,
            ..toy_train_cfg()
        };
        let streams = build_streams(&cfg, &ds, &dcam).unwrap();
        let mut state = TrainState::init(&cfg).unwrap();
        // Reference loop: same init, supervised loss only.
        let net = SegNet::new(cfg.seg).unwrap();
        let mut ref_params = net.init_params(cfg.seed).unwrap();
        let mut ref_opt = Adam::new(&ref_params, cfg.adam);
        for step in 0..cfg.total_steps {
            mtuda_step(&mut state, &streams).unwrap();

            let idx = batch_indices(cfg.seed, "batch-labeled", step, streams.labeled.len(), cfg.batch_labeled);
            let images = stack_images(idx.iter().map(|&i| &streams.labeled[i].0), cfg.batch_labeled);
            let (bh, bw) = streams.labeled[idx[0]].1.dim();
            let mut labels = Array3::<u8>::zeros((cfg.batch_labeled, bh, bw));
            for (k, &i) in idx.iter().enumerate() {
                labels.slice_mut(s![k, .., ..]).assign(&streams.labeled[i].1);
            }
            let (logits, cache) = net.forward_t(&ref_params, &images).unwrap();
            let probs = softmax(&logits);
            let (_, dprobs) = supervised_loss_grad(&probs, &labels).unwrap();
            let dlogits = softmax_backward(&probs, &dprobs);
            let mut grads = ref_params.zeros_like();
            net.backward(&ref_params, &cache, &dlogits, &mut grads).unwrap();
            let lr = learning_rate(step as i64, &cfg.lr).unwrap();
            ref_opt.step(&mut ref_params, &grads, lr as f32).unwrap();
        }
        assert!(state.student.bit_eq(&ref_params));
    }

    #[test]
    fn infer_target_contract() {
        let ds = toy_ds();
        let cfg = toy_train_cfg();
        let state = TrainState::init(&cfg).unwrap();
        let test = ds.target_test();
        let (h, w) = test[0].image.dim();
        let mut x = Array4::<f32>::zeros((2, 1, h, w));
        for (k, smp) in test.iter().take(2).enumerate() {
            x.slice_mut(s![k, 0, .., ..]).assign(&smp.image);
        }
        let batch = ImageBatch::new(x.clone(), DomainTag::Target);
        let pred = infer_target(&cfg.seg, &state.student, None, &batch).unwrap();
        assert_eq!(pred.dim(), (2, h, w));
        assert!(pred.iter().all(|&v| (v as usize) < cfg.seg.num_classes));

        // Batch invariance: each slice alone gives the same map.
        for k in 0..2 {
            let single = ImageBatch::new(
                x.slice(s![k..k + 1, .., .., ..]).to_owned(),
                DomainTag::Target,
            );
            let p1 = infer_target(&cfg.seg, &state.student, None, &single).unwrap();
            assert_eq!(p1.index_axis(ndarray::Axis(0), 0), pred.index_axis(ndarray::Axis(0), k));
        }

        // With a DCAM attached, inference runs on the translated batch; with
        // an identity generator this equals direct segmentation.
        let dcam = toy_dcam(&ds);
        let with_dcam = infer_target(&cfg.seg, &state.student, Some(&dcam), &batch).unwrap();
        assert_eq!(with_dcam.dim(), (2, h, w));
    }

    #[test]
    fn argmax_ties_break_low() {
        let mut z = Array4::<f32>::zeros((1, 3, 1, 2));
        z[[0, 0, 0, 0]] = 1.0;
        z[[0, 2, 0, 0]] = 1.0; // tie between class 0 and 2
        z[[0, 1, 0, 1]] = 0.5;
        let a = argmax_channels(&z);
        assert_eq!(a[[0, 0, 0]], 0);
        assert_eq!(a[[0, 0, 1]], 1);
    }
}
