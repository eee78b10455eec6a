//! Training objectives: supervised segmentation loss (cross-entropy + soft
//! dice), semantic consistency (MSE between probability maps), structural
//! consistency (squared distance between weighted self-information maps), and
//! the combined student objective.
//!
//! Everything is generic over `f32`/`f64`: training runs in f32, the
//! finite-difference gradient checks run in f64. Each loss comes with an
//! analytic gradient with respect to the student probability map; chain
//! through [`softmax_backward`] to get logit gradients. Teachers are always
//! treated as constants.

use ndarray::{Array3, Array4, Axis, NdFloat, Zip};

use crate::error::{Error, Result};

/// Clamp applied inside logarithms.
pub const LOG_EPS: f64 = 1e-8;
/// Smoothing term in the soft dice denominator/numerator.
pub const DICE_SMOOTH: f64 = 1e-5;

fn c<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("constant conversion")
}

/// Per-pixel class probability simplex (B, C, H, W).
#[derive(Debug, Clone)]
pub struct ProbMap<F>(Array4<F>);

impl<F: NdFloat> ProbMap<F> {
    /// Validates entries in [0, 1] and channel sums within 1e-6 of one.
    pub fn new(values: Array4<F>) -> Result<Self> {
        let one = F::one();
        let tol = c::<F>(1e-6);
        if values.iter().any(|&v| v < F::zero() || v > one + tol) {
            return Err(Error::validation("ProbMap entries must lie in [0, 1]"));
        }
        let sums = values.sum_axis(Axis(1));
        if sums.iter().any(|&s| (s - one).abs() > tol) {
            return Err(Error::validation(
                "ProbMap channel sums must equal 1 within 1e-6",
            ));
        }
        Ok(ProbMap(values))
    }

    /// Wraps without validating; for maps produced by [`softmax`].
    fn from_softmax(values: Array4<F>) -> Self {
        ProbMap(values)
    }

    pub fn values(&self) -> &Array4<F> {
        &self.0
    }

    pub fn into_values(self) -> Array4<F> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

/// Channel softmax with the usual max-shift for stability. Output is a valid
/// simplex for any finite logits.
pub fn softmax<F: NdFloat>(logits: &Array4<F>) -> ProbMap<F> {
    let (b, cdim, h, w) = logits.dim();
    let mut out = logits.clone();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut maxv = F::neg_infinity();
                for ci in 0..cdim {
                    maxv = maxv.max(out[[bi, ci, y, x]]);
                }
                let mut sum = F::zero();
                for ci in 0..cdim {
                    let e = (out[[bi, ci, y, x]] - maxv).exp();
                    out[[bi, ci, y, x]] = e;
                    sum = sum + e;
                }
                for ci in 0..cdim {
                    out[[bi, ci, y, x]] = out[[bi, ci, y, x]] / sum;
                }
            }
        }
    }
    ProbMap::from_softmax(out)
}

/// Pull a probability-space gradient back to logit space:
/// `dL/dz_c = p_c * (g_c - sum_k g_k p_k)` per pixel.
pub fn softmax_backward<F: NdFloat>(probs: &ProbMap<F>, dprobs: &Array4<F>) -> Array4<F> {
    let p = probs.values();
    let (b, cdim, h, w) = p.dim();
    let mut dz = Array4::<F>::zeros((b, cdim, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut dot = F::zero();
                for ci in 0..cdim {
                    dot = dot + dprobs[[bi, ci, y, x]] * p[[bi, ci, y, x]];
                }
                for ci in 0..cdim {
                    dz[[bi, ci, y, x]] =
                        p[[bi, ci, y, x]] * (dprobs[[bi, ci, y, x]] - dot);
                }
            }
        }
    }
    dz
}

fn check_same_shape<F: NdFloat>(a: &ProbMap<F>, b: &ProbMap<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "probability map shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_labels<F: NdFloat>(probs: &ProbMap<F>, labels: &Array3<u8>) -> Result<()> {
    let (b, cdim, h, w) = probs.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::validation(format!(
            "label shape {:?} does not match probs {:?}",
            labels.dim(),
            probs.dim()
        )));
    }
    if labels.iter().any(|&l| (l as usize) >= cdim) {
        return Err(Error::validation(format!(
            "label out of range for {cdim} classes"
        )));
    }
    Ok(())
}

/// Semantic consistency: mean squared difference over all elements.
pub fn mse_consistency<F: NdFloat>(student: &ProbMap<F>, teacher: &ProbMap<F>) -> Result<F> {
    Ok(mse_consistency_grad(student, teacher)?.0)
}

/// Value plus gradient with respect to the student probabilities.
pub fn mse_consistency_grad<F: NdFloat>(
    student: &ProbMap<F>,
    teacher: &ProbMap<F>,
) -> Result<(F, Array4<F>)> {
    check_same_shape(student, teacher)?;
    let n = c::<F>(student.values().len() as f64);
    let diff = student.values() - teacher.values();
    let value = diff.mapv(|d| d * d).sum() / n;
    let grad = diff.mapv(|d| (d + d) / n);
    Ok((value, grad))
}

/// Nonnegative per-pixel per-class weighted self-information map.
#[derive(Debug, Clone)]
pub struct SelfInfoMap<F>(pub Array4<F>);

/// `-p * log2(max(p, eps))` elementwise; the multiplier stays unclamped so
/// one-hot probabilities map to exactly zero.
pub fn self_information<F: NdFloat>(p: &ProbMap<F>) -> SelfInfoMap<F> {
    let eps = c::<F>(LOG_EPS);
    SelfInfoMap(p.values().mapv(|v| -v * v.max(eps).log2()))
}

fn self_info_with_dp<F: NdFloat>(p: &Array4<F>) -> (Array4<F>, Array4<F>) {
    let eps = c::<F>(LOG_EPS);
    let inv_ln2 = c::<F>(std::f64::consts::LOG2_E);
    let mut info = p.clone();
    let mut dinfo = p.clone();
    Zip::from(&mut info).and(&mut dinfo).for_each(|i, d| {
        let v = *i;
        let lg = v.max(eps).log2();
        *i = -v * lg;
        *d = if v > eps { -lg - inv_ln2 } else { -lg };
    });
    (info, dinfo)
}

/// Structural consistency: `(1/B) * sum_b (1/(H*W)) * sum_v ||I_s - I_t||^2`
/// with the Euclidean norm taken over class channels at each pixel.
pub fn structural_consistency<F: NdFloat>(
    student: &ProbMap<F>,
    teacher: &ProbMap<F>,
) -> Result<F> {
    Ok(structural_consistency_grad(student, teacher)?.0)
}

pub fn structural_consistency_grad<F: NdFloat>(
    student: &ProbMap<F>,
    teacher: &ProbMap<F>,
) -> Result<(F, Array4<F>)> {
    check_same_shape(student, teacher)?;
    let (b, _, h, w) = student.dim();
    let norm = c::<F>((b * h * w) as f64);
    let (info_s, dinfo_s) = self_info_with_dp(student.values());
    let info_t = self_information(teacher).0;
    let diff = &info_s - &info_t;
    let value = diff.mapv(|d| d * d).sum() / norm;
    // dL/dp = 2 (I_s - I_t) / (B H W) * dI/dp
    let mut grad = diff;
    Zip::from(&mut grad).and(&dinfo_s).for_each(|g, di| {
        *g = (*g + *g) / norm * *di;
    });
    Ok((value, grad))
}

/// Soft dice loss, mean over all classes with smoothing on both sides, class
/// sums taken over the batch-flattened spatial dims.
pub fn dice_loss<F: NdFloat>(probs: &ProbMap<F>, labels: &Array3<u8>) -> Result<F> {
    Ok(dice_loss_grad(probs, labels)?.0)
}

pub fn dice_loss_grad<F: NdFloat>(
    probs: &ProbMap<F>,
    labels: &Array3<u8>,
) -> Result<(F, Array4<F>)> {
    check_labels(probs, labels)?;
    let (b, cdim, h, w) = probs.dim();
    let s = c::<F>(DICE_SMOOTH);
    let p = probs.values();

    let mut numer = vec![F::zero(); cdim]; // 2 * sum(p*y) + s
    let mut denom = vec![F::zero(); cdim]; // sum(p) + sum(y) + s
    for ci in 0..cdim {
        let mut inter = F::zero();
        let mut psum = F::zero();
        let mut ysum = F::zero();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let pv = p[[bi, ci, y, x]];
                    psum = psum + pv;
                    if labels[[bi, y, x]] as usize == ci {
                        inter = inter + pv;
                        ysum = ysum + F::one();
                    }
                }
            }
        }
        numer[ci] = inter + inter + s;
        denom[ci] = psum + ysum + s;
    }

    let cf = c::<F>(cdim as f64);
    let mut mean_dice = F::zero();
    for ci in 0..cdim {
        mean_dice = mean_dice + numer[ci] / denom[ci];
    }
    mean_dice = mean_dice / cf;
    let value = F::one() - mean_dice;

    // d dice_c / dp = (2*y - dice_c) / denom_c; loss contributes -1/C of it.
    let mut grad = Array4::<F>::zeros((b, cdim, h, w));
    let two = c::<F>(2.0);
    for ci in 0..cdim {
        let dice_c = numer[ci] / denom[ci];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let yv = if labels[[bi, y, x]] as usize == ci {
                        two
                    } else {
                        F::zero()
                    };
                    grad[[bi, ci, y, x]] = -(yv - dice_c) / denom[ci] / cf;
                }
            }
        }
    }
    Ok((value, grad))
}

/// Pixel-mean natural-log cross-entropy on probabilities.
pub fn ce_loss<F: NdFloat>(probs: &ProbMap<F>, labels: &Array3<u8>) -> Result<F> {
    Ok(ce_loss_grad(probs, labels)?.0)
}

pub fn ce_loss_grad<F: NdFloat>(
    probs: &ProbMap<F>,
    labels: &Array3<u8>,
) -> Result<(F, Array4<F>)> {
    check_labels(probs, labels)?;
    let (b, cdim, h, w) = probs.dim();
    let eps = c::<F>(LOG_EPS);
    let npix = c::<F>((b * h * w) as f64);
    let p = probs.values();
    let mut value = F::zero();
    let mut grad = Array4::<F>::zeros((b, cdim, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = labels[[bi, y, x]] as usize;
                let pv = p[[bi, t, y, x]];
                let clamped = pv.max(eps);
                value = value - clamped.ln();
                if pv > eps {
                    grad[[bi, t, y, x]] = -F::one() / (pv * npix);
                }
            }
        }
    }
    Ok((value / npix, grad))
}

/// `0.5 * (ce + dice)`.
pub fn supervised_loss<F: NdFloat>(probs: &ProbMap<F>, labels: &Array3<u8>) -> Result<F> {
    Ok(supervised_loss_grad(probs, labels)?.0)
}

pub fn supervised_loss_grad<F: NdFloat>(
    probs: &ProbMap<F>,
    labels: &Array3<u8>,
) -> Result<(F, Array4<F>)> {
    let (ce, g_ce) = ce_loss_grad(probs, labels)?;
    let (dice, g_dice) = dice_loss_grad(probs, labels)?;
    let half = c::<F>(0.5);
    let mut grad = g_ce;
    grad.zip_mut_with(&g_dice, |a, b| *a = (*a + *b) * half);
    Ok(((ce + dice) * half, grad))
}

/// Trade-off weights for the two teacher terms, produced by the ramp-up
/// schedule each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_con: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kd < 0.0 || self.lambda_con < 0.0 {
            return Err(Error::validation("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// `seg + lambda_kd * kd + lambda_con * con`.
pub fn student_total(seg: f64, kd: f64, con: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(seg + w.lambda_kd * kd + w.lambda_con * con)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 1-pixel probability map from per-channel values.
    fn pixel(vals: &[f64]) -> ProbMap<f64> {
        let cdim = vals.len();
        let a = Array4::from_shape_vec((1, cdim, 1, 1), vals.to_vec()).unwrap();
        ProbMap::new(a).unwrap()
    }

    fn random_probs(seed: u64, b: usize, cdim: usize, h: usize, w: usize) -> ProbMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array4::from_shape_simple_fn((b, cdim, h, w), || rng.random_range(-3.0..3.0));
        softmax(&logits)
    }

    #[test]
    fn softmax_is_a_simplex_for_arbitrary_logits() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits =
                Array4::from_shape_simple_fn((1, 5, 3, 3), || rng.random_range(-60.0..60.0));
            let p = softmax(&logits);
            assert!(ProbMap::new(p.values().clone()).is_ok());
        }
    }

    #[test]
    fn mse_examples() {
        let a = pixel(&[1.0, 0.0]);
        let b = pixel(&[0.0, 1.0]);
        assert_eq!(mse_consistency(&a, &a).unwrap(), 0.0);
        assert!((mse_consistency(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let s = pixel(&[0.7, 0.3]);
        let t = pixel(&[0.5, 0.5]);
        assert!((mse_consistency(&s, &t).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = random_probs(0, 1, 3, 2, 2);
        let b = random_probs(0, 1, 3, 2, 3);
        assert!(mse_consistency(&a, &b).is_err());
    }

    #[test]
    fn self_information_examples() {
        // One-hot: 1*log2(1) = 0 and the 0*log2(0) := 0 convention.
        let onehot = self_information(&pixel(&[1.0, 0.0])).0;
        assert_eq!(onehot[[0, 0, 0, 0]], 0.0);
        assert_eq!(onehot[[0, 1, 0, 0]], 0.0);
        // Uniform: -0.5*log2(0.5) = 0.5 per channel.
        let uni = self_information(&pixel(&[0.5, 0.5])).0;
        assert!((uni[[0, 0, 0, 0]] - 0.5).abs() < 1e-12);
        // p = 1/e is the global maximum log2(e)/e.
        let e = std::f64::consts::E;
        let at_max = self_information(&pixel(&[1.0 / e, 1.0 - 1.0 / e])).0;
        let bound = std::f64::consts::LOG2_E / e;
        assert!((at_max[[0, 0, 0, 0]] - bound).abs() < 1e-12);
        assert!((at_max[[0, 0, 0, 0]] - 0.53073).abs() < 1e-5);
    }

    #[test]
    fn self_information_never_exceeds_bound() {
        let bound = std::f64::consts::LOG2_E / std::f64::consts::E + 1e-9;
        for seed in 0..10u64 {
            let p = random_probs(seed, 2, 4, 5, 5);
            let info = self_information(&p).0;
            assert!(info.iter().all(|&v| v >= 0.0 && v <= bound));
        }
    }

    #[test]
    fn structural_examples() {
        let s = pixel(&[0.5, 0.5]);
        let t = pixel(&[1.0, 0.0]);
        assert_eq!(structural_consistency(&s, &s).unwrap(), 0.0);
        assert!((structural_consistency(&s, &t).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn structural_invariant_under_joint_channel_permutation() {
        let s = random_probs(1, 1, 3, 4, 4);
        let t = random_probs(2, 1, 3, 4, 4);
        let v = structural_consistency(&s, &t).unwrap();
        // Swap channels 0 and 2 in both maps.
        let perm = |p: &ProbMap<f64>| {
            let mut a = p.values().clone();
            let c0 = p.values().index_axis(Axis(1), 0).to_owned();
            let c2 = p.values().index_axis(Axis(1), 2).to_owned();
            a.index_axis_mut(Axis(1), 0).assign(&c2);
            a.index_axis_mut(Axis(1), 2).assign(&c0);
            ProbMap::new(a).unwrap()
        };
        let vp = structural_consistency(&perm(&s), &perm(&t)).unwrap();
        assert!((v - vp).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        // Perfect prediction: loss ~ 0 up to smoothing.
        let probs = pixel(&[0.0, 1.0]);
        let labels = arr3(&[[[1u8]]]);
        assert!(dice_loss(&probs, &labels).unwrap().abs() < 1e-4);

        // Uniform probs on a 2x2 image, target all class 1, C=2:
        // brute-force evaluation of the formula on this exact instance.
        let p = Array4::from_elem((1, 2, 2, 2), 0.5f64);
        let probs = ProbMap::new(p).unwrap();
        let labels = arr3(&[[[1u8, 1], [1, 1]]]);
        let s = DICE_SMOOTH;
        let bg = (2.0 * 0.0 + s) / (2.0 + 0.0 + s);
        let fg = (2.0 * 2.0 + s) / (2.0 + 4.0 + s);
        let expect = 1.0 - 0.5 * (bg + fg);
        assert!((dice_loss(&probs, &labels).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_decreases_along_interpolation_to_target() {
        // Scan 11 interpolation points from uniform to the one-hot target.
        let labels = arr3(&[[[1u8, 0], [1, 1]]]);
        let mut onehot = Array4::from_elem((1, 2, 2, 2), 0.0f64);
        for y in 0..2 {
            for x in 0..2 {
                onehot[[0, labels[[0, y, x]] as usize, y, x]] = 1.0;
            }
        }
        let uniform = Array4::from_elem((1, 2, 2, 2), 0.5f64);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let a = k as f64 / 10.0;
            let p = &uniform * (1.0 - a) + &onehot * a;
            let loss = dice_loss(&ProbMap::new(p).unwrap(), &labels).unwrap();
            assert!(loss < prev, "not monotone at step {k}");
            prev = loss;
        }
    }

    #[test]
    fn dice_rejects_out_of_range_labels() {
        let probs = random_probs(3, 1, 3, 2, 2);
        let labels = arr3(&[[[3u8, 0], [0, 0]]]);
        assert!(dice_loss(&probs, &labels).is_err());
        assert!(ce_loss(&probs, &labels).is_err());
    }

    #[test]
    fn ce_examples() {
        // One-hot correct prediction.
        let probs = pixel(&[0.0, 1.0]);
        let labels = arr3(&[[[1u8]]]);
        assert!(ce_loss(&probs, &labels).unwrap().abs() < 1e-12);
        // Uniform over 5 classes -> ln 5.
        let probs = ProbMap::new(Array4::from_elem((1, 5, 2, 2), 0.2f64)).unwrap();
        let labels = arr3(&[[[0u8, 1], [2, 3]]]);
        assert!((ce_loss(&probs, &labels).unwrap() - 5.0f64.ln()).abs() < 1e-12);
        // Correct-class probability 0.5 everywhere -> ln 2.
        let mut p = Array4::from_elem((1, 2, 2, 2), 0.5f64);
        p.fill(0.5);
        let probs = ProbMap::new(p).unwrap();
        let labels = arr3(&[[[0u8, 1], [0, 1]]]);
        assert!((ce_loss(&probs, &labels).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_is_half_sum_of_components() {
        let probs = random_probs(9, 2, 5, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let labels =
            Array3::from_shape_simple_fn((2, 4, 4), || rng.random_range(0..5u32) as u8);
        let ce = ce_loss(&probs, &labels).unwrap();
        let dice = dice_loss(&probs, &labels).unwrap();
        let sup = supervised_loss(&probs, &labels).unwrap();
        assert!((sup - 0.5 * (ce + dice)).abs() < 1e-12);
        // Perfect prediction -> ~0.
        let onehot = pixel(&[1.0, 0.0]);
        let l0 = arr3(&[[[0u8]]]);
        assert!(supervised_loss(&onehot, &l0).unwrap() < 1e-4);
    }

    #[test]
    fn student_total_arithmetic() {
        let w = LossWeights {
            lambda_kd: 0.0,
            lambda_con: 0.0,
        };
        assert_eq!(student_total(3.5, 9.0, 2.0, &w).unwrap(), 3.5);
        let w = LossWeights {
            lambda_kd: 0.01,
            lambda_con: 0.01,
        };
        assert!((student_total(1.0, 2.0, 3.0, &w).unwrap() - 1.05).abs() < 1e-12);
        let bad = LossWeights {
            lambda_kd: -0.1,
            lambda_con: 0.0,
        };
        assert!(student_total(1.0, 1.0, 1.0, &bad).is_err());
    }

    #[test]
    fn losses_nonnegative_and_finite_on_random_inputs() {
        for seed in 0..8u64 {
            let s = random_probs(seed, 2, 4, 3, 3);
            let t = random_probs(seed + 100, 2, 4, 3, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels =
                Array3::from_shape_simple_fn((2, 3, 3), || rng.random_range(0..4u32) as u8);
            for v in [
                mse_consistency(&s, &t).unwrap(),
                structural_consistency(&s, &t).unwrap(),
                dice_loss(&s, &labels).unwrap(),
                ce_loss(&s, &labels).unwrap(),
                supervised_loss(&s, &labels).unwrap(),
            ] {
                assert!(v.is_finite() && v >= 0.0);
            }
            assert_eq!(mse_consistency(&s, &s).unwrap(), 0.0);
            assert_eq!(structural_consistency(&s, &s).unwrap(), 0.0);
        }
    }
}
