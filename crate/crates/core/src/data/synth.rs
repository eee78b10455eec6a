//! Synthetic two-modality benchmark: randomized nested/adjacent ellipse
//! anatomies rendered under two appearance mappings with an inverted
//! contrast ordering between them.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng::stream;

/// Class ids: 0 background, 1 AA-proxy blob, 2 LVC-proxy inner blob,
/// 3 LAC-proxy blob, 4 MYO-proxy annulus enclosing class 2.
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "AA", "LVC", "LAC", "MYO"];

pub const CLASS_BG: u8 = 0;
pub const CLASS_AA: u8 = 1;
pub const CLASS_LVC: u8 = 2;
pub const CLASS_LAC: u8 = 3;
pub const CLASS_MYO: u8 = 4;

/// Appearance mapping for one modality.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Appearance {
    /// Mean intensity per class in [0, 1], indexed by class id.
    pub tissue_means: [f32; NUM_CLASSES],
    /// Flip the contrast ordering (mean -> 1 - mean).
    pub invert: bool,
    /// Additive Gaussian noise std in [0, 1] intensity units.
    pub noise_std: f32,
    /// Amplitude of the smooth multiplicative-free additive bias field.
    pub bias_strength: f32,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            tissue_means: [0.10, 0.85, 0.65, 0.45, 0.25],
            invert: false,
            noise_std: 0.03,
            bias_strength: 0.10,
        }
    }
}

impl Appearance {
    pub fn validate(&self) -> Result<()> {
        if self.tissue_means.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::validation("tissue means must lie in [0, 1]"));
        }
        if self.noise_std < 0.0 || self.bias_strength < 0.0 {
            return Err(Error::validation("noise/bias strengths must be >= 0"));
        }
        Ok(())
    }

    fn mean_for(&self, class: u8) -> f32 {
        let m = self.tissue_means[class as usize];
        if self.invert {
            1.0 - m
        } else {
            m
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, rx: f64, ry: f64, theta: f64) -> Self {
        Ellipse {
            cx,
            cy,
            rx,
            ry,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn fill(labels: &mut Array2<u8>, e: &Ellipse, class: u8) {
    let (h, w) = labels.dim();
    for y in 0..h {
        for x in 0..w {
            if e.contains(x as f64, y as f64) {
                labels[[y, x]] = class;
            }
        }
    }
}

/// Draws one randomized anatomy: a MYO annulus enclosing an LVC blob plus
/// two separate AA/LAC blobs. Deterministic per seed; every class is present
/// by construction.
pub fn synth_anatomy(seed: u64, size: usize) -> Array2<u8> {
    let mut rng: ChaCha8Rng = stream(seed, "anatomy", 0);
    let s = size as f64;
    let mut labels = Array2::<u8>::zeros((size, size));

    // Annulus (MYO) around an inner blob (LVC), centered with jitter.
    let cx = s * rng.random_range(0.44..0.56);
    let cy = s * rng.random_range(0.44..0.56);
    let rx = s * rng.random_range(0.20..0.28);
    let ry = s * rng.random_range(0.20..0.28);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let inner_scale = rng.random_range(0.58..0.72);
    let outer = Ellipse::new(cx, cy, rx, ry, theta);
    let inner = Ellipse::new(cx, cy, rx * inner_scale, ry * inner_scale, theta);
    fill(&mut labels, &outer, CLASS_MYO);
    fill(&mut labels, &inner, CLASS_LVC);

    // Two separate blobs, kept clear of the annulus by rejection sampling.
    let r_max = rx.max(ry);
    let mut place_blob = |xr: std::ops::Range<f64>, class: u8, rng: &mut ChaCha8Rng| {
        let mut rb = s * rng.random_range(0.055..0.095);
        for attempt in 0..32 {
            let bx = s * rng.random_range(xr.clone());
            let by = s * rng.random_range(0.10..0.30);
            let dist = ((bx - cx).powi(2) + (by - cy).powi(2)).sqrt();
            if dist > r_max + rb + 2.0 {
                let e = Ellipse::new(bx, by, rb, rb * rng.random_range(0.8..1.2), 0.0);
                fill(&mut labels, &e, class);
                return;
            }
            if attempt % 8 == 7 {
                rb *= 0.85; // shrink if the layout is tight
            }
        }
        // Fall back to a fixed corner placement that cannot collide.
        let e = Ellipse::new(s * (xr.start + 0.02), s * 0.10, rb.min(s * 0.06), rb.min(s * 0.06), 0.0);
        fill(&mut labels, &e, class);
    };
    place_blob(0.10..0.24, CLASS_AA, &mut rng);
    place_blob(0.76..0.90, CLASS_LAC, &mut rng);

    labels
}

/// Renders a label map under one modality's appearance: per-class mean
/// intensity, a smooth additive bias field, Gaussian noise, then a fixed
/// linear map onto [-1, 1] (clamped).
pub fn render_modality(
    labels: &Array2<u8>,
    app: &Appearance,
    seed: u64,
) -> Result<Array2<f32>> {
    app.validate()?;
    let (h, w) = labels.dim();
    let mut rng: ChaCha8Rng = stream(seed, "render", 0);

    // Low-frequency bias field: two random-phase sinusoids.
    let (fx, fy) = (
        rng.random_range(0.5..1.5) / w as f64,
        rng.random_range(0.5..1.5) / h as f64,
    );
    let (px, py) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let noise = rand_distr::Normal::new(0.0f32, app.noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::validation(format!("render noise: {e}")))?;

    let mut img = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut v = app.mean_for(labels[[y, x]]);
            if app.bias_strength > 0.0 {
                let b = (std::f64::consts::TAU * (fx * x as f64) + px).sin()
                    * (std::f64::consts::TAU * (fy * y as f64) + py).sin();
                v += app.bias_strength * b as f32;
            }
            if app.noise_std > 0.0 {
                v += rand_distr::Distribution::sample(&noise, &mut rng);
            }
            img[[y, x]] = (v * 2.0 - 1.0).clamp(-1.0, 1.0);
        }
    }
    Ok(img)
}
