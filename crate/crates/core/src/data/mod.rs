//! Datasets: the synthetic two-modality benchmark, the on-disk dataset
//! container, and the real-volume ingestion path.
//!
//! Container layout: a directory holding `manifest.json` (sample ids, domain,
//! labeled flag, split, volume grouping) and one binary record per sample
//! under `records/` (shape header, little-endian float32 image, optional u8
//! labels). Round-trips are bit-exact.

pub mod synth;
pub mod volume;

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::DomainTag;
use crate::nn::rng::{permutation, stream};

pub use synth::{render_modality, synth_anatomy, Appearance, CLASS_NAMES, NUM_CLASSES};
pub use volume::{preprocess_volume, VolumeMeta};

const RECORD_MAGIC: &[u8; 4] = b"MTR1";

/// The two synthetic modalities. A plays the source role, B the target role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn tag(self) -> DomainTag {
        match self {
            Modality::A => DomainTag::Source,
            Modality::B => DomainTag::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One 2D slice with its bookkeeping. `label` is present only when the
/// sample is visible as labeled (training supervision or held-out test).
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub domain: DomainTag,
    pub split: Split,
    pub labeled: bool,
    pub volume: String,
    pub slice: usize,
    pub image: Array2<f32>,
    pub label: Option<Array2<u8>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn select(&self, f: impl Fn(&Sample) -> bool) -> Vec<&Sample> {
        self.samples.iter().filter(|s| f(s)).collect()
    }

    /// Labeled source training samples (the D_s^l pool).
    pub fn labeled_source(&self) -> Vec<&Sample> {
        self.select(|s| s.domain == DomainTag::Source && s.split == Split::Train && s.labeled)
    }

    /// Unlabeled source training samples (the D_s^u pool).
    pub fn unlabeled_source(&self) -> Vec<&Sample> {
        self.select(|s| s.domain == DomainTag::Source && s.split == Split::Train && !s.labeled)
    }

    /// Target training samples (the D_t pool, labels withheld).
    pub fn target_train(&self) -> Vec<&Sample> {
        self.select(|s| s.domain == DomainTag::Target && s.split == Split::Train)
    }

    /// Held-out labeled target test samples.
    pub fn target_test(&self) -> Vec<&Sample> {
        self.select(|s| s.domain == DomainTag::Target && s.split == Split::Test)
    }
}

/// Configuration of the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Total source samples M.
    pub source_count: usize,
    /// Target training samples P.
    pub target_count: usize,
    /// Held-out labeled target test samples.
    pub target_test_count: usize,
    /// Label fraction N/M applied to the source by seeded selection.
    pub label_fraction: f64,
    pub appearance_a: Appearance,
    pub appearance_b: Appearance,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_classes: NUM_CLASSES,
            source_count: 40,
            target_count: 40,
            target_test_count: 10,
            label_fraction: 0.25,
            appearance_a: Appearance::default(),
            appearance_b: Appearance {
                invert: true,
                ..Appearance::default()
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::validation(format!(
                "synthetic benchmark is defined for {NUM_CLASSES} classes"
            )));
        }
        if self.image_size < 16 {
            return Err(Error::validation("image_size must be >= 16"));
        }
        if self.source_count == 0 || self.target_count == 0 || self.target_test_count == 0 {
            return Err(Error::validation("sample counts must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::validation("label_fraction must lie in [0, 1]"));
        }
        self.appearance_a.validate()?;
        self.appearance_b.validate()
    }

    /// N = round(label_fraction * M).
    pub fn labeled_count(&self) -> usize {
        (self.label_fraction * self.source_count as f64).round() as usize
    }
}

/// Generates the benchmark: N labeled source, M - N unlabeled source, P
/// unlabeled target training samples, and a labeled target test set. The two
/// domains draw independent anatomies (unpaired by construction).
pub fn make_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n_labeled = cfg.labeled_count();
    // Seeded selection of which source samples keep their labels.
    let order = permutation(cfg.seed, "label-select", 0, cfg.source_count);
    let labeled_set: BTreeSet<usize> = order.into_iter().take(n_labeled).collect();

    let mut samples = Vec::new();
    for i in 0..cfg.source_count {
        let seed = stream(cfg.seed, "anatomy-seed-src", i as u64).next_u64();
        let anatomy = synth_anatomy(seed, cfg.image_size);
        let image = render_modality(&anatomy, &cfg.appearance_a, seed ^ 0x5a5a)?;
        let labeled = labeled_set.contains(&i);
        samples.push(Sample {
            id: format!("src_{i:04}"),
            domain: DomainTag::Source,
            split: Split::Train,
            labeled,
            volume: format!("src_{i:04}"),
            slice: 0,
            image,
            label: labeled.then_some(anatomy),
        });
    }
    for i in 0..cfg.target_count {
        let seed = stream(cfg.seed, "anatomy-seed-tgt", i as u64).next_u64();
        let anatomy = synth_anatomy(seed, cfg.image_size);
        let image = render_modality(&anatomy, &cfg.appearance_b, seed ^ 0xa5a5)?;
        samples.push(Sample {
            id: format!("tgt_{i:04}"),
            domain: DomainTag::Target,
            split: Split::Train,
            labeled: false,
            volume: format!("tgt_{i:04}"),
            slice: 0,
            image,
            label: None, // withheld from every training stream
        });
    }
    for i in 0..cfg.target_test_count {
        let seed = stream(cfg.seed, "anatomy-seed-test", i as u64).next_u64();
        let anatomy = synth_anatomy(seed, cfg.image_size);
        let image = render_modality(&anatomy, &cfg.appearance_b, seed ^ 0x3c3c)?;
        samples.push(Sample {
            id: format!("test_{i:04}"),
            domain: DomainTag::Target,
            split: Split::Test,
            labeled: true,
            volume: format!("test_{i:04}"),
            slice: 0,
            image,
            label: Some(anatomy),
        });
    }
    Ok(Dataset {
        num_classes: cfg.num_classes,
        samples,
    })
}

trait NextU64 {
    fn next_u64(&mut self) -> u64;
}

impl NextU64 for rand_chacha::ChaCha8Rng {
    fn next_u64(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    domain: DomainTag,
    split: Split,
    labeled: bool,
    volume: String,
    slice: usize,
    record: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    num_classes: usize,
    samples: Vec<ManifestSample>,
}

fn write_record(path: &Path, image: &Array2<f32>, label: Option<&Array2<u8>>) -> Result<()> {
    let (h, w) = image.dim();
    if let Some(l) = label {
        if l.dim() != (h, w) {
            return Err(Error::validation("record: label shape differs from image"));
        }
    }
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(RECORD_MAGIC);
    buf.push(u8::from(label.is_some()));
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&(1u32).to_le_bytes()); // channels
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in image.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = label {
        buf.extend(l.iter().copied());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_record(path: &Path) -> Result<(Array2<f32>, Option<Array2<u8>>)> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 20];
    f.read_exact(&mut head)?;
    if &head[0..4] != RECORD_MAGIC {
        return Err(Error::config(format!("{}: bad record magic", path.display())));
    }
    let has_labels = head[4] != 0;
    let c = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let h = u32::from_le_bytes([head[12], head[13], head[14], head[15]]) as usize;
    let w = u32::from_le_bytes([head[16], head[17], head[18], head[19]]) as usize;
    if c != 1 {
        return Err(Error::config(format!("{}: expected 1 channel", path.display())));
    }
    let mut img_bytes = vec![0u8; 4 * h * w];
    f.read_exact(&mut img_bytes)?;
    let data: Vec<f32> = img_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let image = Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let label = if has_labels {
        let mut lab = vec![0u8; h * w];
        f.read_exact(&mut lab)?;
        Some(
            Array2::from_shape_vec((h, w), lab)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        )
    } else {
        None
    };
    Ok((image, label))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let records = dir.join("records");
    fs::create_dir_all(&records)?;
    let mut manifest = DatasetManifest {
        version: 1,
        num_classes: ds.num_classes,
        samples: Vec::with_capacity(ds.samples.len()),
    };
    for s in &ds.samples {
        let rel = format!("records/{}.bin", s.id);
        write_record(&dir.join(&rel), &s.image, s.label.as_ref())?;
        manifest.samples.push(ManifestSample {
            id: s.id.clone(),
            domain: s.domain,
            split: s.split,
            labeled: s.labeled,
            volume: s.volume.clone(),
            slice: s.slice,
            record: rel,
        });
    }
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != 1 {
        return Err(Error::config(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for m in manifest.samples {
        let (image, label) = read_record(&dir.join(&m.record))?;
        if m.labeled != label.is_some() {
            return Err(Error::config(format!(
                "sample {}: labeled flag disagrees with record payload",
                m.id
            )));
        }
        samples.push(Sample {
            id: m.id,
            domain: m.domain,
            split: m.split,
            labeled: m.labeled,
            volume: m.volume,
            slice: m.slice,
            image,
            label,
        });
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 32,
            source_count: 8,
            target_count: 6,
            target_test_count: 3,
            label_fraction: 0.25,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_counts_and_label_visibility() {
        let cfg = tiny_cfg();
        let ds = make_dataset(&cfg).unwrap();
        assert_eq!(ds.labeled_source().len(), 2); // round(0.25 * 8)
        assert_eq!(ds.unlabeled_source().len(), 6);
        assert_eq!(ds.target_train().len(), 6);
        assert_eq!(ds.target_test().len(), 3);
        // Target training stream exposes no labels.
        assert!(ds.target_train().iter().all(|s| s.label.is_none()));
        // Held-out test set keeps labels for evaluation.
        assert!(ds.target_test().iter().all(|s| s.label.is_some()));
        // Train/test target ids are disjoint.
        let train_ids: BTreeSet<_> = ds.target_train().iter().map(|s| s.id.clone()).collect();
        assert!(ds.target_test().iter().all(|s| !train_ids.contains(&s.id)));
    }

    #[test]
    fn generation_is_pure_in_config_and_seed() {
        let cfg = tiny_cfg();
        let a = make_dataset(&cfg).unwrap();
        let b = make_dataset(&cfg).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.id, y.id);
            assert!(x
                .image
                .iter()
                .zip(y.image.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let c = make_dataset(&SynthConfig {
            seed: 6,
            ..tiny_cfg()
        })
        .unwrap();
        assert!(a.samples[0]
            .image
            .iter()
            .zip(c.samples[0].image.iter())
            .any(|(x, y)| x.to_bits() != y.to_bits()));
    }

    #[test]
    fn n_equals_m_still_leaves_unlabeled_empty_but_valid() {
        let cfg = SynthConfig {
            label_fraction: 1.0,
            ..tiny_cfg()
        };
        let ds = make_dataset(&cfg).unwrap();
        assert_eq!(ds.labeled_source().len(), 8);
        assert!(ds.unlabeled_source().is_empty());
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("mtuda_ds_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        let ds = make_dataset(&tiny_cfg()).unwrap();
        save_dataset(&ds, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();

        // Reserializing the loaded dataset reproduces every byte.
        let dir2 = std::env::temp_dir().join("mtuda_ds_roundtrip2");
        let _ = fs::remove_dir_all(&dir2);
        save_dataset(&back, &dir2).unwrap();
        assert_eq!(
            fs::read(dir.join("manifest.json")).unwrap(),
            fs::read(dir2.join("manifest.json")).unwrap()
        );
        for s in &ds.samples {
            let rel = format!("records/{}.bin", s.id);
            assert_eq!(
                fs::read(dir.join(&rel)).unwrap(),
                fs::read(dir2.join(&rel)).unwrap(),
                "record {rel} differs"
            );
        }
    }

    #[test]
    fn rendering_never_alters_labels() {
        // The mask attached to a rendered labeled sample equals the anatomy
        // that generated it.
        let cfg = tiny_cfg();
        let ds = make_dataset(&cfg).unwrap();
        for s in ds.labeled_source() {
            let lbl = s.label.as_ref().unwrap();
            assert_eq!(lbl.dim(), s.image.dim());
            assert!(lbl.iter().all(|&l| (l as usize) < cfg.num_classes));
        }
    }
}
