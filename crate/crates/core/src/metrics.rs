//! Evaluation: per-class Dice and average surface distance over restacked
//! 3D volumes, with largest-connected-component postprocessing of the
//! predictions.
//!
//! Components use 26-connectivity; boundary voxels are foreground voxels
//! with at least one six-connected in-bounds background neighbor. ASD is the
//! symmetric average of the two directed mean boundary distances, in voxel
//! units. Degenerate (empty) masks report a configurable sentinel and are
//! flagged.

use std::collections::BTreeMap;

use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, CLASS_NAMES};
use crate::dcam::DcamState;
use crate::error::{Error, Result};
use crate::networks::{DomainTag, ImageBatch, SegNetSpec};
use crate::params::ParamSet;
use crate::trainer::infer_target;

pub const DEFAULT_ASD_CAP: f64 = 100.0;

/// Keeps only the largest 26-connected component; ties go to the component
/// discovered first in raster order. An empty mask stays empty.
pub fn largest_component(mask: &Array3<bool>) -> Array3<bool> {
    let (d, h, w) = mask.dim();
    let mut labels = Array3::<u32>::zeros((d, h, w));
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 0u32;
    let mut queue: Vec<(usize, usize, usize)> = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] || labels[[z, y, x]] != 0 {
                    continue;
                }
                next += 1;
                let mut size = 0usize;
                labels[[z, y, x]] = next;
                queue.push((z, y, x));
                while let Some((cz, cy, cx)) = queue.pop() {
                    size += 1;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                if dz == 0 && dy == 0 && dx == 0 {
                                    continue;
                                }
                                let (nz, ny, nx) =
                                    (cz as i64 + dz, cy as i64 + dy, cx as i64 + dx);
                                if nz < 0 || ny < 0 || nx < 0 {
                                    continue;
                                }
                                let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                                if nz >= d || ny >= h || nx >= w {
                                    continue;
                                }
                                if mask[[nz, ny, nx]] && labels[[nz, ny, nx]] == 0 {
                                    labels[[nz, ny, nx]] = next;
                                    queue.push((nz, ny, nx));
                                }
                            }
                        }
                    }
                }
                if size > best_size {
                    best_size = size;
                    best_label = next;
                }
            }
        }
    }
    let mut out = Array3::<bool>::from_elem((d, h, w), false);
    if best_label != 0 {
        ndarray::Zip::from(&mut out).and(&labels).for_each(|o, &l| {
            *o = l == best_label;
        });
    }
    out
}

/// Overlap Dice `2|A n B| / (|A| + |B|)`; both empty counts as 1, exactly
/// one empty as 0.
pub fn dice_score(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::validation("dice_score: shape mismatch"));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    ndarray::Zip::from(pred).and(gt).for_each(|&p, &g| {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    });
    if a == 0 && b == 0 {
        return Ok(1.0);
    }
    if a == 0 || b == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Foreground voxels with at least one six-connected in-bounds background
/// neighbor.
pub fn boundary_voxels(mask: &Array3<bool>) -> Vec<[f64; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] {
                    continue;
                }
                let neighbors: [(i64, i64, i64); 6] = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ];
                let is_boundary = neighbors.iter().any(|&(dz, dy, dx)| {
                    let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                    nz >= 0
                        && ny >= 0
                        && nx >= 0
                        && (nz as usize) < d
                        && (ny as usize) < h
                        && (nx as usize) < w
                        && !mask[[nz as usize, ny as usize, nx as usize]]
                });
                if is_boundary {
                    out.push([z as f64, y as f64, x as f64]);
                }
            }
        }
    }
    out
}

fn directed_mean_distance(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut total = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            if d2 < best {
                best = d2;
            }
        }
        total += best.sqrt();
    }
    total / from.len() as f64
}

/// Symmetric average surface distance in voxel units: the mean of the two
/// directed average boundary distances. Empty pred or gt reports the
/// sentinel cap instead (the degenerate-prediction case).
pub fn asd(pred: &Array3<bool>, gt: &Array3<bool>, cap: f64) -> Result<(f64, bool)> {
    if pred.dim() != gt.dim() {
        return Err(Error::validation("asd: shape mismatch"));
    }
    let pred_empty = !pred.iter().any(|&v| v);
    let gt_empty = !gt.iter().any(|&v| v);
    if pred_empty || gt_empty {
        return Ok((cap, true));
    }
    let ba = boundary_voxels(pred);
    let bb = boundary_voxels(gt);
    if ba.is_empty() && bb.is_empty() {
        return Ok((0.0, false)); // both masks fill the whole volume
    }
    if ba.is_empty() || bb.is_empty() {
        return Ok((cap, true));
    }
    let d_ab = directed_mean_distance(&ba, &bb);
    let d_ba = directed_mean_distance(&bb, &ba);
    Ok((0.5 * (d_ab + d_ba), false))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub dice: f64,
    pub asd: f64,
    /// Number of volume evaluations that hit the degenerate-mask sentinel.
    pub flagged: usize,
}

/// Per-class metrics averaged over test volumes, plus the foreground means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_volumes: usize,
    pub per_class: Vec<ClassReport>,
    pub mean_foreground_dice: f64,
    pub mean_foreground_asd: f64,
}

impl EvalReport {
    /// Recomputes the averages from the per-class values; they must agree
    /// exactly with the stored means.
    pub fn consistent(&self) -> bool {
        let n = self.per_class.len() as f64;
        if self.per_class.is_empty() {
            return self.mean_foreground_dice == 0.0;
        }
        let dice: f64 = self.per_class.iter().map(|c| c.dice).sum::<f64>() / n;
        let asd: f64 = self.per_class.iter().map(|c| c.asd).sum::<f64>() / n;
        dice == self.mean_foreground_dice && asd == self.mean_foreground_asd
    }
}

fn restack_volume(samples: &[&Sample]) -> (Array3<f32>, Option<Array3<u8>>) {
    let (h, w) = samples[0].image.dim();
    let mut vol = Array3::<f32>::zeros((samples.len(), h, w));
    let has_labels = samples.iter().all(|s| s.label.is_some());
    let mut gt = has_labels.then(|| Array3::<u8>::zeros((samples.len(), h, w)));
    for (k, smp) in samples.iter().enumerate() {
        vol.slice_mut(s![k, .., ..]).assign(&smp.image);
        if let (Some(gt), Some(l)) = (gt.as_mut(), smp.label.as_ref()) {
            gt.slice_mut(s![k, .., ..]).assign(l);
        }
    }
    (vol, gt)
}

/// Evaluates a student on the labeled target test set: infer slice-wise
/// (translating through the frozen generator when `dcam` is given), restack
/// per volume, keep each class's largest 3D component, then average Dice and
/// ASD per class over volumes. Volumes evaluate in parallel with a
/// deterministic report order.
pub fn evaluate(
    spec: &SegNetSpec,
    student: &ParamSet,
    dcam: Option<&DcamState>,
    ds: &Dataset,
    asd_cap: f64,
) -> Result<EvalReport> {
    let test = ds.target_test();
    if test.is_empty() {
        return Err(Error::validation("evaluate: empty target test set"));
    }
    if test.iter().any(|s| s.label.is_none()) {
        return Err(Error::validation("evaluate: test samples must carry labels"));
    }
    let mut volumes: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    for smp in test {
        volumes.entry(smp.volume.clone()).or_default().push(smp);
    }
    for slices in volumes.values_mut() {
        slices.sort_by_key(|s| s.slice);
    }

    let num_classes = ds.num_classes;
    let job = |slices: &Vec<&Sample>| -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
        let (vol, gt) = restack_volume(slices);
        let gt = gt.expect("checked above");
        let (depth, h, w) = vol.dim();
        let mut x = Array4::<f32>::zeros((depth, 1, h, w));
        for k in 0..depth {
            x.slice_mut(s![k, 0, .., ..]).assign(&vol.index_axis(ndarray::Axis(0), k));
        }
        let pred = infer_target(spec, student, dcam, &ImageBatch::new(x, DomainTag::Target))?;
        let mut dices = Vec::with_capacity(num_classes - 1);
        let mut asds = Vec::with_capacity(num_classes - 1);
        let mut flags = Vec::with_capacity(num_classes - 1);
        for class in 1..num_classes {
            let pred_mask = pred.mapv(|v| v as usize == class);
            let pred_mask = largest_component(&pred_mask);
            let gt_mask = gt.mapv(|v| v as usize == class);
            dices.push(dice_score(&pred_mask, &gt_mask)?);
            let (a, flagged) = asd(&pred_mask, &gt_mask, asd_cap)?;
            asds.push(a);
            flags.push(flagged);
        }
        Ok((dices, asds, flags))
    };

    let vols: Vec<&Vec<&Sample>> = volumes.values().collect();
    let pool = crate::util::worker_pool()?;
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            vols.par_iter().map(|v| job(v)).collect::<Result<Vec<_>>>()
        })?,
        None => vols.iter().map(|v| job(v)).collect::<Result<Vec<_>>>()?,
    };

    let n_vol = results.len();
    let mut per_class = Vec::with_capacity(num_classes - 1);
    for ci in 0..num_classes - 1 {
        let dice = results.iter().map(|r| r.0[ci]).sum::<f64>() / n_vol as f64;
        let asd = results.iter().map(|r| r.1[ci]).sum::<f64>() / n_vol as f64;
        let flagged = results.iter().filter(|r| r.2[ci]).count();
        per_class.push(ClassReport {
            class: CLASS_NAMES[ci + 1].to_string(),
            dice,
            asd,
            flagged,
        });
    }
    let nf = per_class.len() as f64;
    let mean_foreground_dice = per_class.iter().map(|c| c.dice).sum::<f64>() / nf;
    let mean_foreground_asd = per_class.iter().map(|c| c.asd).sum::<f64>() / nf;
    Ok(EvalReport {
        num_volumes: n_vol,
        per_class,
        mean_foreground_dice,
        mean_foreground_asd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(coords: &[(usize, usize, usize)], dim: (usize, usize, usize)) -> Array3<bool> {
        let mut m = Array3::<bool>::from_elem(dim, false);
        for &(z, y, x) in coords {
            m[[z, y, x]] = true;
        }
        m
    }

    #[test]
    fn largest_component_examples() {
        // Single component is unchanged.
        let single = mask_from(&[(0, 0, 0), (0, 0, 1), (0, 1, 1)], (2, 3, 3));
        assert_eq!(largest_component(&single), single);
        // Two components of sizes 5 and 3: only the 5-voxel one remains.
        let five: Vec<_> = (0..5).map(|i| (0usize, 0usize, i)).collect();
        let three: Vec<_> = (0..3).map(|i| (4usize, 4usize, i)).collect();
        let mut all = five.clone();
        all.extend(three.iter().copied());
        let mask = mask_from(&all, (5, 5, 5));
        let keep = largest_component(&mask);
        assert_eq!(keep.iter().filter(|&&v| v).count(), 5);
        assert_eq!(keep, mask_from(&five, (5, 5, 5)));
        // Empty stays empty.
        let empty = Array3::<bool>::from_elem((3, 3, 3), false);
        assert_eq!(largest_component(&empty), empty);
        // Diagonal voxels are 26-connected.
        let diag = mask_from(&[(0, 0, 0), (1, 1, 1)], (2, 2, 2));
        assert_eq!(largest_component(&diag).iter().filter(|&&v| v).count(), 2);
    }

    #[test]
    fn dice_examples() {
        let a = mask_from(&[(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)], (1, 4, 4));
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let disjoint = mask_from(&[(0, 3, 3)], (1, 4, 4));
        assert_eq!(dice_score(&a, &disjoint).unwrap(), 0.0);
        // |A| = 4, |B| = 4, overlap 2 -> 0.5.
        let b = mask_from(&[(0, 0, 0), (0, 0, 1), (0, 2, 2), (0, 2, 3)], (1, 4, 4));
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        // Symmetry and the empty conventions.
        assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        let empty = Array3::<bool>::from_elem((1, 4, 4), false);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn asd_examples() {
        let a = mask_from(&[(2, 2, 2)], (6, 6, 6));
        assert_eq!(asd(&a, &a, 100.0).unwrap(), (0.0, false));
        // Two single voxels three steps apart on one axis.
        let b = mask_from(&[(2, 2, 5)], (6, 6, 6));
        let (v, flagged) = asd(&a, &b, 100.0).unwrap();
        assert!(!flagged);
        assert!((v - 3.0).abs() < 1e-12);
        // Translation invariance away from borders.
        let a2 = mask_from(&[(3, 3, 2)], (8, 8, 8));
        let b2 = mask_from(&[(3, 3, 5)], (8, 8, 8));
        let (v2, _) = asd(&a2, &b2, 100.0).unwrap();
        assert!((v - v2).abs() < 1e-12);
        // Degenerate masks hit the sentinel and the flag.
        let empty = Array3::<bool>::from_elem((6, 6, 6), false);
        assert_eq!(asd(&a, &empty, 100.0).unwrap(), (100.0, true));
        assert_eq!(asd(&empty, &a, 50.0).unwrap(), (50.0, true));
    }

    #[test]
    fn asd_symmetric_and_nonnegative() {
        let a = mask_from(&[(1, 1, 1), (1, 1, 2), (1, 2, 1)], (4, 4, 4));
        let b = mask_from(&[(2, 2, 2), (2, 2, 3)], (4, 4, 4));
        let (ab, _) = asd(&a, &b, 100.0).unwrap();
        let (ba, _) = asd(&b, &a, 100.0).unwrap();
        assert!(ab >= 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn boundary_extraction_six_connected() {
        // A solid 3x3x3 cube has 26 boundary voxels (all but the center).
        let mut cube = Array3::<bool>::from_elem((5, 5, 5), false);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    cube[[z, y, x]] = true;
                }
            }
        }
        assert_eq!(boundary_voxels(&cube).len(), 26);
    }

    #[test]
    fn evaluate_perfect_and_degenerate() {
        use crate::data::{make_dataset, SynthConfig};
        use crate::networks::SegNet;

        let ds = make_dataset(&SynthConfig {
            image_size: 16,
            source_count: 2,
            target_count: 2,
            target_test_count: 3,
            label_fraction: 1.0,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let spec = SegNetSpec {
            in_channels: 1,
            num_classes: 5,
            base_width: 4,
            depth: 2,
        };
        let student = SegNet::new(spec).unwrap().init_params(0).unwrap();
        let report = evaluate(&spec, &student, None, &ds, DEFAULT_ASD_CAP).unwrap();
        assert_eq!(report.num_volumes, 3);
        assert_eq!(report.per_class.len(), 4);
        assert!(report.consistent());
        assert!(report.per_class.iter().all(|c| (0.0..=1.0).contains(&c.dice)));
        assert!(report.per_class.iter().all(|c| c.asd >= 0.0));
    }
}
