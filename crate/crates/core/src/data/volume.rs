//! Real-volume ingestion: resample to unit spacing, crop around the heart
//! region, and emit normalized coronal slices.
//!
//! Volumes are stored as (z, y, x) scalar grids with per-axis spacing in mm.
//! Coronal slices are y-planes: one (z, x) image per y index. On-disk raw
//! volumes use a small `MTVL` header (dims, spacing, f32 data, optional u8
//! labels).

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 4] = b"MTVL";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VolumeMeta {
    /// Millimeters per voxel along (z, y, x).
    pub spacing: [f64; 3],
    /// Axis convention label, carried through for bookkeeping.
    pub orientation: String,
}

impl Default for VolumeMeta {
    fn default() -> Self {
        VolumeMeta {
            spacing: [1.0, 1.0, 1.0],
            orientation: "zyx".to_string(),
        }
    }
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation("volume spacing must be positive"));
        }
        Ok(())
    }
}

/// A preprocessed stack of coronal slices, each normalized to [-1, 1].
#[derive(Debug, Clone)]
pub struct SliceStack {
    pub slices: Vec<Array2<f32>>,
    pub labels: Option<Vec<Array2<u8>>>,
    /// True when the cropped window had to be padded with background.
    pub padded: bool,
}

fn trilinear_sample(v: &Array3<f32>, z: f64, y: f64, x: f64) -> f32 {
    let (d, h, w) = v.dim();
    let clampf = |val: f64, hi: usize| val.max(0.0).min((hi - 1) as f64);
    let (z, y, x) = (clampf(z, d), clampf(y, h), clampf(x, w));
    let (z0, y0, x0) = (z.floor() as usize, y.floor() as usize, x.floor() as usize);
    let (z1, y1, x1) = ((z0 + 1).min(d - 1), (y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fz, fy, fx) = (z - z0 as f64, y - y0 as f64, x - x0 as f64);
    let at = |a: usize, b: usize, c: usize| v[[a, b, c]] as f64;
    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

fn nearest_sample(v: &Array3<u8>, z: f64, y: f64, x: f64) -> u8 {
    let (d, h, w) = v.dim();
    let idx = |val: f64, hi: usize| (val.round().max(0.0) as usize).min(hi - 1);
    v[[idx(z, d), idx(y, h), idx(x, w)]]
}

fn resampled_dims(dims: (usize, usize, usize), spacing: &[f64; 3]) -> (usize, usize, usize) {
    let f = |n: usize, s: f64| ((n as f64 * s).round() as usize).max(1);
    (f(dims.0, spacing[0]), f(dims.1, spacing[1]), f(dims.2, spacing[2]))
}

/// Resample a scalar volume to unit spacing with trilinear interpolation.
pub fn resample_unit_spacing(volume: &Array3<f32>, meta: &VolumeMeta) -> Result<Array3<f32>> {
    meta.validate()?;
    let (nd, nh, nw) = resampled_dims(volume.dim(), &meta.spacing);
    let mut out = Array3::<f32>::zeros((nd, nh, nw));
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                out[[z, y, x]] = trilinear_sample(
                    volume,
                    z as f64 / meta.spacing[0],
                    y as f64 / meta.spacing[1],
                    x as f64 / meta.spacing[2],
                );
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor label resampling (preserves the class set).
pub fn resample_labels_unit_spacing(labels: &Array3<u8>, meta: &VolumeMeta) -> Result<Array3<u8>> {
    meta.validate()?;
    let (nd, nh, nw) = resampled_dims(labels.dim(), &meta.spacing);
    let mut out = Array3::<u8>::zeros((nd, nh, nw));
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                out[[z, y, x]] = nearest_sample(
                    labels,
                    z as f64 / meta.spacing[0],
                    y as f64 / meta.spacing[1],
                    x as f64 / meta.spacing[2],
                );
            }
        }
    }
    Ok(out)
}

fn foreground_centroid_labels(labels: &Array3<u8>) -> Option<(f64, f64, f64)> {
    let mut sum = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for ((z, y, x), &l) in labels.indexed_iter() {
        if l != 0 {
            sum.0 += z as f64;
            sum.1 += y as f64;
            sum.2 += x as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sum.0 / n as f64, sum.1 / n as f64, sum.2 / n as f64))
}

fn foreground_centroid_intensity(volume: &Array3<f32>) -> (f64, f64, f64) {
    let mean = volume.iter().map(|&v| v as f64).sum::<f64>() / volume.len() as f64;
    let mut sum = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for ((z, y, x), &v) in volume.indexed_iter() {
        if (v as f64) > mean {
            sum.0 += z as f64;
            sum.1 += y as f64;
            sum.2 += x as f64;
            n += 1;
        }
    }
    if n == 0 {
        let (d, h, w) = volume.dim();
        return (d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0);
    }
    (sum.0 / n as f64, sum.1 / n as f64, sum.2 / n as f64)
}

fn percentile(sorted: &[f32], q: f64) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

/// Full ingestion path: trilinear resample to unit spacing, crop a
/// `roi x roi` window in the (z, x) plane centered on the foreground
/// centroid, normalize by the 1st-99th percentile window to [-1, 1], and
/// emit one coronal slice per y index. Volumes smaller than the ROI are
/// padded with the background (minimum) value.
pub fn preprocess_volume(
    volume: &Array3<f32>,
    meta: &VolumeMeta,
    labels: Option<&Array3<u8>>,
    roi: usize,
) -> Result<SliceStack> {
    if roi == 0 {
        return Err(Error::validation("roi must be > 0"));
    }
    if let Some(l) = labels {
        if l.dim() != volume.dim() {
            return Err(Error::validation("labels shape differs from volume"));
        }
    }
    let vol = resample_unit_spacing(volume, meta)?;
    let labs = match labels {
        Some(l) => Some(resample_labels_unit_spacing(l, meta)?),
        None => None,
    };
    let (d, h, w) = vol.dim();

    let centroid = labs
        .as_ref()
        .and_then(foreground_centroid_labels)
        .unwrap_or_else(|| foreground_centroid_intensity(&vol));

    // Percentile-clipped min-max normalization, computed per volume.
    let mut sorted: Vec<f32> = vol.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite intensity"));
    let lo = percentile(&sorted, 0.01);
    let hi = percentile(&sorted, 0.99);
    let range = (hi - lo).max(f32::MIN_POSITIVE);
    let norm = |v: f32| (((v - lo) / range) * 2.0 - 1.0).clamp(-1.0, 1.0);

    // Crop window in (z, x), centered on the centroid. When the extent is
    // large enough the window is clamped fully inside; otherwise it hangs
    // over and the overhang is padded with the background value.
    let start = |c: f64, extent: usize| -> i64 {
        let raw = (c - roi as f64 / 2.0).round() as i64;
        if extent >= roi {
            raw.clamp(0, (extent - roi) as i64)
        } else {
            raw
        }
    };
    let z0 = start(centroid.0, d);
    let x0 = start(centroid.2, w);
    let padded = d < roi || w < roi;

    let mut slices = Vec::with_capacity(h);
    let mut label_slices = labs.as_ref().map(|_| Vec::with_capacity(h));
    for y in 0..h {
        let mut img = Array2::<f32>::from_elem((roi, roi), -1.0);
        let mut lab = labs.as_ref().map(|_| Array2::<u8>::zeros((roi, roi)));
        for iz in 0..roi {
            for ix in 0..roi {
                let z = z0 + iz as i64;
                let x = x0 + ix as i64;
                if z >= 0 && x >= 0 && (z as usize) < d && (x as usize) < w {
                    img[[iz, ix]] = norm(vol[[z as usize, y, x as usize]]);
                    if let (Some(lab), Some(labs)) = (lab.as_mut(), labs.as_ref()) {
                        lab[[iz, ix]] = labs[[z as usize, y, x as usize]];
                    }
                }
            }
        }
        slices.push(img);
        if let (Some(ls), Some(lab)) = (label_slices.as_mut(), lab) {
            ls.push(lab);
        }
    }
    Ok(SliceStack {
        slices,
        labels: label_slices,
        padded,
    })
}

/// Raw volume file: `MTVL` magic, u8 has_labels, dims, spacing, f32 data,
/// optional u8 labels. All little-endian.
pub fn save_volume(
    path: &Path,
    volume: &Array3<f32>,
    labels: Option<&Array3<u8>>,
    meta: &VolumeMeta,
) -> Result<()> {
    meta.validate()?;
    let (d, h, w) = volume.dim();
    let mut buf = Vec::new();
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.push(u8::from(labels.is_some()));
    buf.extend_from_slice(&[0u8; 3]);
    for n in [d, h, w] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in meta.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for v in volume.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        if l.dim() != volume.dim() {
            return Err(Error::validation("labels shape differs from volume"));
        }
        buf.extend(l.iter().copied());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<(Array3<f32>, Option<Array3<u8>>, VolumeMeta)> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open volume {}: {e}", path.display())))?;
    let mut head = [0u8; 20];
    f.read_exact(&mut head)?;
    if &head[0..4] != VOLUME_MAGIC {
        return Err(Error::config(format!("{}: bad volume magic", path.display())));
    }
    let has_labels = head[4] != 0;
    let d = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let h = u32::from_le_bytes([head[12], head[13], head[14], head[15]]) as usize;
    let w = u32::from_le_bytes([head[16], head[17], head[18], head[19]]) as usize;
    let mut spacing = [0.0f64; 3];
    let mut sbuf = [0u8; 24];
    f.read_exact(&mut sbuf)?;
    for (i, chunk) in sbuf.chunks_exact(8).enumerate() {
        spacing[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    let mut data = vec![0u8; 4 * d * h * w];
    f.read_exact(&mut data)?;
    let vol = Array3::from_shape_vec(
        (d, h, w),
        data.chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    )
    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let labels = if has_labels {
        let mut lab = vec![0u8; d * h * w];
        f.read_exact(&mut lab)?;
        Some(
            Array3::from_shape_vec((d, h, w), lab)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        )
    } else {
        None
    };
    Ok((
        vol,
        labels,
        VolumeMeta {
            spacing,
            orientation: "zyx".to_string(),
        },
    ))
}
