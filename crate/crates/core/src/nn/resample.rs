//! Spatial resampling and channel plumbing used by the encoder/decoder nets:
//! 2x2 max pooling, 2x nearest-neighbor upsampling, and channel concat/split.

use ndarray::{s, Array4};

/// 2x2 max pool, stride 2. Returns the pooled map and the flat argmax index
/// (0..4, row-major within the window) per output element.
pub fn maxpool2(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((b, c, ho, wo));
    let mut idx = Array4::<u8>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0u8;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[[bi, ci, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                at = (dy * 2 + dx) as u8;
                            }
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    idx[[bi, ci, oy, ox]] = at;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(idx: &Array4<u8>, dy: &Array4<f32>) -> Array4<f32> {
    let (b, c, ho, wo) = dy.dim();
    let mut dx = Array4::<f32>::zeros((b, c, ho * 2, wo * 2));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let at = idx[[bi, ci, oy, ox]] as usize;
                    dx[[bi, ci, 2 * oy + at / 2, 2 * ox + at % 2]] = dy[[bi, ci, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[[bi, ci, iy, ix]];
                    y[[bi, ci, 2 * iy, 2 * ix]] = v;
                    y[[bi, ci, 2 * iy, 2 * ix + 1]] = v;
                    y[[bi, ci, 2 * iy + 1, 2 * ix]] = v;
                    y[[bi, ci, 2 * iy + 1, 2 * ix + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    dx[[bi, ci, iy, ix]] = dy[[bi, ci, 2 * iy, 2 * ix]]
                        + dy[[bi, ci, 2 * iy, 2 * ix + 1]]
                        + dy[[bi, ci, 2 * iy + 1, 2 * ix]]
                        + dy[[bi, ci, 2 * iy + 1, 2 * ix + 1]];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis: (a; b). Built by explicit slice
/// assignment so the result is always standard layout.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (ba, ca, h, w) = a.dim();
    let (bb, cb, hb, wb) = b.dim();
    assert!(
        ba == bb && h == hb && w == wb,
        "concat: shape mismatch {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
    let mut out = Array4::<f32>::zeros((ba, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Split a channel-gradient back into the two concatenated parts.
pub fn split_channels(dy: &Array4<f32>, ca: usize) -> (Array4<f32>, Array4<f32>) {
    let da = dy.slice(s![.., ..ca, .., ..]).to_owned();
    let db = dy.slice(s![.., ca.., .., ..]).to_owned();
    (da, db)
}
