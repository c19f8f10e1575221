//! Image augmentations for single-sample weight-sensitivity scoring.
//!
//! The fixed family is rot90, rot180, rot270, horizontal flip and vertical
//! flip; further copies are random affine warps (rotation within ±15°,
//! translation within ±2 pixels, bilinear sampling with zero fill).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ImageShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_SHIFT_PX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Affine { degrees: f64, dx: f64, dy: f64 },
}

const FIXED: [Augmentation; 5] = [
    Augmentation::Rot90,
    Augmentation::Rot180,
    Augmentation::Rot270,
    Augmentation::FlipHorizontal,
    Augmentation::FlipVertical,
];

/// The first `k` augmentations: the fixed family, then seeded random affines.
pub fn plan(k: usize, seed: u64) -> Vec<Augmentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|i| {
            FIXED.get(i).copied().unwrap_or_else(|| Augmentation::Affine {
                degrees: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
                dx: rng.gen_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                dy: rng.gen_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
            })
        })
        .collect()
}

fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    px(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + px(y0, x0 + 1.0) * (1.0 - fy) * fx
        + px(y0 + 1.0, x0) * fy * (1.0 - fx)
        + px(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// Applies `aug` to one flattened image.
pub fn apply(aug: Augmentation, img: &[f64], shape: ImageShape) -> Result<Vec<f64>> {
    let (h, w) = (shape.height, shape.width);
    if img.len() != shape.len() {
        return Err(Error::shape("augment", format!("{} values for image {shape:?}", img.len())));
    }
    let rotates = matches!(aug, Augmentation::Rot90 | Augmentation::Rot270);
    if rotates && h != w {
        return Err(Error::arg("quarter-turn rotations need square images"));
    }
    let mut out = vec![0.0; img.len()];
    for (src, dst) in img.chunks(h * w).zip(out.chunks_mut(h * w)) {
        match aug {
            Augmentation::Rot90 => {
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[x * w + (w - 1 - y)];
                    }
                }
            }
            Augmentation::Rot180 => {
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = src[h * w - 1 - i];
                }
            }
            Augmentation::Rot270 => {
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[(h - 1 - x) * w + y];
                    }
                }
            }
            Augmentation::FlipHorizontal => {
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[y * w + (w - 1 - x)];
                    }
                }
            }
            Augmentation::FlipVertical => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
                }
            }
            Augmentation::Affine { degrees, dx, dy } => {
                let (s, c) = degrees.to_radians().sin_cos();
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        // Inverse map from output pixel to source location.
                        let (u, v) = (x as f64 - cx - dx, y as f64 - cy - dy);
                        let sx = c * u + s * v + cx;
                        let sy = -s * u + c * v + cy;
                        dst[y * w + x] = sample_bilinear(src, h, w, sy, sx);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A `[k + 1, features]` batch: the original sample followed by `k`
/// augmented copies.
pub fn augmented_batch(sample: &[f64], shape: Option<ImageShape>, k: usize, seed: u64) -> Result<Tensor> {
    let mut rows = vec![sample.to_vec()];
    if k > 0 {
        let shape = shape.ok_or_else(|| Error::arg("augmentations need image-shaped inputs"))?;
        for aug in plan(k, seed) {
            rows.push(apply(aug, sample, shape)?);
        }
    }
    Tensor::from_rows(&rows)
}
