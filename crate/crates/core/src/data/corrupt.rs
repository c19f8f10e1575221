//! Synthetic distribution shifts: five corruption kinds at severities 1-5.
//!
//! | kind           | parameter            | severity 1 .. 5                 |
//! |----------------|----------------------|---------------------------------|
//! | gaussian_noise | noise std            | 0.04 0.08 0.12 0.18 0.26        |
//! | impulse_noise  | salt/pepper fraction | 0.03 0.06 0.09 0.17 0.27        |
//! | blur_boxfilter | box radius (pixels)  | 1 1 2 2 3 (passes 1 2 1 2 2)    |
//! | contrast       | contrast factor      | 0.6 0.5 0.4 0.3 0.2             |
//! | brightness     | additive shift       | 0.1 0.2 0.3 0.4 0.5             |

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BlurBoxfilter,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BlurBoxfilter,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BlurBoxfilter => "blur_boxfilter",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

pub const GAUSSIAN_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const IMPULSE_FRACTION: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
pub const BLUR: [(usize, usize); 5] = [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)];
pub const CONTRAST: [f64; 5] = [0.6, 0.5, 0.4, 0.3, 0.2];
pub const BRIGHTNESS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn box_blur(img: &mut [f64], h: usize, w: usize, radius: usize) {
    let src = img.to_vec();
    let r = radius as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut acc, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += src[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            img[y as usize * w + x as usize] = acc / n;
        }
    }
}

/// Applies `spec` to every row of `data` (which must lie in `[0, 1]`) and
/// clamps the result to `[0, 1]`.
pub fn corrupt(data: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::arg(format!("severity {} outside 1..=5", spec.severity)));
    }
    if data.range.0 < 0.0 || data.range.1 > 1.0 {
        return Err(Error::arg("corrupt expects inputs in [0, 1]"));
    }
    let s = spec.severity as usize - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    let width = data.features();
    for row in out.inputs.data_mut().chunks_mut(width) {
        match spec.kind {
            CorruptionKind::GaussianNoise => {
                for x in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += GAUSSIAN_STD[s] * z;
                }
            }
            CorruptionKind::ImpulseNoise => {
                for x in row.iter_mut() {
                    if rng.gen::<f64>() < IMPULSE_FRACTION[s] {
                        *x = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                    }
                }
            }
            CorruptionKind::BlurBoxfilter => {
                let img = data
                    .image
                    .ok_or_else(|| Error::arg("blur_boxfilter needs image-shaped inputs"))?;
                let (radius, passes) = BLUR[s];
                for plane in row.chunks_mut(img.height * img.width) {
                    for _ in 0..passes {
                        box_blur(plane, img.height, img.width, radius);
                    }
                }
            }
            CorruptionKind::Contrast => {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                for x in row.iter_mut() {
                    *x = (*x - mean) * CONTRAST[s] + mean;
                }
            }
            CorruptionKind::Brightness => {
                for x in row.iter_mut() {
                    *x += BRIGHTNESS[s];
                }
            }
        }
        for x in row.iter_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    }
    out.range = (0.0, 1.0);
    Ok(out)
}
