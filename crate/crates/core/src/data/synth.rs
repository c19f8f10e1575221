//! Synthetic datasets: Gaussian blobs and a procedural handwritten-digit
//! corpus in the MNIST layout (28x28 grayscale, ten classes, values k/255).

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n` points in `dims` dimensions drawn from unit-variance Gaussian
/// clusters. With `classes <= dims` the class means sit on scaled axes,
/// `separation` apart pairwise; otherwise they are random directions of
/// radius `separation / 2`.
pub fn synth_blobs(n: usize, classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::arg("synth_blobs needs at least two classes"));
    }
    if dims == 0 {
        return Err(Error::arg("synth_blobs needs at least one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dims {
                let mut m = vec![0.0; dims];
                m[c] = separation / 2f64.sqrt();
                m
            } else {
                let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / norm * separation / 2.0).collect()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    Dataset::new(Tensor::new(vec![n, dims], data)?, Some(labels), classes, (lo, hi), None)
}

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Glyph skeletons in a unit box, x to the right and y downwards.
fn glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.3, 0.42, 0.0, 2.0 * PI, 20)],
        1 => vec![vec![(0.34, 0.24), (0.52, 0.08), (0.52, 0.92)]],
        2 => vec![{
            let mut s = ellipse(0.5, 0.3, 0.27, 0.22, PI * 1.05, PI * 2.25, 10);
            s.extend([(0.2, 0.92), (0.82, 0.92)]);
            s
        }],
        3 => vec![
            {
                let mut s = vec![(0.24, 0.12)];
                s.extend(ellipse(0.5, 0.29, 0.25, 0.19, -PI * 0.5, PI * 0.5, 8));
                s
            },
            {
                let mut s = ellipse(0.5, 0.69, 0.29, 0.21, -PI * 0.5, PI * 0.5, 8);
                s.push((0.22, 0.86));
                s
            },
        ],
        4 => vec![vec![(0.66, 0.92), (0.66, 0.08), (0.18, 0.64), (0.86, 0.64)]],
        5 => vec![{
            let mut s = vec![(0.78, 0.08), (0.3, 0.08), (0.26, 0.46)];
            s.extend(ellipse(0.5, 0.66, 0.28, 0.24, -PI * 0.75, PI * 0.8, 10));
            s
        }],
        6 => vec![{
            let mut s = vec![(0.72, 0.08), (0.46, 0.22), (0.27, 0.5)];
            s.extend(ellipse(0.5, 0.7, 0.24, 0.21, PI, PI * 3.0, 14));
            s
        }],
        7 => vec![vec![(0.18, 0.1), (0.82, 0.1), (0.4, 0.92)], vec![(0.36, 0.5), (0.7, 0.5)]],
        8 => vec![ellipse(0.5, 0.28, 0.22, 0.2, 0.0, 2.0 * PI, 14), ellipse(0.5, 0.7, 0.27, 0.22, 0.0, 2.0 * PI, 16)],
        9 => vec![{
            let mut s = ellipse(0.5, 0.32, 0.24, 0.22, 0.0, 2.0 * PI, 16);
            s.extend([(0.72, 0.62), (0.58, 0.92)]);
            s
        }],
        _ => unreachable!("digits are 0..10"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

const SIDE: usize = 28;
const BOX: f64 = 20.0;

fn render(digit: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let jitter = 0.08;
    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| (x + rng.gen_range(-jitter..jitter), y + rng.gen_range(-jitter..jitter)))
                .collect()
        })
        .collect();
    let angle: f64 = rng.gen_range(-0.35..0.35);
    let shear = rng.gen_range(-0.35..0.35);
    let sx = BOX * rng.gen_range(0.8..1.1);
    let sy = BOX * rng.gen_range(0.85..1.1);
    let tx = SIDE as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let ty = SIDE as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let (c, s) = (angle.cos(), angle.sin());
    let to_pixel = |(x, y): (f64, f64)| {
        let (u, v) = ((x - 0.5) * sx, (y - 0.5) * sy);
        let u = u + shear * v;
        (c * u - s * v + tx, s * u + c * v + ty)
    };
    let mut segments: Vec<((f64, f64), (f64, f64))> = strokes
        .iter()
        .flat_map(|st| st.windows(2).map(|w| (to_pixel(w[0]), to_pixel(w[1]))).collect::<Vec<_>>())
        .collect();
    // A stray pen mark on some samples.
    if rng.gen_bool(0.3) {
        let a = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let b = (a.0 + rng.gen_range(-0.3..0.3), a.1 + rng.gen_range(-0.3..0.3));
        segments.push((to_pixel(a), to_pixel(b)));
    }
    let half_width: f64 = rng.gen_range(0.7..1.5);
    let ink = rng.gen_range(0.75..1.0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
            let speck: f64 = if rng.gen_bool(0.03) { rng.gen_range(0.0..0.6) } else { 0.0 };
            let v = ((1.0 - (d - half_width)).clamp(0.0, 1.0) * ink).max(speck);
            out[y * SIDE + x] = (v * 255.0).round() / 255.0;
        }
    }
}

/// `n` procedurally drawn digits with uniformly random labels. Each
/// sample randomizes glyph control points, rotation, shear, scale,
/// translation, stroke width and ink intensity.
pub fn synth_digits(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for img in data.chunks_mut(SIDE * SIDE) {
        let digit = rng.gen_range(0..10);
        labels.push(digit);
        render(digit, &mut rng, img);
    }
    Dataset::new(
        Tensor::new(vec![n, SIDE * SIDE], data)?,
        Some(labels),
        10,
        (0.0, 1.0),
        Some(ImageShape::gray(SIDE)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_blobs(50, 3, 4, 2.0, 9).unwrap(), synth_blobs(50, 3, 4, 2.0, 9).unwrap());
        assert_eq!(synth_digits(20, 1).unwrap(), synth_digits(20, 1).unwrap());
        assert_ne!(synth_digits(20, 1).unwrap(), synth_digits(20, 2).unwrap());
    }

    #[test]
    fn blob_means_are_separated() {
        let d = synth_blobs(4000, 2, 2, 10.0, 3).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let mut means = [[0.0; 2]; 2];
        for i in 0..d.len() {
            for j in 0..2 {
                means[labels[i]][j] += d.inputs.row(i)[j] / 2000.0;
            }
        }
        let dist = ((means[0][0] - means[1][0]).powi(2) + (means[0][1] - means[1][1]).powi(2)).sqrt();
        assert!((dist - 10.0).abs() < 0.2, "{dist}");
    }

    #[test]
    fn digits_look_like_mnist() {
        let d = synth_digits(100, 0).unwrap();
        assert_eq!(d.inputs.shape(), &[100, 784]);
        assert!(d.inputs.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(d.inputs.data().iter().all(|&x| ((x * 255.0).round() / 255.0 - x).abs() < 1e-15));
        let ink = d.inputs.mean();
        assert!(ink > 0.05 && ink < 0.35, "mean intensity {ink}");
        // Borders stay mostly empty.
        let inked = (0..100).filter(|&i| d.inputs.row(i)[0] + d.inputs.row(i)[783] > 0.0).count();
        assert!(inked < 15, "{inked} inked corners");
    }
}
