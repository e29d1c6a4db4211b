//! Seeded synthetic datasets: stroke-rendered digits, Gaussian class blobs,
//! and cartoon faces. Used when the real corpora are not on disk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Stroke = &'static [(f64, f64)];

fn ring(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    (0..=20)
        .map(|i| {
            let t = i as f64 / 20.0 * std::f64::consts::TAU;
            (cx + rx * t.sin(), cy - ry * t.cos())
        })
        .collect()
}

/// Polylines in the unit square (x right, y down), one list per digit.
fn glyph(d: usize) -> Vec<Vec<(f64, f64)>> {
    const TWO: Stroke = &[(0.32, 0.32), (0.4, 0.22), (0.6, 0.22), (0.68, 0.35), (0.32, 0.8), (0.7, 0.8)];
    const THREE: Stroke = &[(0.32, 0.22), (0.68, 0.22), (0.5, 0.47), (0.68, 0.62), (0.6, 0.8), (0.32, 0.78)];
    const FOUR: Stroke = &[(0.62, 0.8), (0.62, 0.2), (0.3, 0.6), (0.72, 0.6)];
    const FIVE: Stroke = &[(0.68, 0.2), (0.36, 0.2), (0.33, 0.48), (0.6, 0.45), (0.7, 0.62), (0.6, 0.8), (0.32, 0.78)];
    const SIX: Stroke =
        &[(0.65, 0.2), (0.42, 0.38), (0.33, 0.62), (0.45, 0.8), (0.62, 0.78), (0.68, 0.62), (0.55, 0.5), (0.35, 0.58)];
    const SEVEN: Stroke = &[(0.3, 0.2), (0.7, 0.2), (0.45, 0.8)];
    match d {
        0 => vec![ring(0.5, 0.5, 0.18, 0.3)],
        1 => vec![vec![(0.42, 0.3), (0.52, 0.2), (0.52, 0.8)]],
        2 => vec![TWO.to_vec()],
        3 => vec![THREE.to_vec()],
        4 => vec![FOUR.to_vec()],
        5 => vec![FIVE.to_vec()],
        6 => vec![SIX.to_vec()],
        7 => vec![SEVEN.to_vec()],
        8 => vec![ring(0.5, 0.34, 0.14, 0.14), ring(0.5, 0.65, 0.17, 0.16)],
        _ => vec![ring(0.5, 0.35, 0.15, 0.15), vec![(0.65, 0.35), (0.6, 0.8)]],
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Handwriting-like digits: white strokes on black, `size`², one channel,
/// labels cycling 0..9. Each sample jitters scale, slant, offset and width.
pub fn digits(count: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("digit canvas {size} is smaller than 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = 1.0 / size as f64;
    let mut data = Vec::with_capacity(count * size * size);
    for i in 0..count {
        let scale = rng.random_range(0.8..1.05);
        let slant = rng.random_range(-0.2..0.2);
        let (ox, oy) = (rng.random_range(-0.07..0.07), rng.random_range(-0.06..0.06));
        let half_width = rng.random_range(0.7..1.2) * 1.6 / 28.0;
        let strokes: Vec<Vec<(f64, f64)>> = glyph(i % 10)
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .map(|(x, y)| {
                        let (x, y) = (0.5 + (x - 0.5) * scale, 0.5 + (y - 0.5) * scale);
                        (x - slant * (y - 0.5) + ox, y + oy)
                    })
                    .collect()
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let p = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
                let d = strokes
                    .iter()
                    .flat_map(|s| s.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                    .fold(f64::INFINITY, f64::min);
                data.push(((half_width - d) / px + 0.5).clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor::new(vec![count, 1, size, size], data)?;
    LabeledDataset::new("synthetic_digits", images, (0..count).map(|i| i % 10).collect(), 10)
}

/// Per-class mean image in `[0.2, 0.8]` plus N(0, 0.1²) pixel noise, clipped.
pub fn blobs(count: usize, classes: usize, shape: [usize; 3], seed: u64) -> Result<LabeledDataset> {
    if classes == 0 {
        return Err(Error::InvalidArgument("blobs need at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let means: Vec<Vec<f64>> = (0..classes).map(|_| (0..n).map(|_| rng.random_range(0.2..0.8)).collect()).collect();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let data = labels
        .iter()
        .flat_map(|&l| means[l].iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect::<Vec<_>>())
        .collect();
    let images = Tensor::new(vec![count, shape[0], shape[1], shape[2]], data)?;
    LabeledDataset::new("synthetic_blobs", images, labels, classes)
}

struct Identity {
    skin: [f64; 3],
    hair: [f64; 3],
    background: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_y: f64,
    mouth_w: f64,
    hairline: f64,
}

/// Cartoon faces (3 channels, `size`²): a skin ellipse, hair cap, eyes and
/// mouth. Geometry and colours are fixed per identity and jittered per
/// sample, so same-label samples share structure the way a face corpus does.
pub fn faces(count: usize, size: usize, identities: usize, seed: u64) -> Result<LabeledDataset> {
    if size < 8 || identities == 0 {
        return Err(Error::InvalidArgument(format!("faces need size >= 8 and identities >= 1 (got {size}, {identities})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn colour(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
        [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
    }
    let ids: Vec<Identity> = (0..identities)
        .map(|_| {
            let tone = rng.random_range(0.45..0.9);
            Identity {
                skin: [tone, tone * 0.8, tone * 0.65],
                hair: colour(&mut rng, 0.0, 0.5),
                background: colour(&mut rng, 0.1, 0.9),
                face_rx: rng.random_range(0.26..0.34),
                face_ry: rng.random_range(0.34..0.42),
                eye_dx: rng.random_range(0.1..0.15),
                eye_y: rng.random_range(0.4..0.47),
                mouth_w: rng.random_range(0.08..0.15),
                hairline: rng.random_range(0.22..0.32),
            }
        })
        .collect();
    let plane = size * size;
    let mut data = vec![0.0; count * 3 * plane];
    let labels: Vec<usize> = (0..count).map(|i| i % identities).collect();
    for (i, &l) in labels.iter().enumerate() {
        let id = &ids[l];
        let (cx, cy) = (0.5 + rng.random_range(-0.04..0.04), 0.52 + rng.random_range(-0.04..0.04));
        let light = rng.random_range(0.85..1.1);
        let smile = rng.random_range(-0.03..0.05);
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let (fx, fy) = ((u - cx) / id.face_rx, (v - cy) / id.face_ry);
                let mut c = id.background;
                if fx * fx + fy * fy <= 1.0 {
                    c = id.skin;
                    if v < id.hairline + cy - 0.5 {
                        c = id.hair;
                    }
                    for side in [-1.0, 1.0] {
                        let (ex, ey) = ((u - cx - side * id.eye_dx) / 0.045, (v - (id.eye_y + cy - 0.5)) / 0.03);
                        if ex * ex + ey * ey <= 1.0 {
                            c = [0.05, 0.05, 0.08];
                        }
                    }
                    let mx = (u - cx) / id.mouth_w;
                    let my = v - (cy + 0.2) - smile * (1.0 - mx * mx);
                    if mx.abs() <= 1.0 && my.abs() < 0.025 {
                        c = [0.55, 0.15, 0.15];
                    }
                }
                for ch in 0..3 {
                    img[ch * plane + y * size + x] = (c[ch] * light).clamp(0.0, 1.0);
                }
            }
        }
    }
    let images = Tensor::new(vec![count, 3, size, size], data)?;
    LabeledDataset::new("synthetic_faces", images, labels, identities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_deterministic_and_in_range() {
        let a = digits(20, 28, 3).unwrap();
        assert_eq!(a, digits(20, 28, 3).unwrap());
        assert_eq!(a.images.shape(), &[20, 1, 28, 28]);
        assert_eq!(a.label_counts(), vec![2; 10]);
        // strokes cover a reasonable share of the canvas
        for i in 0..20 {
            let ink = a.images.row(i).iter().sum::<f64>() / 784.0;
            assert!((0.04..0.4).contains(&ink), "digit {i} ink {ink}");
        }
    }

    #[test]
    fn same_digit_samples_are_closer_than_different_digits() {
        let d = digits(40, 28, 1).unwrap();
        let dist = |a: usize, b: usize| -> f64 {
            d.images.row(a).iter().zip(d.images.row(b)).map(|(x, y)| (x - y).powi(2)).sum()
        };
        let (mut same, mut diff) = (0.0, 0.0);
        for i in 0..10 {
            same += dist(i, i + 10) + dist(i, i + 20);
            diff += dist(i, (i + 1) % 10 + 10) + dist(i, (i + 3) % 10 + 20);
        }
        assert!(same < diff, "{same} vs {diff}");
    }

    #[test]
    fn blobs_and_faces_shapes() {
        let b = blobs(9, 3, [2, 4, 4], 0).unwrap();
        assert_eq!(b.images.shape(), &[9, 2, 4, 4]);
        let f = faces(6, 32, 3, 0).unwrap();
        assert_eq!(f.images.shape(), &[6, 3, 32, 32]);
        assert_eq!(f.labels, vec![0, 1, 2, 0, 1, 2]);
    }
}
