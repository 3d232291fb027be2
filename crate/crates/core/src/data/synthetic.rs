//! Small generated datasets for desk-scale runs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Raw samples before splitting: row-major features plus labels.
pub struct Generated {
    pub shape: [usize; 3],
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Gaussian clusters in `h·w·c` dimensions. Class centres are drawn
/// uniformly in `[−2, 2]` per feature; samples add `N(0, spread²)` noise.
pub fn blobs(rng: &mut ChaCha8Rng, classes: usize, samples: usize, shape: [usize; 3], spread: f64) -> Generated {
    let dim = shape.iter().product::<usize>();
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread is finite and non-negative");
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        features.extend(centres[label].iter().map(|c| c + noise.sample(rng)));
        labels.push(label);
    }
    Generated {
        shape,
        features,
        labels,
        classes,
    }
}

/// Concentric rings in the plane, one per class (radius `class + 1`).
pub fn rings(rng: &mut ChaCha8Rng, classes: usize, samples: usize, noise_std: f64) -> Generated {
    let noise = Normal::new(0.0, noise_std).expect("finite noise");
    let mut features = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (label + 1) as f64 + noise.sample(rng);
        features.push(r * theta.cos());
        features.push(r * theta.sin());
        labels.push(label);
    }
    Generated {
        shape: [1, 1, 2],
        features,
        labels,
        classes,
    }
}

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// 8×8 grey-level digits: a 5×7 glyph at a random offset, random stroke
/// intensity, pixel flips with probability `flip`, and Gaussian noise.
pub fn digits(rng: &mut ChaCha8Rng, samples: usize, noise_std: f64, flip: f64) -> Generated {
    let noise = Normal::new(0.0, noise_std).expect("finite noise");
    let mut features = Vec::with_capacity(samples * 64);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 10;
        let dx = rng.random_range(0..=3usize);
        let dy = rng.random_range(0..=1usize);
        let ink = rng.random_range(0.6..1.0);
        let mut img = [0.0f64; 64];
        for (r, row) in GLYPHS[label].iter().enumerate() {
            for (c, bit) in row.bytes().enumerate() {
                if bit == b'1' {
                    img[(r + dy) * 8 + c + dx] = ink;
                }
            }
        }
        for px in img.iter_mut() {
            if rng.random_bool(flip) {
                *px = if *px > 0.0 { 0.0 } else { ink };
            }
            *px += noise.sample(rng);
        }
        features.extend_from_slice(&img);
        labels.push(label);
    }
    Generated {
        shape: [8, 8, 1],
        features,
        labels,
        classes: 10,
    }
}

/// Quantizes generated digits to bytes, for writing IDX files.
pub fn to_bytes(features: &[f64]) -> Vec<u8> {
    features
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
