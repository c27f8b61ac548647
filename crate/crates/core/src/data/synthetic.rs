//! Procedurally generated class-conditional images for offline runs.
//!
//! Each class owns a color and an oriented stripe pattern; samples add a
//! random phase, a random brightness offset and per-pixel Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Image, Sample};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug)]
struct ClassStyle {
    color: [f32; 3],
    angle: f32,
    freq: f32,
}

fn styles(classes: usize, seed: u64) -> Vec<ClassStyle> {
    let mut rng = stream_rng(seed, Stream::Synthetic, u64::MAX, 0);
    (0..classes)
        .map(|c| ClassStyle {
            color: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            angle: std::f32::consts::PI * c as f32 / classes as f32,
            freq: rng.random_range(0.5..1.5),
        })
        .collect()
}

/// `n` samples with labels cycling through `classes`, `size x size` pixels.
pub fn generate(n: usize, classes: usize, size: usize, seed: u64) -> Dataset {
    generate_range(0..n, classes, size, seed)
}

/// Disjoint train and validation splits drawn from the same class styles.
pub fn split(
    train: usize,
    val: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> (Dataset, Dataset) {
    (
        generate_range(0..train, classes, size, seed),
        generate_range(train..train + val, classes, size, seed),
    )
}

/// Samples with global indices in `range`.
pub fn generate_range(
    range: std::ops::Range<usize>,
    classes: usize,
    size: usize,
    seed: u64,
) -> Dataset {
    let st = styles(classes, seed);
    let noise = Normal::new(0.0f32, 30.0).expect("valid normal");
    let samples = range
        .map(|i| {
            let label = i % classes;
            let s = st[label];
            let mut rng = stream_rng(seed, Stream::Synthetic, 0, i as u64);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let offset: f32 = rng.random_range(-20.0..20.0);
            let (sin, cos) = s.angle.sin_cos();
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let u =
                        (x as f32 * cos + y as f32 * sin) * s.freq * std::f32::consts::TAU / 8.0;
                    let wave = (u + phase).sin();
                    for ch in 0..3 {
                        let v = 128.0
                            + offset
                            + 70.0 * wave * s.color[ch]
                            + 30.0 * s.color[ch]
                            + noise.sample(&mut rng);
                        data.push(v.clamp(0.0, 255.0));
                    }
                }
            }
            Sample {
                image: Image {
                    height: size,
                    width: size,
                    data,
                },
                label,
            }
        })
        .collect();
    Dataset {
        samples,
        num_classes: classes,
    }
}
