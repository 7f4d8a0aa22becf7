//! Procedural grayscale shapes.
//!
//! Every class is a planar set that maps onto itself (up to rotation) under a
//! horizontal mirror, and rotations are drawn from the full circle, so
//! horizontal flips never change the label.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_SIZE: usize = 16;
pub const MAX_CLASSES: usize = 10;
pub const MIN_PER_CLASS: usize = 50;

/// Class index order; class `c` of a `C`-class dataset is `SHAPES[c]`.
pub const SHAPES: [ShapeKind; MAX_CLASSES] = [
    ShapeKind::Disk,
    ShapeKind::Plus,
    ShapeKind::Bar,
    ShapeKind::Ring,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Frame,
    ShapeKind::DoubleBar,
    ShapeKind::Corner,
    ShapeKind::TwoDots,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Plus,
    Bar,
    Ring,
    Square,
    Triangle,
    Frame,
    DoubleBar,
    Corner,
    TwoDots,
}

impl ShapeKind {
    /// Membership test in shape-local coordinates (unit radius).
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disk => r2 <= 0.8 * 0.8,
            ShapeKind::Plus => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
            ShapeKind::Bar => u.abs() <= 0.95 && v.abs() <= 0.25,
            ShapeKind::Ring => (0.5 * 0.5..=0.9 * 0.9).contains(&r2),
            ShapeKind::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
            ShapeKind::Triangle => v >= -0.45 && 3f64.sqrt() * u.abs() <= 0.9 - v,
            ShapeKind::Frame => (0.5..=0.85).contains(&u.abs().max(v.abs())),
            ShapeKind::DoubleBar => u.abs() <= 0.9 && (0.2..=0.55).contains(&v.abs()),
            ShapeKind::Corner => {
                ((-0.7..=0.7).contains(&u) && (-0.7..=-0.35).contains(&v))
                    || ((-0.7..=-0.35).contains(&u) && (-0.7..=0.7).contains(&v))
            }
            ShapeKind::TwoDots => {
                let d = |c: f64| (u - c) * (u - c) + v * v <= 0.3 * 0.3;
                d(0.5) || d(-0.5)
            }
        }
    }
}

/// Per-image rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub center: (f64, f64),
    /// Radius in pixels of the unit shape.
    pub radius: f64,
    pub angle: f64,
    pub foreground: f64,
    pub background: f64,
    pub noise_std: f64,
}

const SUPERSAMPLE: usize = 4;

/// Render one `IMAGE_SIZE × IMAGE_SIZE` image into `out`.
pub fn render(kind: ShapeKind, p: &RenderParams, noise: &[f64], out: &mut [f64]) {
    let (sin, cos) = p.angle.sin_cos();
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - p.center.0;
                    let py = y as f64 + (sy as f64 + 0.5) * step - p.center.1;
                    let u = (cos * px + sin * py) / p.radius;
                    let v = (-sin * px + cos * py) / p.radius;
                    hits += usize::from(kind.contains(u, v));
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let i = y * IMAGE_SIZE + x;
            let value = p.background + cover * (p.foreground - p.background) + p.noise_std * noise[i];
            out[i] = value.clamp(0.0, 1.0);
        }
    }
}

fn sample_params(rng: &mut rng::Rng) -> RenderParams {
    let mid = IMAGE_SIZE as f64 / 2.0;
    RenderParams {
        center: (mid + rng.random_range(-2.0..2.0), mid + rng.random_range(-2.0..2.0)),
        radius: rng.random_range(4.2..6.2),
        angle: rng.random_range(0.0..std::f64::consts::TAU),
        foreground: rng.random_range(0.55..1.0),
        background: rng.random_range(0.0..0.3),
        noise_std: rng.random_range(0.01..0.06),
    }
}

/// Render sample `index` of a source set; label is `index % classes`.
pub fn render_item(classes: usize, seed: u64, index: usize, out: &mut [f64]) -> usize {
    let label = index % classes;
    let mut rng = rng::rng(rng::item_seed(seed, index as u64));
    let params = sample_params(&mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| normal.sample(&mut rng)).collect();
    render(SHAPES[label], &params, &noise, out);
    label
}

/// Class-balanced labelled set of `n` images, fully determined by `seed`.
pub fn generate_source(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!("classes must be in 2..={MAX_CLASSES}, got {classes}")));
    }
    if n < classes * MIN_PER_CLASS {
        return Err(Error::Config(format!(
            "need at least {} samples for {classes} classes, got {n}",
            classes * MIN_PER_CLASS
        )));
    }
    let pixels = IMAGE_SIZE * IMAGE_SIZE;
    let mut images = vec![0.0; n * pixels];
    let labels = images
        .chunks_mut(pixels)
        .enumerate()
        .map(|(i, out)| render_item(classes, seed, i, out))
        .collect();
    Dataset::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], classes, seed, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_by_construction() {
        let d = generate_source(300, 3, 4).unwrap();
        assert_eq!(d.class_counts(), vec![100, 100, 100]);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate_source(150, 3, 9).unwrap();
        let b = generate_source(150, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_source(150, 3, 10).unwrap());
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = generate_source(500, 10, 1).unwrap();
        assert!(d.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn class_range_and_count_are_checked() {
        assert!(matches!(generate_source(100, 1, 0), Err(Error::Config(_))));
        assert!(matches!(generate_source(1000, 11, 0), Err(Error::Config(_))));
        assert!(matches!(generate_source(149, 3, 0), Err(Error::Config(_))));
    }

    /// Raw-pixel 1-nearest-neighbour accuracy on a held-out set.
    fn one_nn_accuracy(classes: usize) -> f64 {
        let train = generate_source(100 * classes, classes, 1).unwrap();
        let test = generate_source(50 * classes, classes, 2).unwrap();
        let correct = (0..test.len())
            .filter(|&i| {
                let q = test.image(i);
                let best = (0..train.len())
                    .min_by(|&a, &b| {
                        let d = |j: usize| train.image(j).iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                train.label(best) == test.label(i)
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn nearest_neighbour_learns_three_classes() {
        let acc = one_nn_accuracy(3);
        assert!(acc > 0.8, "1-NN accuracy {acc}");
    }

    #[test]
    fn every_shape_covers_some_pixels() {
        let p = RenderParams {
            center: (8.0, 8.0),
            radius: 5.0,
            angle: 0.3,
            foreground: 1.0,
            background: 0.0,
            noise_std: 0.0,
        };
        let noise = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
        let mut seen = Vec::new();
        for kind in SHAPES {
            let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
            render(kind, &p, &noise, &mut out);
            let mass: f64 = out.iter().sum();
            assert!(mass > 5.0, "{kind:?} renders almost nothing");
            assert!(!seen.contains(&out), "{kind:?} duplicates another class");
            seen.push(out);
        }
    }
}
