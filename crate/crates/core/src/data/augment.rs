//! Label-preserving augmentations for the warm-up phase.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// Per-image brightness and contrast jitter, factors in `[0.6, 1.4]`.
    Jitter,
    /// Zero-pad by 2 then crop back at a random offset.
    PadCrop,
    /// Rotation within ±15° and translation within ±1.5 px, bilinear.
    Affine,
    /// `p → 1 − p` with probability 0.5.
    Invert,
    /// Horizontal mirror with probability 0.5.
    HFlip,
}

pub type Recipe = Vec<Augmentation>;

pub fn default_recipe() -> Recipe {
    vec![Augmentation::Jitter, Augmentation::Invert]
}

pub fn invert(image: &mut [f64]) {
    for p in image {
        *p = 1.0 - *p;
    }
}

pub fn hflip(image: &mut [f64], side: usize) {
    for row in image.chunks_mut(side) {
        row.reverse();
    }
}

fn bilinear(image: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= side as f64 || yi >= side as f64 {
            0.0
        } else {
            image[yi as usize * side + xi as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Apply `recipe` in order; deterministic given `seed`.
pub fn augment(image: &[f64], side: usize, recipe: &[Augmentation], seed: u64) -> Vec<f64> {
    let mut rng = rng::rng(rng::derive_seed(seed, "augment"));
    let mut img = image.to_vec();
    for aug in recipe {
        match aug {
            Augmentation::Jitter => {
                let brightness: f64 = rng.random_range(0.6..1.4);
                let contrast: f64 = rng.random_range(0.6..1.4);
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                for p in &mut img {
                    *p = ((*p - mean) * contrast + mean) * brightness;
                }
            }
            Augmentation::PadCrop => {
                let dx = rng.random_range(-2i64..=2);
                let dy = rng.random_range(-2i64..=2);
                let src = img.clone();
                for y in 0..side as i64 {
                    for x in 0..side as i64 {
                        let (sx, sy) = (x + dx, y + dy);
                        img[(y * side as i64 + x) as usize] = if (0..side as i64).contains(&sx)
                            && (0..side as i64).contains(&sy)
                        {
                            src[(sy * side as i64 + sx) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
            Augmentation::Affine => {
                let angle = rng.random_range(-15f64..15.0).to_radians();
                let tx: f64 = rng.random_range(-1.5..1.5);
                let ty: f64 = rng.random_range(-1.5..1.5);
                let (sin, cos) = angle.sin_cos();
                let c = (side as f64 - 1.0) / 2.0;
                let src = img.clone();
                for y in 0..side {
                    for x in 0..side {
                        let (px, py) = (x as f64 - c - tx, y as f64 - c - ty);
                        let sx = cos * px + sin * py + c;
                        let sy = -sin * px + cos * py + c;
                        img[y * side + x] = bilinear(&src, side, sx, sy);
                    }
                }
            }
            Augmentation::Invert => {
                if rng.random_bool(0.5) {
                    invert(&mut img);
                }
            }
            Augmentation::HFlip => {
                if rng.random_bool(0.5) {
                    hflip(&mut img, side);
                }
            }
        }
        for p in &mut img {
            *p = p.clamp(0.0, 1.0);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_is_an_involution() {
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let mut twice = img.clone();
        invert(&mut twice);
        assert_eq!(twice[0], 1.0);
        invert(&mut twice);
        for (a, b) in img.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hflip_mirrors_rows() {
        let mut img = vec![0.0, 1.0, 2.0, 3.0];
        hflip(&mut img, 2);
        assert_eq!(img, vec![1.0, 0.0, 3.0, 2.0]);
    }

    #[test]
    fn augment_is_deterministic_and_in_range() {
        let img: Vec<f64> = (0..256).map(|i| (i % 7) as f64 / 7.0).collect();
        let all = [
            Augmentation::Jitter,
            Augmentation::PadCrop,
            Augmentation::Affine,
            Augmentation::Invert,
            Augmentation::HFlip,
        ];
        let a = augment(&img, 16, &all, 5);
        assert_eq!(a, augment(&img, 16, &all, 5));
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(augment(&img, 16, &[], 5) == img);
    }

    #[test]
    fn default_recipe_is_jitter_then_invert() {
        assert_eq!(default_recipe(), vec![Augmentation::Jitter, Augmentation::Invert]);
    }
}
