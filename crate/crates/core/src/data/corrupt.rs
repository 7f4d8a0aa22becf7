//! Severity-parameterized corruptions.
//!
//! | kind            | parameter              | 1     | 2    | 3     | 4     | 5     |
//! |-----------------|------------------------|-------|------|-------|-------|-------|
//! | gaussian-noise  | noise std              | 0.04  | 0.06 | 0.08  | 0.11  | 0.14  |
//! | impulse-noise   | fraction of pixels hit | 0.005 | 0.01 | 0.015 | 0.025 | 0.035 |
//! | blur            | gaussian kernel sigma  | 0.4   | 0.5  | 0.6   | 0.75  | 0.9   |
//! | contrast        | contrast factor        | 0.8   | 0.65 | 0.55  | 0.45  | 0.35  |
//! | brightness      | additive shift         | 0.1   | 0.15 | 0.2   | 0.27  | 0.35  |
//!
//! Severity 0 is the identity for every kind. Random corruptions draw one
//! noise field per seed and scale it by the severity parameter, so a fixed
//! seed yields nested perturbations across severities.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Blur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }

    /// Parameter at severities 1 through 5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.11, 0.14],
            CorruptionKind::ImpulseNoise => [0.005, 0.01, 0.015, 0.025, 0.035],
            CorruptionKind::Blur => [0.4, 0.5, 0.6, 0.75, 0.9],
            CorruptionKind::Contrast => [0.8, 0.65, 0.55, 0.45, 0.35],
            CorruptionKind::Brightness => [0.1, 0.15, 0.2, 0.27, 0.35],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

/// Corrupt a single-channel `side × side` image.
pub fn corrupt(image: &[f64], side: usize, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Vec<f64>> {
    if severity > MAX_SEVERITY {
        return Err(Error::Config(format!("severity must be in 0..={MAX_SEVERITY}, got {severity}")));
    }
    if image.len() != side * side {
        return Err(Error::Shape(format!("image has {} pixels, expected {side}²", image.len())));
    }
    if severity == 0 {
        return Ok(image.to_vec());
    }
    let param = kind.table()[usize::from(severity) - 1];
    let mut rng = rng::rng(rng::derive_seed(seed, kind.name()));
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            image.iter().map(|&p| p + param * normal.sample(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => image
            .iter()
            .map(|&p| {
                let hit: f64 = rng.random();
                let salt: bool = rng.random();
                if hit < param {
                    if salt {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    p
                }
            })
            .collect(),
        CorruptionKind::Blur => gaussian_blur(image, side, param),
        CorruptionKind::Contrast => {
            let mean = image.iter().sum::<f64>() / image.len() as f64;
            image.iter().map(|&p| (p - mean) * param + mean).collect()
        }
        CorruptionKind::Brightness => image.iter().map(|&p| p + param).collect(),
    };
    for p in &mut out {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Separable gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let last = side as isize - 1;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, last) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, last) as usize)
                    };
                    acc += w * src[sy * side + sx];
                }
                dst[y * side + x] = acc;
            }
        }
        dst
    };
    pass(&pass(image, true), false)
}
