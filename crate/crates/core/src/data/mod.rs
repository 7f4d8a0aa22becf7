//! Synthetic source data, corruptions, augmentations and target streams.

pub mod augment;
pub mod corrupt;
pub mod io;
pub mod shapes;
pub mod stream;

pub use augment::{augment, default_recipe, Augmentation, Recipe};
pub use corrupt::{corrupt, CorruptionKind};
pub use io::{export_dataset, import_dataset};
pub use shapes::{generate_source, IMAGE_SIZE};
pub use stream::{DomainStream, Segment, StreamBatch, StreamSpec};

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

/// Labelled images stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_shape: Vec<usize>,
    classes: usize,
    seed: u64,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(image_shape: Vec<usize>, classes: usize, seed: u64, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels do not form {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            image_shape,
            classes,
            seed,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            image: Tensor::new(self.image_shape.clone(), self.image(i).to_vec()).expect("consistent shape"),
            label: self.labels[i],
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stack the given images into `[indices.len(), ...image_shape]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("consistent shape"), labels)
    }
}
