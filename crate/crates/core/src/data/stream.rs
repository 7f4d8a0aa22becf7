//! Continual target streams: an ordered list of corruption segments.
//!
//! Batches never straddle a segment boundary. Labels travel with each batch
//! for the evaluator only; [`StreamBatch::images`] is all an adapter sees.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptionKind, MAX_SEVERITY};
use super::shapes::{render_item, IMAGE_SIZE, MAX_CLASSES};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub kind: CorruptionKind,
    /// 0 leaves images clean.
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub segments: Vec<Segment>,
    pub samples_per_segment: usize,
}

impl StreamSpec {
    /// One segment per corruption kind, all at `severity`.
    pub fn all_kinds(severity: u8, samples_per_segment: usize) -> Self {
        StreamSpec {
            segments: CorruptionKind::ALL
                .into_iter()
                .map(|kind| Segment { kind, severity })
                .collect(),
            samples_per_segment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() || self.samples_per_segment == 0 {
            return Err(Error::Config("stream must have at least one non-empty segment".into()));
        }
        if let Some(s) = self.segments.iter().find(|s| s.severity > MAX_SEVERITY) {
            return Err(Error::Config(format!(
                "segment {} severity {} exceeds {MAX_SEVERITY}",
                s.kind, s.severity
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.segments.len() * self.samples_per_segment
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub segment: usize,
    pub kind: CorruptionKind,
    pub severity: u8,
    /// `[B, 1, H, W]`.
    pub images: Tensor,
    labels: Vec<usize>,
}

impl StreamBatch {
    /// Ground truth, for scoring predictions only.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainStream {
    pub spec: StreamSpec,
    pub classes: usize,
    pub seed: u64,
    /// Permute labels within each batch; adapters must be unaffected.
    #[serde(default)]
    pub label_shuffle: Option<u64>,
}

impl DomainStream {
    pub fn new(spec: StreamSpec, classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !(2..=MAX_CLASSES).contains(&classes) {
            return Err(Error::Config(format!("classes must be in 2..={MAX_CLASSES}, got {classes}")));
        }
        Ok(DomainStream {
            spec,
            classes,
            seed,
            label_shuffle: None,
        })
    }

    pub fn with_shuffled_labels(mut self, seed: u64) -> Self {
        self.label_shuffle = Some(seed);
        self
    }

    /// Images and labels of one segment in stream order.
    pub fn segment_samples(&self, index: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let seg = self
            .spec
            .segments
            .get(index)
            .ok_or_else(|| Error::Usage(format!("segment {index} out of range")))?;
        let n = self.spec.samples_per_segment;
        let pixels = IMAGE_SIZE * IMAGE_SIZE;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng(rng::derive_seed(self.seed, &format!("order-{index}"))));
        let render_seed = rng::derive_seed(self.seed, "stream-render");
        let corrupt_seed = rng::derive_seed(self.seed, "stream-corrupt");
        let mut images = Vec::with_capacity(n * pixels);
        let mut labels = Vec::with_capacity(n);
        let mut clean = vec![0.0; pixels];
        for j in order {
            let global = index * n + j;
            labels.push(render_item(self.classes, render_seed, global, &mut clean));
            let img = corrupt(
                &clean,
                IMAGE_SIZE,
                seg.kind,
                seg.severity,
                rng::item_seed(corrupt_seed, global as u64),
            )?;
            images.extend_from_slice(&img);
        }
        Ok((images, labels))
    }

    /// All batches in order; the last batch of a segment may be short.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<StreamBatch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let pixels = IMAGE_SIZE * IMAGE_SIZE;
        let mut out = Vec::new();
        for (s, seg) in self.spec.segments.iter().enumerate() {
            let (images, labels) = self.segment_samples(s)?;
            for (b, chunk) in labels.chunks(batch_size).enumerate() {
                let start = b * batch_size;
                let mut labels = chunk.to_vec();
                if let Some(shuffle) = self.label_shuffle {
                    labels.shuffle(&mut rng::rng(rng::item_seed(shuffle, out.len() as u64)));
                }
                out.push(StreamBatch {
                    segment: s,
                    kind: seg.kind,
                    severity: seg.severity,
                    images: Tensor::new(
                        vec![chunk.len(), 1, IMAGE_SIZE, IMAGE_SIZE],
                        images[start * pixels..(start + chunk.len()) * pixels].to_vec(),
                    )?,
                    labels,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> DomainStream {
        DomainStream::new(StreamSpec::all_kinds(5, 10), 3, 8).unwrap()
    }

    #[test]
    fn segments_in_order_and_batches_do_not_straddle() {
        let batches = stream().batches(4).unwrap();
        assert_eq!(batches.len(), 5 * 3);
        let sizes: Vec<usize> = batches.iter().take(3).map(StreamBatch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let segs: Vec<usize> = batches.iter().map(|b| b.segment).collect();
        assert!(segs.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(batches[14].kind, CorruptionKind::Brightness);
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(stream().batches(7).unwrap(), stream().batches(7).unwrap());
    }

    #[test]
    fn shuffled_labels_keep_images() {
        let a = stream().batches(5).unwrap();
        let b = stream().with_shuffled_labels(3).batches(5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images, y.images);
            let (mut l1, mut l2) = (x.labels().to_vec(), y.labels().to_vec());
            l1.sort();
            l2.sort();
            assert_eq!(l1, l2);
        }
        assert!(a.iter().zip(&b).any(|(x, y)| x.labels() != y.labels()));
    }

    #[test]
    fn empty_stream_is_a_config_error() {
        let spec = StreamSpec {
            segments: vec![],
            samples_per_segment: 10,
        };
        assert!(matches!(DomainStream::new(spec, 3, 0), Err(Error::Config(_))));
    }
}
