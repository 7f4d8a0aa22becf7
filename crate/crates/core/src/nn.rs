//! Model assembly: a graph split into feature extractor `g_s` and classifier
//! `h_s`, with every parameterized layer tagged as representation, BN or
//! classifier.

use std::fs;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{
    forward, BatchNorm, BatchStats, BnMode, Conv2d, Dense, ForwardOptions, ForwardOutput, Graph, Layer, LayerId, OpKind,
    ParamId, Precision, Tensor, TrainableSet,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerTag {
    /// Dense or conv layer inside `g_s`.
    Representation,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Classifier,
    /// relu, pool, flatten.
    Parameterless,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptor {
    pub node: usize,
    pub layer_id: Option<LayerId>,
    pub kind: OpKind,
    pub params: Vec<ParamId>,
    pub is_representation: bool,
    pub is_classifier: bool,
}

impl LayerDescriptor {
    pub fn tag(&self) -> LayerTag {
        match (self.layer_id, self.kind) {
            (None, _) => LayerTag::Parameterless,
            _ if self.is_classifier => LayerTag::Classifier,
            _ if self.is_representation => LayerTag::Representation,
            (Some(_), OpKind::BatchNorm) => LayerTag::BatchNorm,
            _ => unreachable!("parameterized layers are always tagged"),
        }
    }
}

/// A graph plus its `g_s`/`h_s` split. Nodes `[0, split)` form `g_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    graph: Graph,
    input_shape: Vec<usize>,
    classes: usize,
    split: usize,
    descriptors: Vec<LayerDescriptor>,
}

impl Model {
    /// `input_shape` excludes the batch dimension. `h_s` (nodes from `split`)
    /// must be a dense stack: dense/relu/flatten only, at least one dense.
    pub fn new(graph: Graph, input_shape: Vec<usize>, split: usize) -> Result<Self> {
        if split == 0 || split >= graph.len() {
            return Err(Error::Shape(format!(
                "split {split} must leave both g_s and h_s non-empty ({} nodes)",
                graph.len()
            )));
        }
        let head = &graph.layers()[split..];
        if !head.iter().any(|l| l.kind() == OpKind::Dense)
            || head
                .iter()
                .any(|l| !matches!(l.kind(), OpKind::Dense | OpKind::Relu | OpKind::Flatten))
        {
            return Err(Error::Shape("classifier h_s must be a dense stack".into()));
        }
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(&input_shape);
        let shapes = graph.activation_shapes(&batch_shape)?;
        let out = shapes.last().unwrap();
        if out.len() != 2 {
            return Err(Error::Shape(format!("model output must be [N, C], got {out:?}")));
        }
        let classes = out[1];

        let descriptors = graph
            .layers()
            .iter()
            .enumerate()
            .map(|(node, layer)| {
                let layer_id = graph.layer_id(node);
                let kind = layer.kind();
                let params = layer_id
                    .map(|id| {
                        layer
                            .params()
                            .into_iter()
                            .map(|(role, _)| ParamId { layer: id, role })
                            .collect()
                    })
                    .unwrap_or_default();
                let is_classifier = layer_id.is_some() && node >= split;
                let is_representation =
                    layer_id.is_some() && node < split && matches!(kind, OpKind::Dense | OpKind::Conv2d);
                LayerDescriptor {
                    node,
                    layer_id,
                    kind,
                    params,
                    is_representation,
                    is_classifier,
                }
            })
            .collect();

        Ok(Model {
            graph,
            input_shape,
            classes,
            split,
            descriptors,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Mutable graph access for optimizers and running-stat updates. The
    /// structure (layer kinds and shapes) must not be changed.
    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.input_shape);
        s
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn descriptors(&self) -> &[LayerDescriptor] {
        &self.descriptors
    }

    /// `g_s` in forward order.
    pub fn feature_extractor(&self) -> &[LayerDescriptor] {
        &self.descriptors[..self.split]
    }

    /// `h_s` in forward order.
    pub fn classifier(&self) -> &[LayerDescriptor] {
        &self.descriptors[self.split..]
    }

    fn ids_tagged(&self, tag: LayerTag) -> Vec<LayerId> {
        self.descriptors
            .iter()
            .filter(|d| d.tag() == tag)
            .filter_map(|d| d.layer_id)
            .collect()
    }

    pub fn representation_layers(&self) -> Vec<LayerId> {
        self.ids_tagged(LayerTag::Representation)
    }

    pub fn bn_layers(&self) -> Vec<LayerId> {
        self.ids_tagged(LayerTag::BatchNorm)
    }

    pub fn classifier_layers(&self) -> Vec<LayerId> {
        self.ids_tagged(LayerTag::Classifier)
    }

    pub fn all_layers(&self) -> TrainableSet {
        self.graph.layer_ids().collect()
    }

    /// `L`, the number of parameterized layers.
    pub fn parameterized_count(&self) -> usize {
        self.graph.parameterized_count()
    }

    pub fn descriptor(&self, id: LayerId) -> Option<&LayerDescriptor> {
        self.descriptors.iter().find(|d| d.layer_id == Some(id))
    }

    pub fn tag_of(&self, id: LayerId) -> Option<LayerTag> {
        self.descriptor(id).map(LayerDescriptor::tag)
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn forward(&self, input: &Tensor, trainable: &TrainableSet, opts: &ForwardOptions) -> Result<ForwardOutput> {
        forward(&self.graph, input, trainable, opts)
    }

    /// Logits without recording anything.
    pub fn predict(&self, input: &Tensor, bn_mode: BnMode) -> Result<Tensor> {
        self.graph.infer(input, bn_mode, Precision::F64)
    }

    /// `g_s(x)`.
    pub fn features(&self, input: &Tensor, bn_mode: BnMode) -> Result<Tensor> {
        self.graph.infer_range(0..self.split, input, bn_mode, Precision::F64)
    }

    /// `h_s(z)`.
    pub fn classify(&self, features: &Tensor, bn_mode: BnMode) -> Result<Tensor> {
        self.graph
            .infer_range(self.split..self.graph.len(), features, bn_mode, Precision::F64)
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            if let Layer::BatchNorm(bn) = self.graph.layer_mut(s.node) {
                bn.update_running(s);
            }
        }
    }

    pub fn snapshot(&self) -> FrozenModel {
        FrozenModel(Arc::new(self.clone()))
    }

    /// Parameter tensors of a layer concatenated in graph order.
    pub fn layer_params(&self, id: LayerId) -> Vec<&Tensor> {
        self.graph
            .layer(id)
            .map(|l| l.params().into_iter().map(|(_, t)| t).collect())
            .unwrap_or_default()
    }

    pub fn to_checkpoint(&self, metadata: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            split: self.split,
            layers: self.graph.layers().to_vec(),
            tags: self.descriptors.iter().map(LayerDescriptor::tag).collect(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Model, CheckpointMeta)> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Artifact(format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Artifact(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let model = Model::new(Graph::new(ck.layers), ck.input_shape, ck.split)
            .map_err(|e| Error::Artifact(format!("checkpoint graph invalid: {e}")))?;
        let tags: Vec<LayerTag> = model.descriptors.iter().map(LayerDescriptor::tag).collect();
        if tags != ck.tags || model.classes != ck.classes {
            return Err(Error::Artifact("checkpoint layer tags do not match its graph".into()));
        }
        Ok((model, ck.metadata))
    }
}

/// Immutable, shareable copy of a model taken before adaptation starts.
#[derive(Debug, Clone)]
pub struct FrozenModel(Arc<Model>);

impl Deref for FrozenModel {
    type Target = Model;

    fn deref(&self) -> &Model {
        &self.0
    }
}

pub fn snapshot_frozen_reference(model: &Model) -> FrozenModel {
    model.snapshot()
}

// ── reference CNN ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceCnnConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv-bn-relu-pool block.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub kernel: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for ReferenceCnnConfig {
    fn default() -> Self {
        ReferenceCnnConfig {
            input_size: 16,
            in_channels: 1,
            widths: vec![16, 32, 64],
            classes: 10,
            kernel: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ReferenceCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.widths.len();
        if blocks == 0 || self.widths.contains(&0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("kernel must be odd".into()));
        }
        let reduce = 1usize << blocks;
        if self.input_size == 0 || !self.input_size.is_multiple_of(reduce) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {reduce} for {blocks} pooling blocks",
                self.input_size
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `[conv-bn-relu-pool] × blocks → flatten → dense`, He-initialized from `cfg.seed`.
pub fn build_reference_cnn(cfg: &ReferenceCnnConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = rng::rng(cfg.seed);
    let k = cfg.kernel;
    let mut layers = Vec::new();
    let mut cin = cfg.in_channels;
    for &cout in &cfg.widths {
        let fan_in = (cin * k * k) as f64;
        layers.push(Layer::Conv2d(Conv2d {
            weight: Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), &mut rng),
            bias: Tensor::zeros(&[cout]),
            padding: k / 2,
        }));
        layers.push(Layer::BatchNorm(BatchNorm::new(cout, cfg.bn_momentum, cfg.bn_eps)));
        layers.push(Layer::Relu);
        layers.push(Layer::Pool);
        cin = cout;
    }
    layers.push(Layer::Flatten);
    let side = cfg.input_size >> cfg.widths.len();
    let features = cin * side * side;
    layers.push(Layer::Dense(Dense {
        weight: Tensor::randn(&[features, cfg.classes], (2.0 / features as f64).sqrt(), &mut rng),
        bias: Tensor::zeros(&[cfg.classes]),
    }));
    let split = layers.len() - 1;
    Model::new(
        Graph::new(layers),
        vec![cfg.in_channels, cfg.input_size, cfg.input_size],
        split,
    )
}

// ── checkpoints ──────────────────────────────────────────────────────

pub const CHECKPOINT_FORMAT: &str = "foctta-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub purpose: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed_lineage: Vec<SeedRecord>,
    pub cnn_config: Option<ReferenceCnnConfig>,
    pub clean_accuracy: Option<f64>,
    pub config_hash: Option<String>,
}

/// JSON-of-arrays checkpoint. Floats are written in shortest round-trip form,
/// so save followed by load reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub split: usize,
    pub layers: Vec<Layer>,
    pub tags: Vec<LayerTag>,
    pub metadata: CheckpointMeta,
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: CheckpointMeta) -> Result<()> {
    let json = serde_json::to_string(&model.to_checkpoint(metadata))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Artifact(format!("{} is not a valid checkpoint: {e}", path.display())))?;
    Model::from_checkpoint(ck)
}
