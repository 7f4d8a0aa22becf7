//! Static feed-forward graphs: an ordered sequence of layers, each one node.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::ops;
use crate::engine::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// 1-based index over the parameterized layers of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: LayerId,
    pub role: ParamRole,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:?}", self.layer, self.role)
    }
}

/// The adaptable partition θ^a, expressed as whole layers. Every parameter of a
/// listed layer is trainable; every other parameter is frozen.
pub type TrainableSet = BTreeSet<LayerId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Normalize with the stored running mean/variance.
    UseRunningStats,
    /// Normalize with statistics of the current batch.
    UseBatchStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Dense,
    Conv2d,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Relu,
    Pool,
    Flatten,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Dense => "dense",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Pool => "pool",
            OpKind::Flatten => "flatten",
        }
    }

    pub fn is_parameterized(self) -> bool {
        matches!(self, OpKind::Dense | OpKind::Conv2d | OpKind::BatchNorm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in, k, k]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum,
            eps,
        }
    }

    /// Exponential moving update with unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let count = stats.count as f64;
        let unbias = if stats.count > 1 { count / (count - 1.0) } else { 1.0 };
        for (r, mu) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * mu;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
    }
}

/// Batch statistics observed by a BN node during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub node: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    #[serde(rename = "batchnorm")]
    BatchNorm(BatchNorm),
    Relu,
    /// 2×2 max pooling with stride 2.
    Pool,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> OpKind {
        match self {
            Layer::Dense(_) => OpKind::Dense,
            Layer::Conv2d(_) => OpKind::Conv2d,
            Layer::BatchNorm(_) => OpKind::BatchNorm,
            Layer::Relu => OpKind::Relu,
            Layer::Pool => OpKind::Pool,
            Layer::Flatten => OpKind::Flatten,
        }
    }

    pub fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        match self {
            Layer::Dense(d) => vec![(ParamRole::Weight, &d.weight), (ParamRole::Bias, &d.bias)],
            Layer::Conv2d(c) => vec![(ParamRole::Weight, &c.weight), (ParamRole::Bias, &c.bias)],
            Layer::BatchNorm(b) => vec![(ParamRole::BnGamma, &b.gamma), (ParamRole::BnBeta, &b.beta)],
            _ => Vec::new(),
        }
    }

    pub fn param_mut(&mut self, role: ParamRole) -> Option<&mut Tensor> {
        match (self, role) {
            (Layer::Dense(d), ParamRole::Weight) => Some(&mut d.weight),
            (Layer::Dense(d), ParamRole::Bias) => Some(&mut d.bias),
            (Layer::Conv2d(c), ParamRole::Weight) => Some(&mut c.weight),
            (Layer::Conv2d(c), ParamRole::Bias) => Some(&mut c.bias),
            (Layer::BatchNorm(b), ParamRole::BnGamma) => Some(&mut b.gamma),
            (Layer::BatchNorm(b), ParamRole::BnBeta) => Some(&mut b.beta),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Output shape for a given input shape, or a graph-construction error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => match input {
                [n, f] if *f == d.weight.shape()[0] && d.bias.numel() == d.weight.shape()[1] => {
                    Ok(vec![*n, d.weight.shape()[1]])
                }
                _ => Err(Error::Shape(format!(
                    "dense with weight {:?} cannot take input {input:?}",
                    d.weight.shape()
                ))),
            },
            Layer::Conv2d(c) => ops::conv2d_output_shape(input, c.weight.shape(), c.padding),
            Layer::BatchNorm(b) => {
                let ch = ops::bn_channels(input)?;
                if ch != b.gamma.numel() {
                    return Err(Error::Shape(format!(
                        "batchnorm over {} channels cannot take input {input:?}",
                        b.gamma.numel()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Pool => ops::maxpool_output_shape(input),
            Layer::Flatten => {
                if input.len() < 2 {
                    return Err(Error::Shape(format!("flatten needs rank >= 2, got {input:?}")));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }

    /// Plain evaluation without any recording.
    pub fn apply(&self, x: &Tensor, bn_mode: BnMode) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => ops::dense_forward(x, &d.weight, &d.bias),
            Layer::Conv2d(c) => ops::conv2d_forward(x, &c.weight, &c.bias, c.padding),
            Layer::BatchNorm(b) => match bn_mode {
                BnMode::UseBatchStats => Ok(ops::bn_forward_batch(x, &b.gamma, &b.beta, b.eps)?.output),
                BnMode::UseRunningStats => Ok(ops::bn_forward_running(
                    x,
                    &b.gamma,
                    &b.beta,
                    &b.running_mean,
                    &b.running_var,
                    b.eps,
                )?
                .0),
            },
            Layer::Relu => Ok(ops::relu_forward(x)),
            Layer::Pool => Ok(ops::maxpool_forward(x)?.0),
            Layer::Flatten => {
                let shape = self.output_shape(x.shape())?;
                x.clone().reshape(shape)
            }
        }
    }
}

/// Ordered layer sequence with layer ids assigned to parameterized nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    layers: Vec<Layer>,
    ids: Vec<Option<LayerId>>,
}

impl Graph {
    pub fn new(layers: Vec<Layer>) -> Self {
        let mut next = 0;
        let ids = layers
            .iter()
            .map(|l| {
                l.kind().is_parameterized().then(|| {
                    next += 1;
                    LayerId(next)
                })
            })
            .collect();
        Graph { layers, ids }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_id(&self, node: usize) -> Option<LayerId> {
        self.ids.get(node).copied().flatten()
    }

    /// Node index of a parameterized layer.
    pub fn node_of(&self, id: LayerId) -> Option<usize> {
        self.ids.iter().position(|x| *x == Some(id))
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.ids.iter().flatten().copied()
    }

    /// Number of parameterized layers `L`.
    pub fn parameterized_count(&self) -> usize {
        self.ids.iter().flatten().count()
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer> {
        self.node_of(id).map(|n| &self.layers[n])
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.layer(id.layer)?
            .params()
            .into_iter()
            .find(|(r, _)| *r == id.role)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let node = self.node_of(id.layer)?;
        self.layers[node].param_mut(id.role)
    }

    pub fn layer_mut(&mut self, node: usize) -> &mut Layer {
        &mut self.layers[node]
    }

    /// All parameter ids in graph order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .zip(&self.ids)
            .filter_map(|(l, id)| id.map(|id| (l, id)))
            .flat_map(|(l, id)| l.params().into_iter().map(move |(role, _)| ParamId { layer: id, role }))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Shapes of every activation `a_0 .. a_n` (input of node i is entry i).
    pub fn activation_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("node {i} ({}): {e}", layer.kind().name())))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn check_trainable(&self, trainable: &TrainableSet) -> Result<()> {
        for id in trainable {
            if self.node_of(*id).is_none() {
                return Err(Error::Plan(format!("unknown layer id {id}")));
            }
        }
        Ok(())
    }

    /// Evaluate nodes `range` without recording a tape.
    pub fn infer_range(
        &self,
        range: std::ops::Range<usize>,
        input: &Tensor,
        bn_mode: BnMode,
        precision: Precision,
    ) -> Result<Tensor> {
        let mut a = input.clone();
        for layer in &self.layers[range] {
            a = layer.apply(&a, bn_mode)?;
            precision.round_in_place(a.data_mut());
        }
        Ok(a)
    }

    pub fn infer(&self, input: &Tensor, bn_mode: BnMode, precision: Precision) -> Result<Tensor> {
        self.infer_range(0..self.layers.len(), input, bn_mode, precision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Graph {
        Graph::new(vec![
            Layer::Conv2d(Conv2d {
                weight: Tensor::full(&[2, 1, 3, 3], 0.1),
                bias: Tensor::zeros(&[2]),
                padding: 1,
            }),
            Layer::BatchNorm(BatchNorm::new(2, 0.1, 1e-5)),
            Layer::Relu,
            Layer::Pool,
            Layer::Flatten,
            Layer::Dense(Dense {
                weight: Tensor::full(&[8, 3], 0.1),
                bias: Tensor::zeros(&[3]),
            }),
        ])
    }

    #[test]
    fn ids_number_parameterized_nodes() {
        let g = tiny();
        let ids: Vec<_> = (0..g.len()).map(|n| g.layer_id(n)).collect();
        assert_eq!(ids, [Some(LayerId(1)), Some(LayerId(2)), None, None, None, Some(LayerId(3))]);
        assert_eq!(g.node_of(LayerId(3)), Some(5));
        assert_eq!(g.parameterized_count(), 3);
        assert_eq!(g.param_count(), 18 + 2 + 4 + 24 + 3);
    }

    #[test]
    fn shapes_propagate_and_mismatches_fail() {
        let g = tiny();
        let s = g.activation_shapes(&[5, 1, 4, 4]).unwrap();
        assert_eq!(s[4], vec![5, 2, 2, 2]);
        assert_eq!(s.last().unwrap(), &vec![5, 3]);
        assert!(g.activation_shapes(&[5, 2, 4, 4]).is_err());
        assert!(g.check_trainable(&[LayerId(4)].into()).is_err());
    }

    #[test]
    fn running_update_uses_unbiased_variance() {
        let mut bn = BatchNorm::new(1, 0.5, 1e-5);
        bn.update_running(&BatchStats {
            node: 0,
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        });
        assert_eq!(bn.running_mean.data(), &[1.0]);
        assert_eq!(bn.running_var.data(), &[1.5]);
    }
}
