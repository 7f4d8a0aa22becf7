//! Recording forward pass, selective activation retention and reverse sweep.
//!
//! Each node decides at forward time which tensors survive until backward.
//! A tensor is kept only if some gradient the plan asks for cannot be formed
//! without it. The per-op requirements are:
//!
//! | op        | weight-grad needs | input-grad needs (batch stats) | input-grad needs (running stats) |
//! |-----------|-------------------|--------------------------------|----------------------------------|
//! | dense     | input `a_l`       | nothing (uses `W`)             | same                             |
//! | conv2d    | input `a_l`       | nothing (uses `W`)             | same                             |
//! | batchnorm | normalized `x̂`    | `x̂`, per-channel `1/σ`         | nothing (uses `γ`, running var)  |
//! | relu      | n/a               | output `y` (as mask)           | same                             |
//! | pool      | n/a               | argmax indices                 | same                             |
//! | flatten   | n/a               | nothing                        | same                             |
//!
//! Parameters and running statistics are never copied onto the tape; they are
//! read from the graph during backward. A node keeps its weight-grad set iff
//! its own layer is trainable, and its input-grad set iff a trainable layer
//! exists strictly upstream of it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::graph::{BatchStats, BnMode, Graph, Layer, LayerId, OpKind, ParamId, ParamRole, TrainableSet};
use crate::engine::ops;
use crate::engine::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Tensors a node can hold for its backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    Input,
    Normalized,
    InvStd,
    Output,
    ArgMax,
}

impl Slot {
    /// Whether the tensor has a leading batch dimension (scales with `B`).
    pub fn is_batched(self) -> bool {
        !matches!(self, Slot::InvStd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    /// Required to form this node's own parameter gradients.
    WeightGrad,
    /// Required only to propagate the gradient to a trainable layer upstream.
    PassThrough,
}

/// Handle of a saved tensor within a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId {
    pub node: usize,
    pub slot: Slot,
}

pub fn weight_grad_slots(kind: OpKind) -> &'static [Slot] {
    match kind {
        OpKind::Dense | OpKind::Conv2d => &[Slot::Input],
        OpKind::BatchNorm => &[Slot::Normalized],
        OpKind::Relu | OpKind::Pool | OpKind::Flatten => &[],
    }
}

pub fn input_grad_slots(kind: OpKind, bn_mode: BnMode) -> &'static [Slot] {
    match (kind, bn_mode) {
        (OpKind::BatchNorm, BnMode::UseBatchStats) => &[Slot::Normalized, Slot::InvStd],
        (OpKind::BatchNorm, BnMode::UseRunningStats) => &[],
        (OpKind::Relu, _) => &[Slot::Output],
        (OpKind::Pool, _) => &[Slot::ArgMax],
        (OpKind::Dense | OpKind::Conv2d | OpKind::Flatten, _) => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRetention {
    pub node: usize,
    pub kind: OpKind,
    pub needs_weight_grad: bool,
    pub needs_input_grad: bool,
    /// Saved slots, each tagged with the first purpose that requires it.
    pub saved: Vec<(Slot, Purpose)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionMap {
    pub nodes: Vec<NodeRetention>,
}

impl RetentionMap {
    pub fn saved_slots(&self, node: usize) -> BTreeSet<Slot> {
        self.nodes[node].saved.iter().map(|(s, _)| *s).collect()
    }

    pub fn total_saved(&self) -> usize {
        self.nodes.iter().map(|n| n.saved.len()).sum()
    }
}

/// Decide, per node, which tensors must be kept for the gradients `trainable` asks for.
pub fn analyze_retention(graph: &Graph, trainable: &TrainableSet, bn_mode: BnMode) -> Result<RetentionMap> {
    graph.check_trainable(trainable)?;
    let mut upstream_trainable = false;
    let mut nodes = Vec::with_capacity(graph.len());
    for (node, layer) in graph.layers().iter().enumerate() {
        let kind = layer.kind();
        let own = graph.layer_id(node).is_some_and(|id| trainable.contains(&id));
        let mut saved: Vec<(Slot, Purpose)> = Vec::new();
        if own {
            saved.extend(weight_grad_slots(kind).iter().map(|s| (*s, Purpose::WeightGrad)));
        }
        if upstream_trainable {
            for s in input_grad_slots(kind, bn_mode) {
                if !saved.iter().any(|(x, _)| x == s) {
                    saved.push((*s, Purpose::PassThrough));
                }
            }
        }
        nodes.push(NodeRetention {
            node,
            kind,
            needs_weight_grad: own,
            needs_input_grad: upstream_trainable,
            saved,
        });
        upstream_trainable |= own;
    }
    Ok(RetentionMap { nodes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedTensor {
    pub id: TensorId,
    pub purpose: Purpose,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapeNode {
    pub node: usize,
    pub op: OpKind,
    pub layer: Option<LayerId>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub needs_weight_grad: bool,
    pub needs_input_grad: bool,
    pub saved: Vec<SavedTensor>,
    element_bytes: u64,
}

impl TapeNode {
    pub fn retained_bytes(&self) -> u64 {
        self.bytes_where(|_| true)
    }

    pub fn weight_grad_bytes(&self) -> u64 {
        self.bytes_where(|s| s.purpose == Purpose::WeightGrad)
    }

    pub fn pass_through_bytes(&self) -> u64 {
        self.bytes_where(|s| s.purpose == Purpose::PassThrough)
    }

    /// Part of the retained bytes that does not scale with batch size (BN statistics).
    pub fn unbatched_bytes(&self) -> u64 {
        self.bytes_where(|s| !s.id.slot.is_batched())
    }

    fn bytes_where(&self, pred: impl Fn(&SavedTensor) -> bool) -> u64 {
        self.saved
            .iter()
            .filter(|s| pred(s))
            .map(|s| s.tensor.numel() as u64 * self.element_bytes)
            .sum()
    }

    fn get(&self, slot: Slot) -> Result<&Tensor> {
        self.saved
            .iter()
            .find(|s| s.id.slot == slot)
            .map(|s| &s.tensor)
            .ok_or_else(|| {
                Error::Internal(format!(
                    "node {} ({}) has no saved {:?}",
                    self.node,
                    self.op.name(),
                    slot
                ))
            })
    }
}

/// The record left by a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    trainable: TrainableSet,
    bn_mode: Option<BnMode>,
    precision: Precision,
    batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub bn_mode: BnMode,
    pub precision: Precision,
    /// Fail on NaN/Inf in any op output.
    pub check_finite: bool,
    /// Nodes whose outputs are copied out for the caller.
    pub capture: BTreeSet<usize>,
    /// Return per-BN-node batch statistics (for running-stat updates).
    pub collect_batch_stats: bool,
    /// Save according to this map instead of the minimal one. Gradient
    /// requirements still come from the trainable set.
    pub retention_override: Option<RetentionMap>,
}

impl ForwardOptions {
    pub fn new(bn_mode: BnMode) -> Self {
        ForwardOptions {
            bn_mode,
            precision: Precision::F64,
            check_finite: cfg!(debug_assertions),
            capture: BTreeSet::new(),
            collect_batch_stats: false,
            retention_override: None,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn capturing(mut self, nodes: impl IntoIterator<Item = usize>) -> Self {
        self.capture.extend(nodes);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub tape: Tape,
    pub captured: BTreeMap<usize, Tensor>,
    pub batch_stats: Vec<BatchStats>,
}

/// Run the graph on `input`, recording only what the trainable set requires.
pub fn forward(
    graph: &Graph,
    input: &Tensor,
    trainable: &TrainableSet,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    if input.rank() == 0 || input.batch() == 0 {
        return Err(Error::Shape("input needs a batch dimension >= 1".into()));
    }
    graph.activation_shapes(input.shape())?;
    let plan = analyze_retention(graph, trainable, opts.bn_mode)?;
    let keep = opts.retention_override.as_ref().unwrap_or(&plan);
    if keep.nodes.len() != graph.len() {
        return Err(Error::Usage("retention override does not match graph".into()));
    }

    let precision = opts.precision;
    let mut a = input.clone();
    precision.round_in_place(a.data_mut());
    let mut nodes = Vec::with_capacity(graph.len());
    let mut captured = BTreeMap::new();
    let mut batch_stats = Vec::new();

    for (node, layer) in graph.layers().iter().enumerate() {
        let wanted = &keep.nodes[node].saved;
        let purpose_of = |slot: Slot| wanted.iter().find(|(s, _)| *s == slot).map(|(_, p)| *p);
        let mut saved = Vec::new();
        let mut save = |slot: Slot, mut t: Tensor| {
            if let Some(purpose) = purpose_of(slot) {
                precision.round_in_place(t.data_mut());
                saved.push(SavedTensor {
                    id: TensorId { node, slot },
                    purpose,
                    tensor: t,
                });
            }
        };
        let input_shape = a.shape().to_vec();

        let mut y = match layer {
            Layer::Dense(d) => {
                let y = ops::dense_forward(&a, &d.weight, &d.bias)?;
                save(Slot::Input, a);
                y
            }
            Layer::Conv2d(c) => {
                let y = ops::conv2d_forward(&a, &c.weight, &c.bias, c.padding)?;
                save(Slot::Input, a);
                y
            }
            Layer::BatchNorm(b) => match opts.bn_mode {
                BnMode::UseBatchStats => {
                    let f = ops::bn_forward_batch(&a, &b.gamma, &b.beta, b.eps)?;
                    if opts.collect_batch_stats {
                        batch_stats.push(BatchStats {
                            node,
                            mean: f.mean,
                            var: f.var,
                            count: a.numel() / f.inv_std.numel(),
                        });
                    }
                    save(Slot::Normalized, f.normalized);
                    save(Slot::InvStd, f.inv_std);
                    f.output
                }
                BnMode::UseRunningStats => {
                    let (y, xhat) =
                        ops::bn_forward_running(&a, &b.gamma, &b.beta, &b.running_mean, &b.running_var, b.eps)?;
                    save(Slot::Normalized, xhat);
                    y
                }
            },
            Layer::Relu => {
                let y = ops::relu_forward(&a);
                if purpose_of(Slot::Output).is_some() {
                    save(Slot::Output, y.clone());
                }
                y
            }
            Layer::Pool => {
                let (y, arg) = ops::maxpool_forward(&a)?;
                save(Slot::ArgMax, arg);
                y
            }
            Layer::Flatten => {
                let shape = layer.output_shape(a.shape())?;
                a.reshape(shape)?
            }
        };
        precision.round_in_place(y.data_mut());
        if opts.check_finite && !y.is_finite() {
            return Err(Error::NonFinite {
                node,
                op: layer.kind().name(),
            });
        }
        if opts.capture.contains(&node) {
            captured.insert(node, y.clone());
        }
        nodes.push(TapeNode {
            node,
            op: layer.kind(),
            layer: graph.layer_id(node),
            input_shape,
            output_shape: y.shape().to_vec(),
            needs_weight_grad: plan.nodes[node].needs_weight_grad,
            needs_input_grad: plan.nodes[node].needs_input_grad,
            saved,
            element_bytes: precision.bytes(),
        });
        a = y;
    }

    Ok(ForwardOutput {
        tape: Tape {
            nodes,
            trainable: trainable.clone(),
            bn_mode: Some(opts.bn_mode),
            precision,
            batch_size: input.batch(),
        },
        output: a,
        captured,
        batch_stats,
    })
}

/// Gradient seed for a backward sweep: `∂L/∂output` plus optional extra
/// gradients added at intermediate node outputs (loss terms on hidden features).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub output_grad: Tensor,
    pub injected: BTreeMap<usize, Tensor>,
}

impl LossGrad {
    pub fn new(value: f64, output_grad: Tensor) -> Self {
        LossGrad {
            value,
            output_grad,
            injected: BTreeMap::new(),
        }
    }
}

/// Parameter gradients keyed by parameter id; frozen parameters are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    /// All gradient tensors of one layer (weight then bias, or γ then β).
    pub fn layer(&self, layer: LayerId) -> impl Iterator<Item = &Tensor> {
        self.map.iter().filter(move |(k, _)| k.layer == layer).map(|(_, v)| v)
    }

    fn insert(&mut self, layer: LayerId, role: ParamRole, t: Tensor) {
        self.map.insert(ParamId { layer, role }, t);
    }
}

impl Tape {
    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn trainable(&self) -> &TrainableSet {
        &self.trainable
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn bn_mode(&self) -> Option<BnMode> {
        self.bn_mode
    }

    pub fn retained_bytes(&self) -> u64 {
        self.nodes.iter().map(TapeNode::retained_bytes).sum()
    }

    /// Mutable access to a saved tensor. Intended for fault-injection tests.
    #[doc(hidden)]
    pub fn saved_tensor_mut(&mut self, id: TensorId) -> Option<&mut Tensor> {
        self.nodes
            .get_mut(id.node)?
            .saved
            .iter_mut()
            .find(|s| s.id == id)
            .map(|s| &mut s.tensor)
    }

    pub fn saved_ids(&self) -> Vec<TensorId> {
        self.nodes.iter().flat_map(|n| n.saved.iter().map(|s| s.id)).collect()
    }

    /// Reverse sweep. Returns gradients for exactly the trainable parameters.
    pub fn backward(&self, graph: &Graph, loss: &LossGrad) -> Result<Gradients> {
        let Some(bn_mode) = self.bn_mode else {
            return Err(Error::Usage("backward called before forward".into()));
        };
        if graph.len() != self.nodes.len() {
            return Err(Error::Usage(format!(
                "tape has {} nodes but graph has {}",
                self.nodes.len(),
                graph.len()
            )));
        }
        let last = self.nodes.last().expect("non-empty tape");
        if loss.output_grad.shape() != last.output_shape.as_slice() {
            return Err(Error::Shape(format!(
                "loss gradient {:?} does not match output {:?}",
                loss.output_grad.shape(),
                last.output_shape
            )));
        }

        let mut grads = Gradients::default();
        let mut g = loss.output_grad.clone();
        for tn in self.nodes.iter().rev() {
            if let Some(extra) = loss.injected.get(&tn.node) {
                g.add_assign(extra)?;
            }
            if !tn.needs_weight_grad && !tn.needs_input_grad {
                // Nothing trainable at or above this node.
                break;
            }
            let layer = &graph.layers()[tn.node];
            if layer.kind() != tn.op {
                return Err(Error::Usage(format!("graph node {} changed kind since forward", tn.node)));
            }
            if tn.needs_weight_grad {
                let id = tn.layer.expect("trainable nodes are parameterized");
                match layer {
                    Layer::Dense(_) => {
                        let (dw, db) = ops::dense_backward_params(tn.get(Slot::Input)?, &g)?;
                        grads.insert(id, ParamRole::Weight, dw);
                        grads.insert(id, ParamRole::Bias, db);
                    }
                    Layer::Conv2d(c) => {
                        let (dw, db) =
                            ops::conv2d_backward_params(tn.get(Slot::Input)?, c.weight.shape(), &g, c.padding)?;
                        grads.insert(id, ParamRole::Weight, dw);
                        grads.insert(id, ParamRole::Bias, db);
                    }
                    Layer::BatchNorm(_) => {
                        let (dgamma, dbeta) = ops::bn_backward_params(tn.get(Slot::Normalized)?, &g)?;
                        grads.insert(id, ParamRole::BnGamma, dgamma);
                        grads.insert(id, ParamRole::BnBeta, dbeta);
                    }
                    _ => return Err(Error::Internal("weight grad on parameter-free node".into())),
                }
            }
            if !tn.needs_input_grad {
                break;
            }
            g = match layer {
                Layer::Dense(d) => ops::dense_backward_input(&d.weight, &g)?,
                Layer::Conv2d(c) => ops::conv2d_backward_input(&tn.input_shape, &c.weight, &g, c.padding)?,
                Layer::BatchNorm(b) => match bn_mode {
                    BnMode::UseBatchStats => ops::bn_backward_input_batch(
                        tn.get(Slot::Normalized)?,
                        tn.get(Slot::InvStd)?,
                        &b.gamma,
                        &g,
                    )?,
                    BnMode::UseRunningStats => ops::bn_backward_input_running(&b.gamma, &b.running_var, b.eps, &g)?,
                },
                Layer::Relu => ops::relu_backward(tn.get(Slot::Output)?, &g)?,
                Layer::Pool => ops::maxpool_backward(tn.get(Slot::ArgMax)?, &tn.input_shape, &g)?,
                Layer::Flatten => g.reshape(tn.input_shape.clone())?,
            };
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::graph::Dense;

    fn mlp(widths: &[usize]) -> Graph {
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(Layer::Dense(Dense {
                weight: Tensor::full(&[w[0], w[1]], 0.1),
                bias: Tensor::zeros(&[w[1]]),
            }));
            layers.push(Layer::Relu);
        }
        layers.pop();
        Graph::new(layers)
    }

    #[test]
    fn backward_before_forward_is_a_usage_error() {
        let g = mlp(&[3, 1]);
        let err = Tape::default()
            .backward(&g, &LossGrad::new(0.0, Tensor::zeros(&[1, 1])))
            .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn frozen_plan_retains_nothing() {
        let g = mlp(&[4, 5, 3, 2]);
        let x = Tensor::full(&[2, 4], 0.5);
        let out = forward(&g, &x, &TrainableSet::new(), &ForwardOptions::new(BnMode::UseRunningStats)).unwrap();
        assert_eq!(out.tape.retained_bytes(), 0);
        let grads = out
            .tape
            .backward(&g, &LossGrad::new(0.0, Tensor::full(&[2, 2], 1.0)))
            .unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn linear_sum_gradient_is_the_input() {
        let g = Graph::new(vec![Layer::Dense(Dense {
            weight: Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        })]);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let trainable: TrainableSet = [LayerId(1)].into();
        let out = forward(&g, &x, &trainable, &ForwardOptions::new(BnMode::UseRunningStats)).unwrap();
        let grads = out
            .tape
            .backward(&g, &LossGrad::new(out.output.sum(), Tensor::full(&[1, 1], 1.0)))
            .unwrap();
        let dw = grads.get(ParamId { layer: LayerId(1), role: ParamRole::Weight }).unwrap();
        assert_eq!(dw.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn only_last_layer_trainable_keeps_only_its_input() {
        let g = mlp(&[4, 5, 3, 2]);
        let map = analyze_retention(&g, &[LayerId(3)].into(), BnMode::UseRunningStats).unwrap();
        assert_eq!(map.total_saved(), 1);
        assert_eq!(map.nodes[4].saved, vec![(Slot::Input, Purpose::WeightGrad)]);
    }

    #[test]
    fn unknown_layer_is_a_plan_error() {
        let g = mlp(&[4, 2]);
        assert!(matches!(
            analyze_retention(&g, &[LayerId(9)].into(), BnMode::UseRunningStats),
            Err(Error::Plan(_))
        ));
    }
}
