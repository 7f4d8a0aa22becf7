//! Backpropagation memory: the analytic per-layer model
//! `cost = Σ_{l ∈ plan} (m(θ_l) + m(a_l)·B)` and the bytes a tape actually holds.
//!
//! Measured retention is split into two columns:
//!
//! - **weight-grad**: tensors a trainable layer needs for its own parameter
//!   gradients. For dense/conv this is the layer input `a_l`; for BN it is the
//!   normalized input, which has the same size. This column must equal the
//!   analytic `m(a_l)·B` term exactly.
//! - **pass-through**: tensors kept only to carry the gradient through a
//!   downstream node (ReLU masks, pool indices, BN batch statistics). They are
//!   not part of the analytic total; `pass_through_unbatched_bytes` isolates the
//!   per-channel BN statistics, the only retained tensors that do not scale with `B`.
//!
//! Adam moment buffers (two per trainable parameter) are reported separately.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{BnMode, ForwardOptions, LayerId, OpKind, Precision, Tape, Tensor, TrainableSet};
use crate::error::{Error, Result};
use crate::nn::Model;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemoryRow {
    pub node: usize,
    pub layer_id: Option<LayerId>,
    pub kind: OpKind,
    pub trainable: bool,
    /// `m(θ_l)`.
    pub param_bytes: u64,
    /// `m(a_l)·B` if the layer is trainable, else 0.
    pub analytic_activation_bytes: u64,
    pub measured_weight_grad_bytes: Option<u64>,
    pub measured_pass_through_bytes: Option<u64>,
    pub measured_pass_through_unbatched_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTotals {
    /// All model parameters (constant during adaptation).
    pub model_param_bytes: u64,
    pub trainable_param_bytes: u64,
    /// `Σ_{l ∈ plan} m(a_l)·B`.
    pub analytic_activation_bytes: u64,
    /// `Σ_{l ∈ plan} (m(θ_l) + m(a_l)·B)`.
    pub analytic_cost_bytes: u64,
    /// Adam first and second moments.
    pub optimizer_state_bytes: u64,
    /// Model parameters + analytic activations + optimizer state.
    pub predicted_total_bytes: u64,
    pub measured_weight_grad_bytes: Option<u64>,
    pub measured_pass_through_bytes: Option<u64>,
    /// Model parameters + all measured retention + optimizer state.
    pub measured_total_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub batch_size: usize,
    pub element_bytes: u64,
    pub trainable_layers: Vec<LayerId>,
    pub rows: Vec<LayerMemoryRow>,
    pub totals: MemoryTotals,
}

/// Bytes retained by one tape, per node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredMemory {
    pub batch_size: usize,
    pub element_bytes: u64,
    pub rows: Vec<MeasuredRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredRow {
    pub node: usize,
    pub layer_id: Option<LayerId>,
    pub kind: OpKind,
    pub weight_grad_bytes: u64,
    pub pass_through_bytes: u64,
    pub pass_through_unbatched_bytes: u64,
}

impl MeasuredMemory {
    pub fn weight_grad_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.weight_grad_bytes).sum()
    }

    pub fn pass_through_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.pass_through_bytes).sum()
    }

    pub fn pass_through_unbatched_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.pass_through_unbatched_bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.weight_grad_bytes() + self.pass_through_bytes()
    }
}

/// Analytic prediction from shape algebra alone.
pub fn predict_cost(
    model: &Model,
    trainable: &TrainableSet,
    batch_size: usize,
    precision: Precision,
) -> Result<MemoryReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    model.graph().check_trainable(trainable)?;
    let width = precision.bytes();
    let per_sample = model.graph().activation_shapes(&model.batch_shape(1))?;
    let rows: Vec<LayerMemoryRow> = model
        .graph()
        .layers()
        .iter()
        .enumerate()
        .map(|(node, layer)| {
            let layer_id = model.graph().layer_id(node);
            let trainable = layer_id.is_some_and(|id| trainable.contains(&id));
            let a_l: usize = per_sample[node].iter().product();
            LayerMemoryRow {
                node,
                layer_id,
                kind: layer.kind(),
                trainable,
                param_bytes: layer.param_count() as u64 * width,
                analytic_activation_bytes: if trainable {
                    a_l as u64 * width * batch_size as u64
                } else {
                    0
                },
                measured_weight_grad_bytes: None,
                measured_pass_through_bytes: None,
                measured_pass_through_unbatched_bytes: None,
            }
        })
        .collect();

    let model_param_bytes: u64 = rows.iter().map(|r| r.param_bytes).sum();
    let trainable_param_bytes: u64 = rows.iter().filter(|r| r.trainable).map(|r| r.param_bytes).sum();
    let analytic_activation_bytes: u64 = rows.iter().map(|r| r.analytic_activation_bytes).sum();
    let optimizer_state_bytes = 2 * trainable_param_bytes;
    Ok(MemoryReport {
        batch_size,
        element_bytes: width,
        trainable_layers: trainable.iter().copied().collect(),
        rows,
        totals: MemoryTotals {
            model_param_bytes,
            trainable_param_bytes,
            analytic_activation_bytes,
            analytic_cost_bytes: trainable_param_bytes + analytic_activation_bytes,
            optimizer_state_bytes,
            predicted_total_bytes: model_param_bytes + analytic_activation_bytes + optimizer_state_bytes,
            measured_weight_grad_bytes: None,
            measured_pass_through_bytes: None,
            measured_total_bytes: None,
        },
    })
}

/// Aggregate what a tape retained.
pub fn measure_cost(tape: &Tape) -> MeasuredMemory {
    MeasuredMemory {
        batch_size: tape.batch_size(),
        element_bytes: tape.precision().bytes(),
        rows: tape
            .nodes()
            .iter()
            .map(|n| MeasuredRow {
                node: n.node,
                layer_id: n.layer,
                kind: n.op,
                weight_grad_bytes: n.weight_grad_bytes(),
                pass_through_bytes: n.pass_through_bytes(),
                pass_through_unbatched_bytes: n.unbatched_bytes(),
            })
            .collect(),
    }
}

impl MemoryReport {
    /// Fill the measured columns from a tape recorded under the same plan.
    pub fn attach_measured(&mut self, measured: &MeasuredMemory) -> Result<()> {
        if measured.rows.len() != self.rows.len()
            || measured.batch_size != self.batch_size
            || measured.element_bytes != self.element_bytes
        {
            return Err(Error::Usage(
                "measured memory does not match the predicted report (graph, batch or width)".into(),
            ));
        }
        for (row, m) in self.rows.iter_mut().zip(&measured.rows) {
            row.measured_weight_grad_bytes = Some(m.weight_grad_bytes);
            row.measured_pass_through_bytes = Some(m.pass_through_bytes);
            row.measured_pass_through_unbatched_bytes = Some(m.pass_through_unbatched_bytes);
        }
        let t = &mut self.totals;
        t.measured_weight_grad_bytes = Some(measured.weight_grad_bytes());
        t.measured_pass_through_bytes = Some(measured.pass_through_bytes());
        t.measured_total_bytes = Some(t.model_param_bytes + measured.total_bytes() + t.optimizer_state_bytes);
        Ok(())
    }

    /// Measured weight-grad bytes equal the analytic activation term, row by row.
    pub fn reconciles(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.measured_weight_grad_bytes == Some(r.analytic_activation_bytes))
    }

    /// Retained activation bytes (weight-grad + pass-through), if measured.
    pub fn measured_activation_bytes(&self) -> Option<u64> {
        Some(self.totals.measured_weight_grad_bytes? + self.totals.measured_pass_through_bytes?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "batch size {}, {}-byte elements, trainable {:?}",
            self.batch_size,
            self.element_bytes,
            self.trainable_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>()
        );
        let _ = writeln!(
            s,
            "{:>4} {:>5} {:<10} {:>5} {:>10} {:>14} {:>14} {:>14}",
            "node", "layer", "kind", "train", "m(θ)", "m(a)·B", "weight-grad", "pass-through"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>4} {:>5} {:<10} {:>5} {:>10} {:>14} {:>14} {:>14}",
                r.node,
                r.layer_id.map_or_else(|| "-".into(), |l| l.to_string()),
                r.kind.name(),
                if r.trainable { "yes" } else { "no" },
                r.param_bytes,
                r.analytic_activation_bytes,
                opt(r.measured_weight_grad_bytes),
                opt(r.measured_pass_through_bytes),
            );
        }
        let t = &self.totals;
        let _ = writeln!(s, "model parameters      {:>14}", t.model_param_bytes);
        let _ = writeln!(s, "analytic cost         {:>14}", t.analytic_cost_bytes);
        let _ = writeln!(s, "optimizer state       {:>14}", t.optimizer_state_bytes);
        let _ = writeln!(s, "predicted total       {:>14}", t.predicted_total_bytes);
        let _ = writeln!(s, "measured weight-grad  {:>14}", opt(t.measured_weight_grad_bytes));
        let _ = writeln!(s, "measured pass-through {:>14}", opt(t.measured_pass_through_bytes));
        let _ = writeln!(s, "measured total        {:>14}", opt(t.measured_total_bytes));
        s
    }
}

/// Predict, then measure with one recorded forward pass over a zero batch.
pub fn audit(
    model: &Model,
    trainable: &TrainableSet,
    bn_mode: BnMode,
    batch_size: usize,
    precision: Precision,
) -> Result<MemoryReport> {
    let mut report = predict_cost(model, trainable, batch_size, precision)?;
    let input = Tensor::zeros(&model.batch_shape(batch_size));
    let out = model.forward(&input, trainable, &ForwardOptions::new(bn_mode).with_precision(precision))?;
    report.attach_measured(&measure_cost(&out.tape))?;
    Ok(report)
}
