//! Dense tensors, op kernels, static graphs and the recording tape.

pub mod graph;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use graph::{
    BatchNorm, BatchStats, BnMode, Conv2d, Dense, Graph, Layer, LayerId, OpKind, ParamId, ParamRole, TrainableSet,
};
pub use tape::{
    analyze_retention, forward, input_grad_slots, weight_grad_slots, ForwardOptions, ForwardOutput, Gradients,
    LossGrad, NodeRetention, Purpose, RetentionMap, SavedTensor, Slot, Tape, TapeNode, TensorId,
};
pub use tensor::{Precision, Tensor};
