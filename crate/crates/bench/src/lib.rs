//! Fixtures shared by the engine benchmarks.

use foctta_core::nn::{build_reference_cnn, ReferenceCnnConfig};
use foctta_core::{rng, Model, Tensor};

/// Default reference CNN with a fixed initialization.
pub fn reference_model() -> Model {
    build_reference_cnn(&ReferenceCnnConfig::default()).expect("default config builds")
}

/// Standard-normal tensor from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::rng(seed))
}

/// A batch of `b` inputs for `model`.
pub fn input_batch(model: &Model, b: usize) -> Tensor {
    random_tensor(&model.batch_shape(b), b as u64)
}
