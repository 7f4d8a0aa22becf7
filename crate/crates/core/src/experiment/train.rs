//! Supervised pretraining of the reference CNN on clean source data.

use rand::seq::SliceRandom;

use crate::ctta::loss::{argmax_rows, cross_entropy};
use crate::ctta::{Adam, AdamConfig};
use crate::data::Dataset;
use crate::engine::{BnMode, ForwardOptions, LossGrad};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng;

use super::config::PretrainConfig;

/// Train every layer with batch statistics, updating BN running statistics
/// after each batch. Returns the mean loss of the last epoch.
pub fn pretrain(model: &mut Model, data: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let trainable = model.all_layers();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.graph(), model.graph().param_ids())?;
    let mut order_rng = rng::rng(seed);
    let mut opts = ForwardOptions::new(BnMode::UseBatchStats);
    opts.collect_batch_stats = true;
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch(chunk);
            let out = model.forward(&x, &trainable, &opts)?;
            let (loss, grad) = cross_entropy(&out.output, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss became {loss} in epoch {epoch}")));
            }
            let grads = out.tape.backward(model.graph(), &LossGrad::new(loss, grad))?;
            adam.step(model.graph_mut(), &grads)?;
            model.update_running_stats(&out.batch_stats);
            total += loss;
            batches += 1;
        }
        last = total / batches.max(1) as f64;
    }
    Ok(last)
}

/// Accuracy with running statistics, evaluated in batches of `batch`.
pub fn accuracy(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk);
        let pred = argmax_rows(&model.predict(&x, BnMode::UseRunningStats)?)?;
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_source;
    use crate::nn::{build_reference_cnn, ReferenceCnnConfig};

    fn setup() -> (Model, Dataset) {
        let model = build_reference_cnn(&ReferenceCnnConfig {
            widths: vec![4, 8, 8],
            classes: 3,
            ..ReferenceCnnConfig::default()
        })
        .unwrap();
        (model, generate_source(240, 3, 11).unwrap())
    }

    #[test]
    fn pretraining_learns_and_is_reproducible() {
        let (init, data) = setup();
        let cfg = PretrainConfig {
            epochs: 6,
            ..PretrainConfig::default()
        };
        let before = accuracy(&init, &data, 64).unwrap();
        let (mut a, mut b) = (init.clone(), init);
        let la = pretrain(&mut a, &data, &cfg, 5).unwrap();
        let lb = pretrain(&mut b, &data, &cfg, 5).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a, b);
        let after = accuracy(&a, &data, 64).unwrap();
        assert!(after > before.max(0.5), "{before} -> {after}");
    }
}
