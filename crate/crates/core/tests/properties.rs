use foctta_core::ctta::{entropy_loss, Adam, AdamConfig};
use foctta_core::data::corrupt::{corrupt, CorruptionKind};
use foctta_core::data::shapes::render_item;
use foctta_core::data::{DomainStream, StreamSpec};
use foctta_core::memory::{audit, predict_cost};
use foctta_core::nn::{build_reference_cnn, load_checkpoint, save_checkpoint, CheckpointMeta, ReferenceCnnConfig};
use foctta_core::{BnMode, LayerId, Model, Precision, Tensor, TrainableSet};
use proptest::prelude::*;

fn small_cnn(seed: u64) -> Model {
    build_reference_cnn(&ReferenceCnnConfig {
        widths: vec![4, 8],
        classes: 3,
        seed,
        ..ReferenceCnnConfig::default()
    })
    .unwrap()
}

fn mask_to_set(model: &Model, mask: u32) -> TrainableSet {
    model.all_layers().into_iter().filter(|id| mask >> (id.0 - 1) & 1 == 1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn analytic_activation_is_linear_in_batch(mask in 0u32..32, b in 1usize..40) {
        let model = small_cnn(0);
        let t = mask_to_set(&model, mask);
        let one = predict_cost(&model, &t, 1, Precision::F32).unwrap();
        let many = predict_cost(&model, &t, b, Precision::F32).unwrap();
        prop_assert_eq!(many.totals.analytic_activation_bytes, b as u64 * one.totals.analytic_activation_bytes);
        prop_assert_eq!(many.totals.optimizer_state_bytes, 2 * many.totals.trainable_param_bytes);
        prop_assert_eq!(many.totals.model_param_bytes, one.totals.model_param_bytes);
    }

    #[test]
    fn measured_weight_grad_matches_prediction(mask in 0u32..32, b in 1usize..12, batch_stats in any::<bool>()) {
        let model = small_cnn(1);
        let t = mask_to_set(&model, mask);
        let bn = if batch_stats { BnMode::UseBatchStats } else { BnMode::UseRunningStats };
        let r = audit(&model, &t, bn, b, Precision::F64).unwrap();
        prop_assert!(r.reconciles());
        prop_assert_eq!(r.totals.measured_weight_grad_bytes, Some(r.totals.analytic_activation_bytes));
    }

    #[test]
    fn entropy_is_bounded_and_filter_respects_threshold(
        logits in prop::collection::vec(-8.0f64..8.0, 12),
        h0 in 0.05f64..1.2,
    ) {
        let z = Tensor::new(vec![3, 4], logits).unwrap();
        let all = entropy_loss(&z, None).unwrap();
        for &h in &all.entropies {
            prop_assert!(h >= -1e-15 && h <= 4f64.ln() + 1e-12);
        }
        let filtered = entropy_loss(&z, Some(h0)).unwrap();
        for (k, h) in filtered.kept.iter().zip(&filtered.entropies) {
            prop_assert_eq!(*k, *h < h0);
        }
    }

    #[test]
    fn severity_zero_is_identity(kind in 0usize..5, seed in any::<u64>()) {
        let mut img = vec![0.0; 256];
        render_item(10, seed, kind, &mut img);
        let out = corrupt(&img, 16, CorruptionKind::ALL[kind], 0, seed).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn stream_batches_cover_every_sample(n in 1usize..40, b in 1usize..17) {
        let stream = DomainStream::new(StreamSpec::all_kinds(3, n), 3, 7).unwrap();
        let batches = stream.batches(b).unwrap();
        prop_assert_eq!(batches.len(), 5 * n.div_ceil(b));
        prop_assert_eq!(batches.iter().map(|x| x.len()).sum::<usize>(), 5 * n);
        prop_assert!(batches.iter().all(|x| x.len() <= b));
    }
}

#[test]
fn adam_leaves_unlisted_parameters_alone() {
    let mut model = small_cnn(2);
    let target = LayerId(3);
    let before = model.clone();
    let t: TrainableSet = [target].into();
    let x = Tensor::full(&model.batch_shape(4), 0.3);
    let out = model
        .forward(&x, &t, &foctta_core::engine::tape::ForwardOptions::new(BnMode::UseBatchStats))
        .unwrap();
    let seed = foctta_core::engine::tape::LossGrad::new(0.0, Tensor::full(out.output.shape(), 1.0));
    let grads = out.tape.backward(model.graph(), &seed).unwrap();
    let ids: Vec<_> = grads.keys().collect();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), model.graph(), ids).unwrap();
    adam.step(model.graph_mut(), &grads).unwrap();
    for id in model.all_layers() {
        let same = model.layer_params(id) == before.layer_params(id);
        assert_eq!(same, id != target, "{id}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let model = small_cnn(3);
    save_checkpoint(&path, &model, CheckpointMeta::default()).unwrap();
    let (back, _) = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let x = Tensor::full(&model.batch_shape(2), 0.7);
    let a = model.predict(&x, BnMode::UseRunningStats).unwrap();
    let b = back.predict(&x, BnMode::UseRunningStats).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
