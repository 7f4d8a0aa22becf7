//! Warm-up profiling and layer selection.
//!
//! The warm-up fine-tunes `g_s` (classifier frozen) on augmented source data
//! and records, after every batch, the gradient norm of each representation
//! layer. A layer's score is the log of its mean per-batch norm. The plan then
//! keeps the `M = max(1, ⌈α·L_rep⌉)` best-scoring layers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ctta::loss::cross_entropy;
use crate::ctta::optim::{Adam, AdamConfig};
use crate::data::{augment, default_recipe, Dataset, Recipe};
use crate::engine::{BnMode, ForwardOptions, LayerId, LossGrad, Tensor, TrainableSet};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    GradNorm,
    L1Norm,
    WeightNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradNormKind {
    L1,
    #[default]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Raw,
    Log,
    MaxShiftedLog,
}

/// Serialize non-finite scores as `null` and read `null` back as `-∞`.
mod nullable_scores {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

/// One score per representation layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub layer_ids: Vec<LayerId>,
    #[serde(with = "nullable_scores")]
    pub scores: Vec<f64>,
    pub metric: Metric,
    pub batches_seen: usize,
    pub normalization: Normalization,
}

impl ImportanceVector {
    /// `s_l = ln((1/N) Σ_n ‖∇θ_l‖_n)`; a zero mean gives `-∞`.
    pub fn from_batch_norms(layer_ids: Vec<LayerId>, per_batch: &[Vec<f64>]) -> Result<Self> {
        if per_batch.is_empty() {
            return Err(Error::Profiling("no warm-up batches were recorded".into()));
        }
        if per_batch.iter().any(|b| b.len() != layer_ids.len()) {
            return Err(Error::Internal("per-batch norms do not cover every layer".into()));
        }
        let n = per_batch.len() as f64;
        let scores = (0..layer_ids.len())
            .map(|l| (per_batch.iter().map(|b| b[l]).sum::<f64>() / n).ln())
            .collect();
        Ok(ImportanceVector {
            layer_ids,
            scores,
            metric: Metric::GradNorm,
            batches_seen: per_batch.len(),
            normalization: Normalization::Log,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Log scale with the maximum shifted to 0.
    pub fn max_shifted_log(&self) -> Vec<f64> {
        let logs: Vec<f64> = match self.normalization {
            Normalization::Raw => self.scores.iter().map(|s| s.ln()).collect(),
            Normalization::Log => self.scores.clone(),
            Normalization::MaxShiftedLog => return self.scores.clone(),
        };
        let max = logs.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        logs.iter().map(|v| v - max).collect()
    }

    /// Layer ids ordered best first: higher score, then smaller id. NaN and
    /// `-∞` rank last.
    pub fn ranking(&self) -> Vec<LayerId> {
        let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            key(self.scores[b])
                .total_cmp(&key(self.scores[a]))
                .then(self.layer_ids[a].cmp(&self.layer_ids[b]))
        });
        idx.into_iter().map(|i| self.layer_ids[i]).collect()
    }

    pub fn ranked_table(&self) -> String {
        let shifted = self.max_shifted_log();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "metric {:?}, {} batch(es)\n{:>4} {:>6} {:>12} {:>12}",
            self.metric, self.batches_seen, "rank", "layer", "score", "shifted"
        );
        for (rank, id) in self.ranking().into_iter().enumerate() {
            let i = self.layer_ids.iter().position(|&l| l == id).unwrap();
            let _ = writeln!(
                s,
                "{:>4} {:>6} {:>12.4} {:>12.4}",
                rank + 1,
                id.to_string(),
                self.scores[i],
                shifted[i]
            );
        }
        s
    }
}

/// Mean absolute weight per representation layer.
pub fn score_l1(model: &Model) -> ImportanceVector {
    weight_metric(model, Metric::L1Norm, |w| w.l1_norm() / w.numel() as f64)
}

/// L2 norm of each representation layer's weight.
pub fn score_weight_norm(model: &Model) -> ImportanceVector {
    weight_metric(model, Metric::WeightNorm, Tensor::l2_norm)
}

fn weight_metric(model: &Model, metric: Metric, f: impl Fn(&Tensor) -> f64) -> ImportanceVector {
    let layer_ids = model.representation_layers();
    let scores = layer_ids.iter().map(|&id| f(model.layer_params(id)[0])).collect();
    ImportanceVector {
        layer_ids,
        scores,
        metric,
        batches_seen: 0,
        normalization: Normalization::Raw,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub recipe: Recipe,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub norm: GradNormKind,
    /// Keep the fine-tuned `g_s` (and its BN running statistics).
    pub keep_weights: bool,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            recipe: default_recipe(),
            epochs: 1,
            lr: 0.00025,
            batch_size: 32,
            norm: GradNormKind::L2,
            keep_weights: false,
            seed: 0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("warm-up epochs and batch size must be >= 1".into()));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// Profile `model` on augmented `data`. Parameters are restored afterwards
/// unless `cfg.keep_weights` is set.
pub fn warmup(model: &mut Model, data: &Dataset, cfg: &WarmupConfig) -> Result<ImportanceVector> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Profiling("warm-up dataset is empty".into()));
    }
    let pristine = (!cfg.keep_weights).then(|| model.clone());
    let layer_ids = model.representation_layers();
    let trainable: TrainableSet = model.feature_extractor().iter().filter_map(|d| d.layer_id).collect();
    let mut adam = Adam::new(
        AdamConfig::with_lr(cfg.lr),
        model.graph(),
        model.graph().param_ids().into_iter().filter(|p| trainable.contains(&p.layer)),
    )?;
    let side = data.image_shape()[1];
    let aug_seed = rng::derive_seed(cfg.seed, "warmup-augment");
    let mut order_rng = rng::rng(rng::derive_seed(cfg.seed, "warmup-order"));
    let mut opts = ForwardOptions::new(BnMode::UseBatchStats);
    opts.collect_batch_stats = cfg.keep_weights;
    let mut per_batch = Vec::new();
    let mut counter = 0u64;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut pixels = Vec::with_capacity(chunk.len() * data.image_len());
            for &i in chunk {
                pixels.extend(augment(data.image(i), side, &cfg.recipe, rng::item_seed(aug_seed, counter)));
                counter += 1;
            }
            let (_, labels) = data.batch(chunk);
            let x = Tensor::new(model.batch_shape(chunk.len()), pixels)?;
            let out = model.forward(&x, &trainable, &opts)?;
            let (loss, grad) = cross_entropy(&out.output, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("warm-up loss became {loss} at batch {}", per_batch.len())));
            }
            let grads = out.tape.backward(model.graph(), &LossGrad::new(loss, grad))?;
            per_batch.push(
                layer_ids
                    .iter()
                    .map(|&id| {
                        let parts = grads.layer(id);
                        match cfg.norm {
                            GradNormKind::L2 => parts.map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt(),
                            GradNormKind::L1 => parts.map(Tensor::l1_norm).sum(),
                        }
                    })
                    .collect(),
            );
            adam.step(model.graph_mut(), &grads)?;
            if cfg.keep_weights {
                model.update_running_stats(&out.batch_stats);
            }
        }
    }
    if let Some(p) = pristine {
        *model = p;
    }
    ImportanceVector::from_batch_norms(layer_ids, &per_batch)
}

/// `max(1, ⌈α·L⌉)`; products within `1e-9` of an integer count as that integer.
pub fn layer_budget(alpha: f64, layers: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    Ok(((alpha * layers as f64 - 1e-9).ceil() as usize).clamp(1, layers.max(1)))
}

/// The `M` best layers, returned in ascending id order.
pub fn select_topk(scores: &ImportanceVector, alpha: f64) -> Result<Vec<LayerId>> {
    if scores.is_empty() {
        return Err(Error::Plan("importance vector is empty".into()));
    }
    let m = layer_budget(alpha, scores.len())?;
    let mut chosen: Vec<LayerId> = scores.ranking().into_iter().take(m).collect();
    chosen.sort();
    Ok(chosen)
}

/// `k` representation layers drawn uniformly without replacement.
pub fn random_k(model: &Model, k: usize, seed: u64) -> Result<Vec<LayerId>> {
    let mut layers = model.representation_layers();
    if k == 0 || k > layers.len() {
        return Err(Error::Plan(format!("cannot draw {k} of {} representation layers", layers.len())));
    }
    layers.shuffle(&mut rng::rng(rng::derive_seed(seed, "random-k")));
    let mut chosen = layers[..k].to_vec();
    chosen.sort();
    Ok(chosen)
}

/// Trainable layer set plus the hyperparameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationPlan {
    pub selected: Vec<LayerId>,
    pub metric: Metric,
    pub alpha: f64,
    pub lambda: f64,
    /// Absolute entropy threshold `H0`.
    pub h0: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub bn_mode: BnMode,
    pub importance: Option<ImportanceVector>,
    /// sha256 of the checkpoint the plan was profiled on.
    #[serde(default)]
    pub checkpoint_hash: Option<String>,
}

impl AdaptationPlan {
    pub fn trainable(&self) -> TrainableSet {
        self.selected.iter().copied().collect()
    }

    /// Reject plans that name unknown or non-representation layers.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        let reps = model.representation_layers();
        for id in &self.selected {
            if !reps.contains(id) {
                return Err(Error::Plan(format!("{id} is not a representation layer of this model")));
            }
        }
        if self.batch_size == 0 || !(self.h0 > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Plan("plan needs batch size >= 1, H0 > 0 and λ >= 0".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Artifact(format!("{} is not a plan: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_reference_cnn, ReferenceCnnConfig};

    fn iv(scores: Vec<f64>) -> ImportanceVector {
        ImportanceVector {
            layer_ids: (1..=scores.len()).map(LayerId).collect(),
            scores,
            metric: Metric::GradNorm,
            batches_seen: 1,
            normalization: Normalization::Log,
        }
    }

    #[test]
    fn score_is_log_of_mean() {
        let e = std::f64::consts::E;
        let v = ImportanceVector::from_batch_norms(vec![LayerId(1)], &[vec![e], vec![e], vec![e]]).unwrap();
        assert!((v.scores[0] - 1.0).abs() < 1e-15);
        let v = ImportanceVector::from_batch_norms(vec![LayerId(1)], &[vec![1.0], vec![3.0]]).unwrap();
        assert!((v.scores[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_batches_is_a_profiling_error() {
        assert!(matches!(
            ImportanceVector::from_batch_norms(vec![LayerId(1)], &[]),
            Err(Error::Profiling(_))
        ));
    }

    #[test]
    fn zero_gradient_ranks_last_and_round_trips_as_null() {
        let v = ImportanceVector::from_batch_norms(vec![LayerId(1), LayerId(2)], &[vec![0.0, 0.1]]).unwrap();
        assert_eq!(v.scores[0], f64::NEG_INFINITY);
        assert_eq!(v.ranking(), vec![LayerId(2), LayerId(1)]);
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("null"));
        let back: ImportanceVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn weight_metrics_on_known_weights() {
        let mut m = build_reference_cnn(&ReferenceCnnConfig::default()).unwrap();
        let id = m.representation_layers()[0];
        let w = m
            .graph_mut()
            .param_mut(crate::engine::ParamId {
                layer: id,
                role: crate::engine::ParamRole::Weight,
            })
            .unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.data_mut()[..3].copy_from_slice(&[1.0, -1.0, 2.0]);
        let n = w.numel() as f64;
        assert!((score_l1(&m).scores[0] - 4.0 / n).abs() < 1e-15);
        assert!((score_weight_norm(&m).scores[0] - 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn budget_rule() {
        assert_eq!(layer_budget(0.1, 20).unwrap(), 2);
        assert_eq!(layer_budget(0.1, 3).unwrap(), 1);
        assert_eq!(layer_budget(0.1, 30).unwrap(), 3);
        assert_eq!(layer_budget(1.0, 3).unwrap(), 3);
        assert!(matches!(layer_budget(0.0, 3), Err(Error::Config(_))));
        assert!(matches!(layer_budget(1.5, 3), Err(Error::Config(_))));
    }

    #[test]
    fn ties_prefer_the_smaller_id() {
        assert_eq!(select_topk(&iv(vec![1.0, 2.0, 2.0, 0.5]), 0.25).unwrap(), vec![LayerId(2)]);
        assert_eq!(
            select_topk(&iv(vec![1.0, 2.0, 2.0, 0.5]), 0.75).unwrap(),
            vec![LayerId(1), LayerId(2), LayerId(3)]
        );
    }

    #[test]
    fn max_shifted_log_puts_best_at_zero() {
        let v = iv(vec![-1.0, 2.0, 0.5]);
        assert_eq!(v.max_shifted_log(), vec![-3.0, 0.0, -1.5]);
    }

    #[test]
    fn random_k_draws_representation_layers_only() {
        let m = build_reference_cnn(&ReferenceCnnConfig::default()).unwrap();
        for seed in 0..20 {
            let k = random_k(&m, 1, seed).unwrap();
            assert!(m.representation_layers().contains(&k[0]));
        }
        assert!(random_k(&m, 4, 0).is_err());
    }
}
