//! The adaptation loop and its baselines.
//!
//! For every incoming batch the live model first answers (and is scored
//! against the hidden labels), then takes one optimizer step on
//! `L_total = L_ent + λ·L_reg`. Nothing is reset between domains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{argmax_rows, entropy_loss, feature_l1};
use super::optim::{Adam, AdamConfig};
use crate::data::{DomainStream, StreamBatch};
use crate::engine::{BnMode, ForwardOptions, LayerId, LossGrad, Precision, Tensor, TrainableSet};
use crate::error::{Error, Result};
use crate::memory::{measure_cost, predict_cost, MemoryReport};
use crate::nn::{FrozenModel, Model};
use crate::warmup::{random_k, AdaptationPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyMode {
    Source,
    Focta,
    TentAllBn,
    FullFinetune,
    RandomK,
}

impl StrategyMode {
    pub const ALL: [StrategyMode; 5] = [
        StrategyMode::Source,
        StrategyMode::Focta,
        StrategyMode::TentAllBn,
        StrategyMode::FullFinetune,
        StrategyMode::RandomK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyMode::Source => "source",
            StrategyMode::Focta => "focta",
            StrategyMode::TentAllBn => "tent-all-bn",
            StrategyMode::FullFinetune => "full-finetune",
            StrategyMode::RandomK => "random-k",
        }
    }
}

impl fmt::Display for StrategyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// What the `L_reg` term compares between live and frozen model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegTarget {
    /// Output feature maps of the trainable layers.
    #[default]
    Features,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub mode: StrategyMode,
    /// Apply the entropy filter in tent-all-bn as well.
    pub tent_filtered: bool,
    pub reg_target: RegTarget,
    /// Seed for the random-k layer draw.
    pub random_k_seed: u64,
    pub precision: Precision,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: StrategyMode::Focta,
            tent_filtered: false,
            reg_target: RegTarget::Features,
            random_k_seed: 0,
            precision: Precision::F64,
        }
    }
}

impl RunOptions {
    pub fn mode(mode: StrategyMode) -> Self {
        RunOptions {
            mode,
            ..Default::default()
        }
    }
}

/// A mode resolved against a concrete model and plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub mode: StrategyMode,
    pub trainable: TrainableSet,
    pub bn_mode: BnMode,
    /// `None` disables the entropy filter.
    pub h0: Option<f64>,
    /// `None` disables the regularizer.
    pub lambda: Option<f64>,
    pub reg_target: RegTarget,
}

impl Strategy {
    pub fn resolve(model: &Model, plan: &AdaptationPlan, opts: &RunOptions) -> Result<Self> {
        let s = |trainable: TrainableSet, bn_mode, h0, lambda| Strategy {
            mode: opts.mode,
            trainable,
            bn_mode,
            h0,
            lambda,
            reg_target: opts.reg_target,
        };
        Ok(match opts.mode {
            StrategyMode::Source => s(TrainableSet::new(), BnMode::UseRunningStats, None, None),
            StrategyMode::Focta => {
                plan.check_against(model)?;
                s(plan.trainable(), plan.bn_mode, Some(plan.h0), Some(plan.lambda))
            }
            StrategyMode::RandomK => {
                plan.check_against(model)?;
                let k = random_k(model, plan.selected.len().max(1), opts.random_k_seed)?;
                s(k.into_iter().collect(), plan.bn_mode, Some(plan.h0), Some(plan.lambda))
            }
            StrategyMode::TentAllBn => s(
                model.bn_layers().into_iter().collect(),
                BnMode::UseBatchStats,
                opts.tent_filtered.then_some(plan.h0),
                None,
            ),
            StrategyMode::FullFinetune => s(model.all_layers(), BnMode::UseBatchStats, Some(plan.h0), None),
        })
    }

    /// Nodes whose outputs enter the feature regularizer.
    fn reg_nodes(&self, model: &Model) -> BTreeSet<usize> {
        match (self.lambda, self.reg_target) {
            (Some(_), RegTarget::Features) => self
                .trainable
                .iter()
                .filter_map(|&id| model.graph().node_of(id))
                .collect(),
            _ => BTreeSet::new(),
        }
    }
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub domain: String,
    pub severity: u8,
    #[serde(rename = "batch-error")]
    pub batch_error: f64,
    #[serde(rename = "kept-fraction")]
    pub kept_fraction: f64,
    #[serde(rename = "L_ent")]
    pub l_ent: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub segment: usize,
    pub domain: String,
    pub severity: u8,
    pub samples: usize,
    pub errors: usize,
    pub error_pct: f64,
}

pub const SUMMARY_FORMAT: &str = "foctta-run-summary";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format: String,
    pub mode: StrategyMode,
    pub batch_size: usize,
    pub trainable_layers: Vec<LayerId>,
    pub bn_mode: BnMode,
    pub steps: usize,
    /// Steps that applied an optimizer update.
    pub updates: usize,
    pub domains: Vec<DomainResult>,
    /// Mean of the per-domain error percentages.
    pub average_error_pct: f64,
    pub memory: MemoryReport,
    /// Lineage hashes filled in by the pipeline.
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
}

impl RunSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Live model, frozen reference and optimizer for one run.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub live: Model,
    pub frozen: FrozenModel,
    pub strategy: Strategy,
    pub optimizer: Adam,
    pub step: usize,
    pub updates: usize,
    errors: Vec<(usize, usize)>,
}

/// Per-step loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub l_ent: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub kept_fraction: f64,
    pub updated: bool,
}

impl AdaptationState {
    pub fn new(model: &Model, plan: &AdaptationPlan, opts: &RunOptions) -> Result<Self> {
        let strategy = Strategy::resolve(model, plan, opts)?;
        let optimizer = Adam::new(
            AdamConfig::with_lr(plan.lr),
            model.graph(),
            model
                .graph()
                .param_ids()
                .into_iter()
                .filter(|p| strategy.trainable.contains(&p.layer)),
        )?;
        Ok(AdaptationState {
            live: model.clone(),
            frozen: model.snapshot(),
            strategy,
            optimizer,
            step: 0,
            updates: 0,
            errors: Vec::new(),
        })
    }

    /// Answer for `images`, then adapt on them. Returns the predictions made
    /// before the update and the loss terms.
    pub fn step(
        &mut self,
        images: &Tensor,
        precision: Precision,
        mut on_tape: impl FnMut(&crate::engine::Tape),
    ) -> Result<(Vec<usize>, StepLoss)> {
        let st = &self.strategy;
        let reg_nodes = st.reg_nodes(&self.live);
        let opts = ForwardOptions::new(st.bn_mode)
            .with_precision(precision)
            .capturing(reg_nodes.iter().copied());
        let out = self.live.forward(images, &st.trainable, &opts)?;
        on_tape(&out.tape);
        let predictions = argmax_rows(&out.output)?;
        self.step += 1;
        if st.trainable.is_empty() {
            return Ok((predictions, StepLoss::skipped(1.0)));
        }
        let ent = entropy_loss(&out.output, st.h0)?;
        if ent.kept_count() == 0 {
            return Ok((predictions, StepLoss::skipped(0.0)));
        }
        let mut seed = LossGrad::new(0.0, ent.grad.clone());
        let mut l_reg = 0.0;
        if let Some(lambda) = st.lambda {
            match st.reg_target {
                RegTarget::Features => {
                    let frozen_opts = ForwardOptions::new(st.bn_mode)
                        .with_precision(precision)
                        .capturing(reg_nodes.iter().copied());
                    let reference = self.frozen.forward(images, &TrainableSet::new(), &frozen_opts)?;
                    let (v, grads) = feature_l1(&out.captured, &reference.captured, lambda)?;
                    l_reg = v;
                    seed.injected = grads;
                }
                RegTarget::Logits => {
                    let reference = self.frozen.forward(images, &TrainableSet::new(), &ForwardOptions::new(st.bn_mode).with_precision(precision))?;
                    let live = BTreeMap::from([(usize::MAX, out.output.clone())]);
                    let frozen = BTreeMap::from([(usize::MAX, reference.output)]);
                    let (v, grads) = feature_l1(&live, &frozen, lambda)?;
                    l_reg = v;
                    seed.output_grad.add_assign(&grads[&usize::MAX])?;
                }
            }
        }
        let lambda = st.lambda.unwrap_or(0.0);
        let l_total = ent.value + lambda * l_reg;
        let loss = StepLoss {
            l_ent: ent.value,
            l_reg,
            l_total,
            kept_fraction: ent.kept_fraction(),
            updated: true,
        };
        if !l_total.is_finite() {
            return Err(Error::Divergence {
                step: self.step - 1,
                domain: String::new(),
                l_ent: ent.value,
                l_reg,
                l_total,
            });
        }
        seed.value = l_total;
        let grads = out.tape.backward(self.live.graph(), &seed)?;
        self.optimizer.step(self.live.graph_mut(), &grads)?;
        self.updates += 1;
        Ok((predictions, loss))
    }
}

impl StepLoss {
    fn skipped(kept_fraction: f64) -> Self {
        StepLoss {
            l_ent: 0.0,
            l_reg: 0.0,
            l_total: 0.0,
            kept_fraction,
            updated: false,
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub summary: RunSummary,
    pub log: Vec<LogRow>,
    pub final_model: Model,
}

/// Run `mode` over the whole stream at the plan's batch size.
pub fn adapt_stream(
    model: &Model,
    stream: &DomainStream,
    plan: &AdaptationPlan,
    opts: &RunOptions,
) -> Result<AdaptationRun> {
    let batch_size = plan.batch_size;
    let batches = stream.batches(batch_size)?;
    if batches.is_empty() {
        return Err(Error::Config("stream yields no batches".into()));
    }
    let mut state = AdaptationState::new(model, plan, opts)?;
    state.errors = vec![(0, 0); stream.spec.segments.len()];
    let mut measured = None;
    let mut log = Vec::with_capacity(batches.len());
    for batch in &batches {
        let step = state.step;
        let full = batch.len() == batch_size && measured.is_none();
        let (pred, loss) = state
            .step(&batch.images, opts.precision, |tape| {
                if full {
                    measured = Some(measure_cost(tape));
                }
            })
            .map_err(|e| match e {
                Error::Divergence { step, l_ent, l_reg, l_total, .. } => Error::Divergence {
                    step,
                    domain: format!("{}-{}", batch.kind, batch.severity),
                    l_ent,
                    l_reg,
                    l_total,
                },
                other => other,
            })?;
        let wrong = score(&pred, batch);
        let e = &mut state.errors[batch.segment];
        e.0 += batch.len();
        e.1 += wrong;
        log.push(LogRow {
            step,
            domain: batch.kind.to_string(),
            severity: batch.severity,
            batch_error: wrong as f64 / batch.len() as f64,
            kept_fraction: loss.kept_fraction,
            l_ent: loss.l_ent,
            l_reg: loss.l_reg,
            l_total: loss.l_total,
        });
    }

    let mut memory = predict_cost(model, &state.strategy.trainable, batch_size, opts.precision)?;
    let measured = match measured {
        Some(m) => m,
        None => {
            let x = Tensor::zeros(&model.batch_shape(batch_size));
            let fwd = ForwardOptions::new(state.strategy.bn_mode).with_precision(opts.precision);
            measure_cost(&model.forward(&x, &state.strategy.trainable, &fwd)?.tape)
        }
    };
    memory.attach_measured(&measured)?;

    let domains: Vec<DomainResult> = stream
        .spec
        .segments
        .iter()
        .zip(&state.errors)
        .enumerate()
        .map(|(i, (seg, &(n, wrong)))| DomainResult {
            segment: i,
            domain: seg.kind.to_string(),
            severity: seg.severity,
            samples: n,
            errors: wrong,
            error_pct: 100.0 * wrong as f64 / n.max(1) as f64,
        })
        .collect();
    let average_error_pct = domains.iter().map(|d| d.error_pct).sum::<f64>() / domains.len() as f64;
    Ok(AdaptationRun {
        summary: RunSummary {
            format: SUMMARY_FORMAT.to_string(),
            mode: opts.mode,
            batch_size,
            trainable_layers: state.strategy.trainable.iter().copied().collect(),
            bn_mode: state.strategy.bn_mode,
            steps: state.step,
            updates: state.updates,
            domains,
            average_error_pct,
            memory,
            lineage: BTreeMap::new(),
        },
        log,
        final_model: state.live,
    })
}

fn score(pred: &[usize], batch: &StreamBatch) -> usize {
    pred.iter().zip(batch.labels()).filter(|(p, y)| p != y).count()
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
