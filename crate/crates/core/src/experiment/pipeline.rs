//! File-level pipeline: each step reads upstream artifacts, checks their
//! lineage and writes its own outputs into the output directory.
//!
//! | step     | reads                    | writes                                      |
//! |----------|--------------------------|---------------------------------------------|
//! | pretrain | config                   | `checkpoint.json`                           |
//! | warmup   | config, checkpoint       | `plan.json`, `importance.json`              |
//! | adapt    | config, checkpoint, plan | `run-<mode>-b<B>/{summary.json, log.csv}`   |
//! | sweep    | config, checkpoint, plan | one run directory per (mode, B), `sweep.csv`|

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctta::loss::entropy_threshold;
use crate::ctta::{adapt_stream, write_log, AdaptationRun, RunOptions, RunSummary, StrategyMode};
use crate::data::{generate_source, Dataset, DomainStream};
use crate::error::{Error, Result};
use crate::nn::{build_reference_cnn, load_checkpoint, save_checkpoint, CheckpointMeta, Model, SeedRecord};
use crate::warmup::{score_l1, score_weight_norm, select_topk, warmup, AdaptationPlan, ImportanceVector, Metric, WarmupConfig};

use super::config::{sha256_file, sha256_hex, ExperimentConfig};
use super::train::{accuracy, pretrain};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WARM_CHECKPOINT_FILE: &str = "checkpoint-warm.json";
pub const PLAN_FILE: &str = "plan.json";
pub const IMPORTANCE_FILE: &str = "importance.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_FILE: &str = "log.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Clean training and validation splits.
pub fn source_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    Ok((
        generate_source(d.train_samples, d.classes, cfg.seed_for("train"))?,
        generate_source(d.val_samples, d.classes, cfg.seed_for("val"))?,
    ))
}

/// Build and pretrain the reference CNN. Fails with a training error when
/// clean validation accuracy ends below the configured floor.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(Model, CheckpointMeta)> {
    cfg.validate()?;
    let (train, val) = source_data(cfg)?;
    let mut cnn = cfg.model.clone();
    cnn.seed = cfg.seed_for("init");
    let mut model = build_reference_cnn(&cnn)?;
    pretrain(&mut model, &train, &cfg.pretrain, cfg.seed_for("order"))?;
    let acc = accuracy(&model, &val, 256)?;
    if acc < cfg.pretrain.min_accuracy {
        return Err(Error::Training(format!(
            "clean validation accuracy {:.4} is below the floor {:.4}",
            acc, cfg.pretrain.min_accuracy
        )));
    }
    let seed_lineage = ["init", "train", "val", "order"]
        .into_iter()
        .map(|p| SeedRecord {
            purpose: p.to_string(),
            seed: cfg.seed_for(p),
        })
        .collect();
    let meta = CheckpointMeta {
        seed_lineage,
        cnn_config: Some(cnn),
        clean_accuracy: Some(acc),
        config_hash: Some(cfg.hash()),
    };
    Ok((model, meta))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let (model, meta) = pretrain_model(cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &model, meta)?;
    Ok(path)
}

/// The three layer-importance metrics side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub grad_norm: ImportanceVector,
    pub l1_norm: ImportanceVector,
    pub weight_norm: ImportanceVector,
    pub selected_by: Metric,
    pub selected: Vec<crate::engine::LayerId>,
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
}

pub fn warmup_config(cfg: &ExperimentConfig) -> WarmupConfig {
    let w = &cfg.warmup;
    WarmupConfig {
        recipe: w.recipe.clone(),
        epochs: w.epochs,
        lr: w.lr,
        batch_size: w.batch_size,
        norm: w.norm,
        keep_weights: w.keep_weights,
        seed: cfg.seed_for("warmup"),
    }
}

/// Profile `model`, score it under all three metrics and select layers with
/// the configured one. With `keep_weights` the model keeps its warm-up update.
pub fn profile(
    cfg: &ExperimentConfig,
    model: &mut Model,
    checkpoint_hash: Option<String>,
) -> Result<(AdaptationPlan, ImportanceReport)> {
    cfg.validate()?;
    check_classes(cfg, model)?;
    let (train, _) = source_data(cfg)?;
    let l1_norm = score_l1(model);
    let weight_norm = score_weight_norm(model);
    let grad_norm = warmup(model, &train, &warmup_config(cfg))?;
    let chosen = match cfg.warmup.metric {
        Metric::GradNorm => &grad_norm,
        Metric::L1Norm => &l1_norm,
        Metric::WeightNorm => &weight_norm,
    };
    let selected = select_topk(chosen, cfg.warmup.alpha)?;
    let a = &cfg.adapt;
    let plan = AdaptationPlan {
        selected: selected.clone(),
        metric: cfg.warmup.metric,
        alpha: cfg.warmup.alpha,
        lambda: a.lambda,
        h0: entropy_threshold(cfg.dataset.classes, a.h0_factor),
        batch_size: a.batch_size,
        lr: a.lr,
        bn_mode: a.bn_mode,
        importance: Some(chosen.clone()),
        checkpoint_hash: checkpoint_hash.clone(),
    };
    let report = ImportanceReport {
        grad_norm,
        l1_norm,
        weight_norm,
        selected_by: cfg.warmup.metric,
        selected,
        config_hash: cfg.hash(),
        checkpoint_hash,
    };
    Ok((plan, report))
}

/// Writes the plan and importance report. With `keep_weights` the warmed
/// model is saved as well and the plan points at it.
pub fn cmd_warmup(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (mut model, mut meta) = load_checkpoint(checkpoint)?;
    let hash = sha256_file(checkpoint)?;
    let (mut plan, report) = profile(cfg, &mut model, Some(hash))?;
    fs::create_dir_all(out)?;
    if cfg.warmup.keep_weights {
        let warm = out.join(WARM_CHECKPOINT_FILE);
        meta.config_hash = Some(cfg.hash());
        save_checkpoint(&warm, &model, meta)?;
        plan.checkpoint_hash = Some(sha256_file(&warm)?);
    }
    fs::write(out.join(IMPORTANCE_FILE), serde_json::to_string_pretty(&report)?)?;
    let path = out.join(PLAN_FILE);
    plan.save(&path)?;
    Ok(path)
}

fn check_classes(cfg: &ExperimentConfig, model: &Model) -> Result<()> {
    if model.classes() != cfg.dataset.classes {
        return Err(Error::Artifact(format!(
            "checkpoint has {} classes but the config asks for {}",
            model.classes(),
            cfg.dataset.classes
        )));
    }
    Ok(())
}

/// Checkpoint and plan loaded together, with lineage checked.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub model: Model,
    pub plan: AdaptationPlan,
    pub checkpoint_hash: String,
    pub plan_hash: String,
}

pub fn load_inputs(cfg: &ExperimentConfig, checkpoint: &Path, plan: &Path) -> Result<Inputs> {
    let (model, _) = load_checkpoint(checkpoint)?;
    check_classes(cfg, &model)?;
    let checkpoint_hash = sha256_file(checkpoint)?;
    let loaded = AdaptationPlan::load(plan)?;
    if let Some(expected) = &loaded.checkpoint_hash {
        if *expected != checkpoint_hash {
            return Err(Error::Artifact(format!(
                "plan {} was profiled on checkpoint {expected}, but {} hashes to {checkpoint_hash}",
                plan.display(),
                checkpoint.display()
            )));
        }
    }
    loaded.check_against(&model)?;
    Ok(Inputs {
        model,
        plan: loaded,
        checkpoint_hash,
        plan_hash: sha256_file(plan)?,
    })
}

pub fn stream(cfg: &ExperimentConfig) -> Result<DomainStream> {
    DomainStream::new(cfg.adapt.stream.clone(), cfg.dataset.classes, cfg.seed_for("stream"))
}

pub fn run_options(cfg: &ExperimentConfig, mode: StrategyMode) -> RunOptions {
    RunOptions {
        mode,
        tent_filtered: cfg.adapt.tent_filtered,
        reg_target: cfg.adapt.reg_target,
        random_k_seed: cfg.seed_for("random-k"),
        precision: cfg.adapt.precision,
    }
}

/// One run of `mode` at batch size `batch_size` over the configured stream.
pub fn run_mode(
    cfg: &ExperimentConfig,
    model: &Model,
    plan: &AdaptationPlan,
    mode: StrategyMode,
    batch_size: usize,
) -> Result<AdaptationRun> {
    let plan = AdaptationPlan {
        batch_size,
        ..plan.clone()
    };
    adapt_stream(model, &stream(cfg)?, &plan, &run_options(cfg, mode))
}

pub fn run_dir_name(mode: StrategyMode, batch_size: usize) -> String {
    format!("run-{mode}-b{batch_size}")
}

fn write_run(run: &mut AdaptationRun, cfg: &ExperimentConfig, inputs: &Inputs, dir: &Path) -> Result<PathBuf> {
    let lineage = &mut run.summary.lineage;
    lineage.insert("config".into(), cfg.hash());
    lineage.insert("checkpoint".into(), inputs.checkpoint_hash.clone());
    lineage.insert("plan".into(), inputs.plan_hash.clone());
    fs::create_dir_all(dir)?;
    write_log(&dir.join(LOG_FILE), &run.log)?;
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, run.summary.to_json()?)?;
    Ok(path)
}

/// Adapt with the configured mode and batch size; returns the summary path.
pub fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: &Path, plan: &Path, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let inputs = load_inputs(cfg, checkpoint, plan)?;
    let (mode, b) = (cfg.adapt.mode, cfg.adapt.batch_size);
    let mut run = run_mode(cfg, &inputs.model, &inputs.plan, mode, b)?;
    write_run(&mut run, cfg, &inputs, &out.join(run_dir_name(mode, b)))
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: StrategyMode,
    pub batch_size: usize,
    pub average_error_pct: f64,
    pub predicted_total_bytes: u64,
    pub measured_total_bytes: Option<u64>,
    pub reconciles: bool,
    pub summary: String,
}

impl SweepRow {
    pub fn from_summary(s: &RunSummary, path: &Path) -> Self {
        SweepRow {
            mode: s.mode,
            batch_size: s.batch_size,
            average_error_pct: s.average_error_pct,
            predicted_total_bytes: s.memory.totals.predicted_total_bytes,
            measured_total_bytes: s.memory.totals.measured_total_bytes,
            reconciles: s.memory.reconciles(),
            summary: path.display().to_string(),
        }
    }
}

/// Every configured mode at every batch size of `batch_sizes`.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    plan: &Path,
    batch_sizes: &[usize],
    out: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::Config("sweep needs a non-empty list of batch sizes >= 1".into()));
    }
    let inputs = load_inputs(cfg, checkpoint, plan)?;
    let mut rows = Vec::new();
    for &mode in &cfg.sweep.modes {
        for &b in batch_sizes {
            let mut run = run_mode(cfg, &inputs.model, &inputs.plan, mode, b)?;
            let path = write_run(&mut run, cfg, &inputs, &out.join(run_dir_name(mode, b)))?;
            rows.push(SweepRow::from_summary(&run.summary, &path));
        }
    }
    let path = out.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path)
}

/// Read a run summary, rejecting files of another format.
pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let bytes = fs::read(path).map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    let s: RunSummary = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Artifact(format!("{} is not a run summary: {e}", path.display())))?;
    if s.format != crate::ctta::runtime::SUMMARY_FORMAT {
        return Err(Error::Artifact(format!("{} has format {:?}", path.display(), s.format)));
    }
    Ok(s)
}

/// sha256 of a summary's canonical JSON.
pub fn summary_hash(s: &RunSummary) -> Result<String> {
    Ok(sha256_hex(s.to_json()?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CorruptionKind, Segment, StreamSpec};
    use crate::experiment::config::DatasetConfig;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetConfig {
            train_samples: 300,
            val_samples: 150,
            classes: 3,
        };
        cfg.model.classes = 3;
        cfg.model.widths = vec![8, 16, 16];
        cfg.pretrain.epochs = 10;
        cfg.pretrain.min_accuracy = 0.5;
        cfg.adapt.stream = StreamSpec {
            segments: vec![Segment {
                kind: CorruptionKind::Contrast,
                severity: 5,
            }],
            samples_per_segment: 40,
        };
        cfg.sweep.modes = vec![StrategyMode::Focta, StrategyMode::Source];
        cfg
    }

    #[test]
    fn artifacts_chain_and_reject_mismatches() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let ck = cmd_pretrain(&cfg, dir.path()).unwrap();
        let plan = cmd_warmup(&cfg, &ck, dir.path()).unwrap();
        assert!(dir.path().join(IMPORTANCE_FILE).is_file());

        let csv = cmd_sweep(&cfg, &ck, &plan, &[4, 8], dir.path()).unwrap();
        assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 5);
        let s = load_summary(&dir.path().join(run_dir_name(StrategyMode::Source, 8)).join(SUMMARY_FILE)).unwrap();
        assert_eq!(s.lineage["checkpoint"], sha256_file(&ck).unwrap());
        assert_eq!(s.updates, 0);

        let other = tempfile::tempdir().unwrap();
        let ck2 = cmd_pretrain(&ExperimentConfig { seed: 9, ..cfg.clone() }, other.path()).unwrap();
        assert!(matches!(load_inputs(&cfg, &ck2, &plan), Err(Error::Artifact(_))));

        let mut wider = cfg.clone();
        wider.dataset.classes = 4;
        wider.model.classes = 4;
        assert!(matches!(load_inputs(&wider, &ck, &plan), Err(Error::Artifact(_))));
        assert!(matches!(load_summary(&ck), Err(Error::Artifact(_))));
    }
}
