//! Aggregation of run summaries into comparison tables: per-domain errors
//! (one row per run), error and memory per batch size (one row per mode),
//! batch-size degradation deltas and fixed-budget batch selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctta::{RunSummary, StrategyMode};
use crate::error::{Error, Result};

use super::pipeline::{load_summary, summary_hash, SUMMARY_FILE};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub domain: String,
    pub severity: u8,
    pub error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRun {
    pub mode: StrategyMode,
    pub batch_size: usize,
    pub domains: Vec<DomainError>,
    pub average_error_pct: f64,
    pub predicted_total_bytes: u64,
    pub measured_total_bytes: Option<u64>,
    pub reconciles: bool,
    /// Bytes of the predicted total that do not scale with the batch.
    pub fixed_bytes: u64,
    /// Predicted bytes added per sample in the batch.
    pub per_sample_bytes: u64,
    pub summary_hash: String,
}

impl ReportRun {
    fn from_summary(s: &RunSummary) -> Result<Self> {
        let t = &s.memory.totals;
        let per_sample = t.analytic_activation_bytes / s.batch_size.max(1) as u64;
        Ok(ReportRun {
            mode: s.mode,
            batch_size: s.batch_size,
            domains: s
                .domains
                .iter()
                .map(|d| DomainError {
                    domain: d.domain.clone(),
                    severity: d.severity,
                    error_pct: d.error_pct,
                })
                .collect(),
            average_error_pct: s.average_error_pct,
            predicted_total_bytes: t.predicted_total_bytes,
            measured_total_bytes: t.measured_total_bytes,
            reconciles: s.memory.reconciles(),
            fixed_bytes: t.predicted_total_bytes - t.analytic_activation_bytes,
            per_sample_bytes: per_sample,
            summary_hash: summary_hash(s)?,
        })
    }

    /// Predicted total at another batch size.
    pub fn predicted_at(&self, batch_size: u64) -> u64 {
        self.fixed_bytes + self.per_sample_bytes * batch_size
    }
}

/// `error(B_small) − error(B_large)` for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub mode: StrategyMode,
    pub small_batch: usize,
    pub large_batch: usize,
    pub small_error_pct: f64,
    pub large_error_pct: f64,
    pub delta_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetStatus {
    Ok,
    Infeasible,
}

/// Largest reported batch size of one mode whose predicted cost fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub mode: StrategyMode,
    pub budget_bytes: u64,
    pub status: BudgetStatus,
    pub batch_size: Option<usize>,
    pub predicted_total_bytes: Option<u64>,
    pub measured_total_bytes: Option<u64>,
    pub average_error_pct: Option<f64>,
    /// Weight-grad bytes matched the analytic model on the chosen run.
    pub verified: Option<bool>,
    /// Largest batch size the analytic model admits; `None` if unbounded.
    pub max_feasible_batch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<ReportRun>,
    pub degradations: Vec<Degradation>,
    pub budget: Vec<BudgetRow>,
    /// Summary path to sha256 of its content.
    pub lineage: BTreeMap<String, String>,
}

/// Degradation from the largest to the smallest batch size of each mode.
pub fn degradations(runs: &[ReportRun]) -> Vec<Degradation> {
    let modes: BTreeSet<StrategyMode> = runs.iter().map(|r| r.mode).collect();
    let mut out = Vec::new();
    for mode in modes {
        let of_mode: Vec<&ReportRun> = runs.iter().filter(|r| r.mode == mode).collect();
        let small = of_mode.iter().min_by_key(|r| r.batch_size).expect("non-empty");
        let large = of_mode.iter().max_by_key(|r| r.batch_size).expect("non-empty");
        if small.batch_size == large.batch_size {
            continue;
        }
        out.push(Degradation {
            mode,
            small_batch: small.batch_size,
            large_batch: large.batch_size,
            small_error_pct: small.average_error_pct,
            large_error_pct: large.average_error_pct,
            delta_pct: small.average_error_pct - large.average_error_pct,
        });
    }
    out
}

/// Per mode, the largest run whose predicted total fits in `budget`.
pub fn budget_rows(runs: &[ReportRun], budget: u64) -> Vec<BudgetRow> {
    let modes: BTreeSet<StrategyMode> = runs.iter().map(|r| r.mode).collect();
    modes
        .into_iter()
        .map(|mode| {
            let of_mode: Vec<&ReportRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let any = of_mode[0];
            let max_feasible_batch = budget
                .saturating_sub(any.fixed_bytes)
                .checked_div(any.per_sample_bytes)
                .or((any.fixed_bytes > budget).then_some(0));
            let chosen = of_mode
                .iter()
                .filter(|r| r.predicted_total_bytes <= budget)
                .max_by_key(|r| r.batch_size);
            match chosen {
                Some(r) => BudgetRow {
                    mode,
                    budget_bytes: budget,
                    status: BudgetStatus::Ok,
                    batch_size: Some(r.batch_size),
                    predicted_total_bytes: Some(r.predicted_total_bytes),
                    measured_total_bytes: r.measured_total_bytes,
                    average_error_pct: Some(r.average_error_pct),
                    verified: Some(r.reconciles),
                    max_feasible_batch,
                },
                None => BudgetRow {
                    mode,
                    budget_bytes: budget,
                    status: BudgetStatus::Infeasible,
                    batch_size: None,
                    predicted_total_bytes: None,
                    measured_total_bytes: None,
                    average_error_pct: None,
                    verified: None,
                    max_feasible_batch,
                },
            }
        })
        .collect()
}

pub fn build_report(summaries: &[(PathBuf, RunSummary)], budget: Option<u64>) -> Result<Report> {
    if summaries.is_empty() {
        return Err(Error::Artifact("no run summaries to report".into()));
    }
    let mut runs = Vec::with_capacity(summaries.len());
    let mut lineage = BTreeMap::new();
    for (path, s) in summaries {
        let run = ReportRun::from_summary(s)?;
        lineage.insert(path.display().to_string(), run.summary_hash.clone());
        runs.push(run);
    }
    runs.sort_by_key(|r| (r.mode, r.batch_size));
    Ok(Report {
        degradations: degradations(&runs),
        budget: budget.map(|b| budget_rows(&runs, b)).unwrap_or_default(),
        runs,
        lineage,
    })
}

fn mb(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let domains: Vec<String> = self.runs[0]
            .domains
            .iter()
            .map(|d| format!("{}-{}", d.domain, d.severity))
            .collect();
        let _ = writeln!(s, "Per-domain error (%)");
        let _ = write!(s, "{:<16} {:>5}", "method", "B");
        for d in &domains {
            let _ = write!(s, " {:>18}", d);
        }
        let _ = writeln!(s, " {:>8}", "avg");
        for r in &self.runs {
            let _ = write!(s, "{:<16} {:>5}", r.mode.name(), r.batch_size);
            for d in &r.domains {
                let _ = write!(s, " {:>18.1}", d.error_pct);
            }
            let _ = writeln!(s, " {:>8.2}", r.average_error_pct);
        }

        let batches: BTreeSet<usize> = self.runs.iter().map(|r| r.batch_size).collect();
        let batches: Vec<usize> = batches.into_iter().rev().collect();
        let _ = writeln!(s, "\nError (%) and predicted memory (MB) by batch size");
        let _ = write!(s, "{:<16}", "method");
        for b in &batches {
            let _ = write!(s, " {:>8} {:>9}", format!("err@{b}"), format!("MB@{b}"));
        }
        let _ = writeln!(s, " {:>8} {:>9}", "avg-err", "avg-MB");
        let modes: BTreeSet<StrategyMode> = self.runs.iter().map(|r| r.mode).collect();
        for mode in modes {
            let _ = write!(s, "{:<16}", mode.name());
            let (mut es, mut ms) = (Vec::new(), Vec::new());
            for b in &batches {
                match self.runs.iter().find(|r| r.mode == mode && r.batch_size == *b) {
                    Some(r) => {
                        let _ = write!(s, " {:>8.2} {:>9.3}", r.average_error_pct, mb(r.predicted_total_bytes));
                        es.push(r.average_error_pct);
                        ms.push(mb(r.predicted_total_bytes));
                    }
                    None => {
                        let _ = write!(s, " {:>8} {:>9}", "-", "-");
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let _ = writeln!(s, " {:>8.2} {:>9.3}", mean(&es), mean(&ms));
        }

        if !self.degradations.is_empty() {
            let _ = writeln!(s, "\nBatch-size degradation: error(small B) - error(large B)");
            for d in &self.degradations {
                let _ = writeln!(
                    s,
                    "{:<16} B={:<3} {:>7.2}  B={:<3} {:>7.2}  delta {:>+7.2}",
                    d.mode.name(),
                    d.small_batch,
                    d.small_error_pct,
                    d.large_batch,
                    d.large_error_pct,
                    d.delta_pct
                );
            }
        }

        if let Some(first) = self.budget.first() {
            let _ = writeln!(s, "\nFixed memory budget: {} bytes ({:.3} MB)", first.budget_bytes, mb(first.budget_bytes));
            for r in &self.budget {
                let max_b = r.max_feasible_batch.map_or_else(|| "unbounded".to_string(), |b| b.to_string());
                match r.status {
                    BudgetStatus::Ok => {
                        let _ = writeln!(
                            s,
                            "{:<16} B={:<3} err {:>7.2}  predicted {:>10}  measured {:>10}  verified {}  (max feasible B {max_b})",
                            r.mode.name(),
                            r.batch_size.unwrap_or(0),
                            r.average_error_pct.unwrap_or(f64::NAN),
                            r.predicted_total_bytes.unwrap_or(0),
                            r.measured_total_bytes.map_or_else(|| "-".into(), |b| b.to_string()),
                            r.verified.unwrap_or(false),
                        );
                    }
                    BudgetStatus::Infeasible => {
                        let _ = writeln!(s, "{:<16} infeasible  (max feasible B {max_b})", r.mode.name());
                    }
                }
            }
        }
        s
    }
}

/// Summary files named by `inputs`: files are taken as is, directories are
/// searched one level deep for `summary.json`.
pub fn collect_summaries(inputs: &[PathBuf]) -> Result<Vec<(PathBuf, RunSummary)>> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_file() {
            paths.push(input.clone());
        } else if input.is_dir() {
            let direct = input.join(SUMMARY_FILE);
            if direct.is_file() {
                paths.push(direct);
            }
            let mut entries: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path().join(SUMMARY_FILE)))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            paths.extend(entries);
        } else {
            return Err(Error::Artifact(format!("{} does not exist", input.display())));
        }
    }
    if paths.is_empty() {
        return Err(Error::Artifact("no summary.json found under the given paths".into()));
    }
    paths.into_iter().map(|p| load_summary(&p).map(|s| (p, s))).collect()
}

pub fn cmd_report(inputs: &[PathBuf], budget: Option<u64>, out: &Path) -> Result<Report> {
    let report = build_report(&collect_summaries(inputs)?, budget)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join(REPORT_TEXT), report.to_text())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: StrategyMode, batch_size: usize, err: f64) -> ReportRun {
        ReportRun {
            mode,
            batch_size,
            domains: vec![],
            average_error_pct: err,
            predicted_total_bytes: 1000 + 10 * batch_size as u64,
            measured_total_bytes: Some(1000 + 10 * batch_size as u64),
            reconciles: true,
            fixed_bytes: 1000,
            per_sample_bytes: 10,
            summary_hash: String::new(),
        }
    }

    #[test]
    fn degradation_is_small_minus_large() {
        let runs = vec![
            run(StrategyMode::Focta, 4, 20.0),
            run(StrategyMode::Focta, 16, 18.5),
            run(StrategyMode::Focta, 64, 17.0),
            run(StrategyMode::TentAllBn, 4, 30.0),
            run(StrategyMode::TentAllBn, 64, 18.0),
            run(StrategyMode::Source, 64, 40.0),
        ];
        let d = degradations(&runs);
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].mode, d[0].small_batch, d[0].large_batch), (StrategyMode::Focta, 4, 64));
        assert!((d[0].delta_pct - 3.0).abs() < 1e-12);
        assert!((d[1].delta_pct - 12.0).abs() < 1e-12);
    }

    #[test]
    fn budget_picks_largest_fitting_batch() {
        let runs = vec![run(StrategyMode::Focta, 4, 20.0), run(StrategyMode::Focta, 64, 17.0)];
        let rows = budget_rows(&runs, 1000 + 10 * 32);
        assert_eq!(rows[0].status, BudgetStatus::Ok);
        assert_eq!(rows[0].batch_size, Some(4));
        assert_eq!(rows[0].max_feasible_batch, Some(32));
        assert_eq!(runs[0].predicted_at(32), 1320);
    }

    #[test]
    fn budget_below_single_sample_cost_is_an_infeasible_row() {
        let runs = vec![run(StrategyMode::Focta, 4, 20.0)];
        let rows = budget_rows(&runs, 1005);
        assert_eq!(rows[0].status, BudgetStatus::Infeasible);
        assert_eq!(rows[0].max_feasible_batch, Some(0));
        assert!(rows[0].batch_size.is_none());
    }

    #[test]
    fn empty_input_is_an_artifact_error() {
        assert!(matches!(build_report(&[], None), Err(Error::Artifact(_))));
    }
}
