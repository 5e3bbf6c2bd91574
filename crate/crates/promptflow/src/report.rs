//! Run reports, their CSV export, and summaries of checkpoint directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use promptflow_core::sarsa::TrajectoryStep;
use promptflow_core::{MetricReport, Objective, OperatorId, TaskKind};
use serde::{Deserialize, Serialize};

use crate::backend::Usage;
use crate::config::OptimizerKind;

/// Operator picks per section name.
pub type SelectionCounts = BTreeMap<String, BTreeMap<OperatorId, u32>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub section: String,
    pub operator: OperatorId,
    pub score_prev: f64,
    pub score_cur: f64,
    pub gradient: f64,
    /// False when the operator produced no change.
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub base_fingerprint: String,
    pub base_score: f64,
    /// Best objective in the pool after retention.
    pub best: f64,
    /// Mean objective over the retained pool.
    pub mean: f64,
    pub pool_size: usize,
    pub anneal_temperature: f64,
    pub selections: SelectionCounts,
    pub edits: Vec<EditRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<TrajectoryStep>,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    PerfectScore,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub objective: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub task: TaskKind,
    pub optimizer: OptimizerKind,
    pub objective: Objective,
    pub seed: u64,
    pub operators: Vec<OperatorId>,
    pub initial_pool_size: usize,
    pub initial_best: f64,
    pub initial_mean: f64,
    pub iterations: Vec<IterationRecord>,
    pub best_train: f64,
    pub best_fingerprint: String,
    pub test: Option<TestResult>,
    pub usage: Usage,
    pub stop_reason: StopReason,
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn total_counts(it: &IterationRecord) -> BTreeMap<OperatorId, u32> {
    let mut out = BTreeMap::new();
    for per_op in it.selections.values() {
        for (op, n) in per_op {
            *out.entry(*op).or_insert(0) += n;
        }
    }
    out
}

/// `iteration,best,mean,<operator>...` with operator picks summed over
/// sections.
pub fn iterations_csv(iterations: &[IterationRecord], operators: &[OperatorId]) -> String {
    let mut s = String::from("iteration,best,mean");
    for op in operators {
        write!(s, ",{op}").unwrap();
    }
    s.push('\n');
    for it in iterations {
        let counts = total_counts(it);
        write!(s, "{},{},{}", it.iteration, it.best, it.mean).unwrap();
        for op in operators {
            write!(s, ",{}", counts.get(op).copied().unwrap_or(0)).unwrap();
        }
        s.push('\n');
    }
    s
}

impl RunReport {
    pub fn csv(&self) -> String {
        iterations_csv(&self.iterations, &self.operators)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SummaryError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid checkpoint {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{0} contains no iteration checkpoints")]
    Empty(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub iterations: usize,
    pub best: f64,
    pub selections: SelectionCounts,
    pub per_iteration: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: u32,
    pub best: f64,
    pub mean: f64,
    pub pool_size: usize,
}

/// Reads every `iter_NNN/report.json` under `run_dir`.
pub fn read_checkpoints(run_dir: &Path) -> Result<Vec<IterationRecord>, SummaryError> {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SummaryError + '_ {
        move |source| SummaryError::Io { path: path.to_path_buf(), source }
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(io(run_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("iter_")))
        .collect();
    dirs.sort();
    let mut out = Vec::with_capacity(dirs.len());
    for d in dirs {
        let path = d.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        let record: IterationRecord = serde_json::from_str(&text)
            .map_err(|e| SummaryError::Invalid { path: path.clone(), message: e.to_string() })?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(SummaryError::Empty(run_dir.to_path_buf()));
    }
    Ok(out)
}

pub fn summarize(run_dir: &Path) -> Result<(RunSummary, String), SummaryError> {
    let its = read_checkpoints(run_dir)?;
    let mut selections: SelectionCounts = BTreeMap::new();
    let mut ops = std::collections::BTreeSet::new();
    for it in &its {
        for (section, per_op) in &it.selections {
            for (op, n) in per_op {
                *selections.entry(section.clone()).or_default().entry(*op).or_insert(0) += n;
                ops.insert(*op);
            }
        }
    }
    let operators: Vec<OperatorId> = ops.into_iter().collect();
    let csv = iterations_csv(&its, &operators);
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        iterations: its.len(),
        best: its.iter().map(|i| i.best).fold(f64::NEG_INFINITY, f64::max),
        selections,
        per_iteration: its
            .iter()
            .map(|i| SummaryRow { iteration: i.iteration, best: i.best, mean: i.mean, pool_size: i.pool_size })
            .collect(),
    };
    Ok((summary, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iteration: u32, best: f64) -> IterationRecord {
        let mut selections = SelectionCounts::new();
        selections.entry("a".into()).or_default().insert(OperatorId::Refine, 2);
        selections.entry("b".into()).or_default().insert(OperatorId::Refine, 1);
        selections.entry("b".into()).or_default().insert(OperatorId::Cot, 1);
        IterationRecord {
            iteration,
            base_fingerprint: "f".into(),
            base_score: best,
            best,
            mean: best / 2.0,
            pool_size: 3,
            anneal_temperature: 1.0,
            selections,
            edits: vec![],
            trajectory: vec![],
            usage: Usage::default(),
        }
    }

    #[test]
    fn csv_sums_over_sections() {
        let csv = iterations_csv(&[record(1, 0.5)], &[OperatorId::Rewrite, OperatorId::Refine, OperatorId::Cot]);
        assert_eq!(csv, "iteration,best,mean,rewrite,refine,cot\n1,0.5,0.25,0,3,1\n");
    }

    #[test]
    fn summarize_reads_iteration_dirs() {
        let dir = tempfile::tempdir().unwrap();
        for (i, best) in [(1, 0.5), (2, 0.6)] {
            let d = dir.path().join(format!("iter_{i:03}"));
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("report.json"), to_json_pretty(&record(i, best))).unwrap();
        }
        let (s, csv) = summarize(dir.path()).unwrap();
        assert_eq!(s.iterations, 2);
        assert_eq!(s.best, 0.6);
        assert_eq!(s.selections["a"][&OperatorId::Refine], 4);
        assert_eq!(csv.lines().count(), 3);
        assert!(matches!(summarize(&dir.path().join("iter_001")), Err(SummaryError::Empty(_))));
    }
}
