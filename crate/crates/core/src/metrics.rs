//! Benchmark scoring: confidence filtering, per-task labels, pooled rates and
//! efficiency statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ledger::{GoalLedger, Verdict};
use crate::task::GoalType;
use crate::trajectory::Trajectory;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.81;
/// Minimum finish fraction for a task to count as a success.
pub const SUCCESS_FRACTION: f64 = 0.8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty score list")]
    Empty,
    #[error("trajectory for task `{0}` has no terminal record")]
    Unfinished(String),
}

/// Low-confidence verdicts count as unsatisfied. The threshold is inclusive.
pub fn filter_verdicts(verdicts: &[Verdict], threshold: f64) -> Vec<Verdict> {
    verdicts
        .iter()
        .map(|v| Verdict {
            satisfied: v.satisfied && v.confidence >= threshold,
            ..v.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLabel {
    Success,
    Partial,
    Failure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCount {
    pub satisfied: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub effective_satisfied: usize,
    pub total_goals: usize,
    pub finish_fraction: f64,
    pub label: TaskLabel,
    pub per_type: BTreeMap<GoalType, TypeCount>,
    pub iterations: usize,
    pub editor_calls: usize,
}

pub fn label_for(satisfied: usize, total: usize) -> TaskLabel {
    if satisfied == 0 {
        TaskLabel::Failure
    } else if satisfied as f64 / total as f64 >= SUCCESS_FRACTION {
        TaskLabel::Success
    } else {
        TaskLabel::Partial
    }
}

/// Scores the terminal ledger. Goals never verified count as unsatisfied.
pub fn score_task(ledger: &GoalLedger, trajectory: &Trajectory, threshold: f64) -> TaskScore {
    let mut per_type: BTreeMap<GoalType, TypeCount> = BTreeMap::new();
    let mut satisfied = 0;
    for id in ledger.goal_ids() {
        let ok = ledger
            .latest(id)
            .is_some_and(|v| v.satisfied && v.confidence >= threshold);
        let goal_type = ledger.goal_type(id).expect("ledger ids have types");
        let entry = per_type.entry(goal_type).or_default();
        entry.total += 1;
        if ok {
            entry.satisfied += 1;
            satisfied += 1;
        }
    }
    let total = ledger.total();
    TaskScore {
        task_id: trajectory.task_id.clone(),
        effective_satisfied: satisfied,
        total_goals: total,
        finish_fraction: if total == 0 { 0.0 } else { satisfied as f64 / total as f64 },
        label: label_for(satisfied, total),
        per_type,
        iterations: trajectory.iterations(),
        editor_calls: trajectory.editor_calls(),
    }
}

/// Scores a finished trajectory from its terminal record.
pub fn score_trajectory(trajectory: &Trajectory, threshold: f64) -> Result<TaskScore, MetricsError> {
    let ledger = trajectory
        .final_ledger()
        .map_err(|_| MetricsError::Unfinished(trajectory.task_id.clone()))?;
    Ok(score_task(&ledger, trajectory, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRate {
    pub satisfied: usize,
    pub total: usize,
    /// `None` when no goal of this type occurs in the suite.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tasks: usize,
    /// Pooled over goals.
    pub finish: f64,
    /// Mean of per-task finish fractions.
    pub finish_macro: f64,
    pub success_rate_ge80: f64,
    pub per_type: BTreeMap<GoalType, TypeRate>,
    pub mean_iterations: f64,
    pub median_iterations: f64,
    pub mean_editor_calls: f64,
}

fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

pub fn aggregate(scores: &[TaskScore]) -> Result<BenchReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = scores.len() as f64;
    let satisfied: usize = scores.iter().map(|s| s.effective_satisfied).sum();
    let total: usize = scores.iter().map(|s| s.total_goals).sum();
    let per_type = GoalType::ALL
        .into_iter()
        .map(|t| {
            let (s, tot) = scores
                .iter()
                .filter_map(|sc| sc.per_type.get(&t))
                .fold((0, 0), |(a, b), c| (a + c.satisfied, b + c.total));
            let rate = (tot > 0).then(|| s as f64 / tot as f64);
            (t, TypeRate { satisfied: s, total: tot, rate })
        })
        .collect();
    let mut iterations: Vec<usize> = scores.iter().map(|s| s.iterations).collect();
    Ok(BenchReport {
        tasks: scores.len(),
        finish: if total == 0 { 0.0 } else { satisfied as f64 / total as f64 },
        finish_macro: scores.iter().map(|s| s.finish_fraction).sum::<f64>() / n,
        success_rate_ge80: scores.iter().filter(|s| s.label == TaskLabel::Success).count() as f64 / n,
        per_type,
        mean_iterations: iterations.iter().sum::<usize>() as f64 / n,
        median_iterations: median(&mut iterations),
        mean_editor_calls: scores.iter().map(|s| s.editor_calls).sum::<usize>() as f64 / n,
    })
}

/// Aligned text table: one header row and one value row, percentages with one decimal.
pub fn render_table(report: &BenchReport) -> String {
    let mut headers = vec!["Tasks".to_string(), "Finish".into(), "Success>=80%".into()];
    headers.extend(GoalType::ALL.iter().map(|t| t.as_str().to_string()));
    headers.extend(["Iter(mean)".to_string(), "Edits(mean)".into()]);
    let pct = |x: f64| format!("{:.1}", 100.0 * x);
    let mut values = vec![report.tasks.to_string(), pct(report.finish), pct(report.success_rate_ge80)];
    values.extend(GoalType::ALL.iter().map(|t| match report.per_type.get(t).and_then(|r| r.rate) {
        Some(r) => pct(r),
        None => "-".into(),
    }));
    values.extend([
        format!("{:.2}", report.mean_iterations),
        format!("{:.2}", report.mean_editor_calls),
    ]);
    let widths: Vec<usize> = headers.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
    let mut out = String::new();
    for row in [&headers, &values] {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
    }
    out
}
