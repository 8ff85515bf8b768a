//! Replayable log of one task run, serialized as JSONL (one record per step
//! plus a terminal record).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::actions::ActionSymbol;
use crate::backends::{EditMode, ImageHandle};
use crate::ledger::{GoalLedger, Verdict};
use crate::task::GoalType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub goal_id: String,
    pub satisfied: bool,
    pub confidence: f64,
}

impl From<&Verdict> for VerdictRecord {
    fn from(v: &Verdict) -> Self {
        Self {
            goal_id: v.goal_id.clone(),
            satisfied: v.satisfied,
            confidence: v.confidence,
        }
    }
}

impl From<&VerdictRecord> for Verdict {
    fn from(v: &VerdictRecord) -> Self {
        Verdict::new(v.goal_id.clone(), v.satisfied, v.confidence)
    }
}

/// A planner decision together with the options it was chosen from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub symbol: ActionSymbol,
    pub legal: Vec<ActionSymbol>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    OneShot,
    Staged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AllSatisfied,
    Budget,
    SelfQuery,
    /// Refinement disabled: the run is a single pass.
    SinglePass,
    /// The trained policy emitted a stop token.
    PolicyStop,
    Error,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("enum serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub directive: String,
    pub mode: EditMode,
    pub addressed: Vec<String>,
    pub reprompted: bool,
    pub candidate_seeds: Vec<u64>,
    pub judge_scores: Vec<f64>,
    pub chosen_index: usize,
    pub verdicts: Vec<VerdictRecord>,
    /// Confidence-filtered satisfied count of the chosen candidate.
    pub coverage: usize,
    pub rollback: bool,
    pub best_coverage: usize,
    pub pending_after: Vec<String>,
    pub completed_after: Vec<String>,
    pub features: Vec<f64>,
    pub decisions: Vec<DecisionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub task_id: String,
    pub gate: GateDecision,
    pub final_image: Option<ImageHandle>,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub editor_calls: usize,
    pub best_coverage: usize,
    pub goal_types: BTreeMap<String, GoalType>,
    pub initial_verdicts: Vec<VerdictRecord>,
    pub final_verdicts: Vec<VerdictRecord>,
    /// Features and decisions of the closing self-query, when one stopped the run.
    pub stop_features: Vec<f64>,
    pub stop_decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Step(StepRecord),
    Final(FinalRecord),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub terminal: Option<FinalRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trajectory has no terminal record")]
    MissingTerminal,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            ..Self::default()
        }
    }

    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn editor_calls(&self) -> usize {
        self.steps.iter().map(|s| s.candidate_seeds.len()).sum()
    }

    pub fn rollbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.rollback).count()
    }

    /// Most recent step that addressed any of `goal_ids` and left at least one
    /// of them unsatisfied (rolled back or still pending).
    pub fn last_failed_attempt(&self, goal_ids: &[String]) -> Option<&StepRecord> {
        self.steps.iter().rev().find(|s| {
            goal_ids.iter().any(|id| {
                s.addressed.contains(id) && (s.rollback || s.error.is_some() || s.pending_after.contains(id))
            })
        })
    }

    /// Terminal-state ledger rebuilt from the final record.
    pub fn final_ledger(&self) -> Result<GoalLedger, TrajectoryError> {
        let terminal = self.terminal.as_ref().ok_or(TrajectoryError::MissingTerminal)?;
        let ledger = GoalLedger::from_goals(terminal.goal_types.iter().map(|(id, t)| (id.clone(), *t)));
        let verdicts: Vec<Verdict> = terminal.final_verdicts.iter().map(Verdict::from).collect();
        Ok(ledger.apply(&verdicts).unwrap_or(ledger))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(&Line::Step(step.clone())).expect("step serializes"));
            out.push('\n');
        }
        if let Some(terminal) = &self.terminal {
            out.push_str(&serde_json::to_string(&Line::Final(terminal.clone())).expect("final serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrajectoryError> {
        let mut traj = Trajectory::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Line>(line).map_err(|source| TrajectoryError::Json { line: i + 1, source })? {
                Line::Step(step) => traj.steps.push(step),
                Line::Final(terminal) => {
                    traj.task_id = terminal.task_id.clone();
                    traj.terminal = Some(terminal);
                }
            }
        }
        Ok(traj)
    }
}
