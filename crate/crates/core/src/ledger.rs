use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::task::{GoalType, Task};

/// One verifier judgement for one goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub goal_id: String,
    pub satisfied: bool,
    pub confidence: f64,
    #[serde(default)]
    pub explanation: String,
}

impl Verdict {
    pub fn new(goal_id: impl Into<String>, satisfied: bool, confidence: f64) -> Self {
        Self {
            goal_id: goal_id.into(),
            satisfied,
            confidence,
            explanation: String::new(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LedgerError {
    #[error("verdict references unknown goal id `{0}`")]
    UnknownGoal(String),
    #[error("cannot build ledger from invalid task: {0}")]
    InvalidTask(String),
}

/// Pending/completed partition of a task's goals.
///
/// `pending` keeps instruction order; a completed goal whose newer verdict is
/// unsatisfied moves back to pending. Values are immutable: [`GoalLedger::apply`]
/// returns a new ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalLedger {
    order: Vec<String>,
    types: BTreeMap<String, GoalType>,
    pending: Vec<String>,
    completed: BTreeSet<String>,
    latest: BTreeMap<String, Verdict>,
}

impl GoalLedger {
    /// All goals pending, nothing completed. Fails on a task that does not validate.
    pub fn new(task: &Task) -> Result<Self, LedgerError> {
        let report = crate::task::validate_task(task);
        if !report.is_valid() {
            return Err(LedgerError::InvalidTask(report.to_string()));
        }
        Ok(Self::from_goals(task.goals.iter().map(|g| (g.id.clone(), g.goal_type))))
    }

    /// Builds a ledger from `(id, type)` pairs without task validation.
    pub fn from_goals(goals: impl IntoIterator<Item = (String, GoalType)>) -> Self {
        let mut order = Vec::new();
        let mut types = BTreeMap::new();
        for (id, ty) in goals {
            if types.insert(id.clone(), ty).is_none() {
                order.push(id);
            }
        }
        Self {
            pending: order.clone(),
            order,
            types,
            completed: BTreeSet::new(),
            latest: BTreeMap::new(),
        }
    }

    /// Moves goals according to `verdicts`, which are expected to be confidence
    /// filtered already (see `metrics::filter_verdicts`).
    pub fn apply(&self, verdicts: &[Verdict]) -> Result<Self, LedgerError> {
        if let Some(v) = verdicts.iter().find(|v| !self.types.contains_key(&v.goal_id)) {
            return Err(LedgerError::UnknownGoal(v.goal_id.clone()));
        }
        let mut next = self.clone();
        for v in verdicts {
            if v.satisfied {
                next.completed.insert(v.goal_id.clone());
            } else {
                next.completed.remove(&v.goal_id);
            }
            next.latest.insert(v.goal_id.clone(), v.clone());
        }
        next.pending = next.order.iter().filter(|id| !next.completed.contains(*id)).cloned().collect();
        Ok(next)
    }

    pub fn pending(&self) -> &[String] {
        &self.pending
    }

    pub fn completed(&self) -> &BTreeSet<String> {
        &self.completed
    }

    pub fn is_pending(&self, id: &str) -> bool {
        !self.completed.contains(id) && self.types.contains_key(id)
    }

    pub fn latest(&self, id: &str) -> Option<&Verdict> {
        self.latest.get(id)
    }

    pub fn latest_verdicts(&self) -> impl Iterator<Item = &Verdict> {
        self.order.iter().filter_map(|id| self.latest.get(id))
    }

    pub fn goal_type(&self, id: &str) -> Option<GoalType> {
        self.types.get(id).copied()
    }

    /// Goal ids in instruction order.
    pub fn goal_ids(&self) -> &[String] {
        &self.order
    }

    pub fn total(&self) -> usize {
        self.order.len()
    }
}

impl TryFrom<&Task> for GoalLedger {
    type Error = LedgerError;

    fn try_from(task: &Task) -> Result<Self, Self::Error> {
        Self::new(task)
    }
}
