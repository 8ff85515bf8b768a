//! Closed action vocabulary for planner decisions and tool outputs, and the
//! compact state features the trainable policy conditions on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ledger::GoalLedger;
use crate::task::{Goal, GoalTag};

/// Largest micro-grid whose judge pick can be encoded as a token.
pub const MAX_JUDGE_CANDIDATES: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ActionSymbol {
    /// Self-query answered "the image can still improve".
    Continue,
    Stop,
    Batch(GoalTag),
    /// Address every pending goal in one scene-level pass.
    BatchAll,
    ModeFullCompose,
    ModeLocalEdit,
    ModeRegenerate,
    /// Directive phrasing: 0 = fresh directive, 1 = rephrased retry.
    Template(u8),
    JudgePick(u8),
    VerdictSatisfied,
    VerdictUnsatisfied,
    Accept,
    Rollback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Planner,
    Tool,
}

pub const TEMPLATE_COUNT: u8 = 2;

impl ActionSymbol {
    /// Every symbol, in row order of the policy parameter matrix.
    pub fn vocabulary() -> Vec<ActionSymbol> {
        let mut v = vec![ActionSymbol::Continue, ActionSymbol::Stop];
        v.extend(GoalTag::ALL.map(ActionSymbol::Batch));
        v.extend([
            ActionSymbol::BatchAll,
            ActionSymbol::ModeFullCompose,
            ActionSymbol::ModeLocalEdit,
            ActionSymbol::ModeRegenerate,
        ]);
        v.extend((0..TEMPLATE_COUNT).map(ActionSymbol::Template));
        v.extend((0..MAX_JUDGE_CANDIDATES).map(ActionSymbol::JudgePick));
        v.extend([
            ActionSymbol::VerdictSatisfied,
            ActionSymbol::VerdictUnsatisfied,
            ActionSymbol::Accept,
            ActionSymbol::Rollback,
        ]);
        v
    }

    pub fn vocabulary_size() -> usize {
        Self::vocabulary().len()
    }

    /// Row of this symbol in the policy parameter matrix.
    pub fn index(self) -> usize {
        let tag_base = 2;
        let after_tags = tag_base + GoalTag::ALL.len();
        let template_base = after_tags + 4;
        let judge_base = template_base + TEMPLATE_COUNT as usize;
        let tool_base = judge_base + MAX_JUDGE_CANDIDATES as usize;
        match self {
            ActionSymbol::Continue => 0,
            ActionSymbol::Stop => 1,
            ActionSymbol::Batch(tag) => {
                tag_base + GoalTag::ALL.iter().position(|t| *t == tag).expect("tag in ALL")
            }
            ActionSymbol::BatchAll => after_tags,
            ActionSymbol::ModeFullCompose => after_tags + 1,
            ActionSymbol::ModeLocalEdit => after_tags + 2,
            ActionSymbol::ModeRegenerate => after_tags + 3,
            ActionSymbol::Template(t) => template_base + t as usize,
            ActionSymbol::JudgePick(i) => judge_base + i as usize,
            ActionSymbol::VerdictSatisfied => tool_base,
            ActionSymbol::VerdictUnsatisfied => tool_base + 1,
            ActionSymbol::Accept => tool_base + 2,
            ActionSymbol::Rollback => tool_base + 3,
        }
    }

    pub fn origin(self) -> Origin {
        match self {
            ActionSymbol::JudgePick(_)
            | ActionSymbol::VerdictSatisfied
            | ActionSymbol::VerdictUnsatisfied
            | ActionSymbol::Accept
            | ActionSymbol::Rollback => Origin::Tool,
            _ => Origin::Planner,
        }
    }

    pub fn name(self) -> String {
        match self {
            ActionSymbol::Continue => "continue".into(),
            ActionSymbol::Stop => "stop".into(),
            ActionSymbol::Batch(tag) => format!("batch_{}", tag.as_str()),
            ActionSymbol::BatchAll => "batch_all".into(),
            ActionSymbol::ModeFullCompose => "mode_full_compose".into(),
            ActionSymbol::ModeLocalEdit => "mode_local_edit".into(),
            ActionSymbol::ModeRegenerate => "mode_regenerate".into(),
            ActionSymbol::Template(t) => format!("template_{t}"),
            ActionSymbol::JudgePick(i) => format!("judge_pick_{i}"),
            ActionSymbol::VerdictSatisfied => "verdict_satisfied".into(),
            ActionSymbol::VerdictUnsatisfied => "verdict_unsatisfied".into(),
            ActionSymbol::Accept => "accept".into(),
            ActionSymbol::Rollback => "rollback".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::vocabulary().into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for ActionSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl From<ActionSymbol> for String {
    fn from(a: ActionSymbol) -> String {
        a.name()
    }
}

impl TryFrom<String> for ActionSymbol {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        ActionSymbol::parse(&s).ok_or_else(|| format!("unknown action symbol `{s}`"))
    }
}

pub const FEATURE_DIM: usize = 9;

/// State features: bias, pending fraction per tag (scheduling order), progress
/// through the iteration budget, last-step rollback flag, completed fraction,
/// pending conflict-flagged fraction.
pub fn state_features(
    ledger: &GoalLedger,
    goals: &[Goal],
    iteration: usize,
    max_iterations: usize,
    last_rollback: bool,
) -> Vec<f64> {
    let total = ledger.total().max(1) as f64;
    let mut per_tag = [0.0; 4];
    let mut conflicts = 0.0;
    for goal in goals.iter().filter(|g| ledger.is_pending(&g.id)) {
        per_tag[goal.tag.precedence() as usize] += 1.0;
        if goal.conflict {
            conflicts += 1.0;
        }
    }
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.push(1.0);
    f.extend(per_tag.iter().map(|c| c / total));
    f.push(iteration as f64 / max_iterations.max(1) as f64);
    f.push(if last_rollback { 1.0 } else { 0.0 });
    f.push(ledger.completed().len() as f64 / total);
    f.push(conflicts / total);
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_a_bijection() {
        let vocab = ActionSymbol::vocabulary();
        for (i, a) in vocab.iter().enumerate() {
            assert_eq!(a.index(), i, "{a}");
            assert_eq!(ActionSymbol::parse(&a.name()), Some(*a));
        }
        assert_eq!(vocab.len(), 24);
    }

    #[test]
    fn serde_uses_names() {
        let s = serde_json::to_string(&ActionSymbol::Batch(GoalTag::TextOverlay)).unwrap();
        assert_eq!(s, "\"batch_text_overlay\"");
        let back: ActionSymbol = serde_json::from_str("\"judge_pick_3\"").unwrap();
        assert_eq!(back, ActionSymbol::JudgePick(3));
        assert!(serde_json::from_str::<ActionSymbol>("\"teleport\"").is_err());
    }

    #[test]
    fn tool_symbols_are_tool_origin() {
        assert_eq!(ActionSymbol::VerdictSatisfied.origin(), Origin::Tool);
        assert_eq!(ActionSymbol::JudgePick(0).origin(), Origin::Tool);
        assert_eq!(ActionSymbol::Stop.origin(), Origin::Planner);
        assert_eq!(ActionSymbol::Template(1).origin(), Origin::Planner);
    }
}
